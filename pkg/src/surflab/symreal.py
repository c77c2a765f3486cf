"""Exact real numbers as rational combinations of independent symbols.

Exponents of Novikov series and torus slopes must be compared exactly: two
terms merge only when their exponents are *equal*, which floating point cannot
decide.  A :class:`SymReal` is a finite sum ``sum q_s * s`` with rational
``q_s`` over symbols assumed linearly independent over Q (``1``, ``sqrt2``,
``sqrt3``, ``sqrt5``, ``pi`` and any user-registered symbol).  Equality is
exact; ordering uses an 80-bit numeric witness.
"""

from __future__ import annotations

from fractions import Fraction
from functools import total_ordering
from typing import Iterable, Mapping, Union

import mpmath
import sympy as sp

from .errors import InputError

_PREC = 80

# name -> (sympy atom, witness)
_SYMBOLS: dict[str, tuple[sp.Expr, object]] = {
    "1": (sp.Integer(1), lambda: mpmath.mpf(1)),
    "sqrt2": (sp.sqrt(2), lambda: mpmath.sqrt(2)),
    "sqrt3": (sp.sqrt(3), lambda: mpmath.sqrt(3)),
    "sqrt5": (sp.sqrt(5), lambda: mpmath.sqrt(5)),
    "pi": (sp.pi, lambda: +mpmath.pi),
}


def _witness(name: str) -> mpmath.mpf:
    with mpmath.workprec(_PREC):
        return _SYMBOLS[name][1]()


def register_symbol(name: str, value: float | str) -> None:
    """Register an extra independent symbol with a numeric witness.

    The caller asserts independence from the existing basis over Q.
    """
    if name in _SYMBOLS:
        raise InputError(f"symbol {name!r} already registered")
    with mpmath.workprec(_PREC):
        w = mpmath.mpf(value)
    _SYMBOLS[name] = (sp.Symbol(name, positive=True), lambda: w)


Number = Union["SymReal", int, Fraction]


@total_ordering
class SymReal:
    """Immutable exact real: rational combination of basis symbols."""

    __slots__ = ("_c", "_hash")

    def __init__(self, coeffs: Mapping[str, Fraction | int] | None = None):
        c = {}
        for k, v in (coeffs or {}).items():
            if k not in _SYMBOLS:
                raise InputError(f"unknown symbol {k!r}")
            v = Fraction(v)
            if v:
                c[k] = v
        self._c = c
        self._hash = hash(frozenset(c.items()))

    @classmethod
    def rational(cls, q: Fraction | int | str) -> SymReal:
        return cls({"1": Fraction(q)})

    @classmethod
    def coerce(cls, x: Number) -> SymReal:
        if isinstance(x, SymReal):
            return x
        if isinstance(x, (int, Fraction)):
            return cls.rational(x)
        raise TypeError(f"cannot coerce {type(x).__name__} to SymReal exactly")

    @property
    def coeffs(self) -> dict[str, Fraction]:
        return dict(self._c)

    def is_zero(self) -> bool:
        return not self._c

    def is_rational(self) -> bool:
        return set(self._c) <= {"1"}

    def __add__(self, other: Number) -> SymReal:
        o = SymReal.coerce(other)
        c = dict(self._c)
        for k, v in o._c.items():
            c[k] = c.get(k, 0) + v
        return SymReal(c)

    __radd__ = __add__

    def __neg__(self) -> SymReal:
        return SymReal({k: -v for k, v in self._c.items()})

    def __sub__(self, other: Number) -> SymReal:
        return self + (-SymReal.coerce(other))

    def __rsub__(self, other: Number) -> SymReal:
        return SymReal.coerce(other) - self

    def __mul__(self, q: Fraction | int) -> SymReal:
        if isinstance(q, SymReal):
            if q.is_rational():
                q = q._c.get("1", Fraction(0))
            elif self.is_rational():
                return q * self._c.get("1", Fraction(0))
            else:
                raise TypeError("product of two irrational SymReals is not closed")
        q = Fraction(q)
        return SymReal({k: v * q for k, v in self._c.items()})

    __rmul__ = __mul__

    def mpf(self) -> mpmath.mpf:
        with mpmath.workprec(_PREC):
            return mpmath.fsum(mpmath.mpf(v.numerator) / v.denominator * _witness(k) for k, v in self._c.items())

    def __float__(self) -> float:
        return float(self.mpf())

    def __eq__(self, other: object) -> bool:
        if isinstance(other, (int, Fraction)):
            other = SymReal.rational(other)
        if not isinstance(other, SymReal):
            return NotImplemented
        return self._c == other._c

    def __lt__(self, other: Number) -> bool:
        d = self - SymReal.coerce(other)
        if d.is_zero():
            return False
        return d.mpf() < 0

    def __hash__(self) -> int:
        return self._hash

    def sympy(self) -> sp.Expr:
        return sp.Add(*[sp.Rational(v.numerator, v.denominator) * _SYMBOLS[k][0] for k, v in self._c.items()])

    def __repr__(self) -> str:
        return f"SymReal({self})"

    def __str__(self) -> str:
        if not self._c:
            return "0"
        parts = []
        for k in sorted(self._c, key=lambda s: (s != "1", s)):
            v = self._c[k]
            if k == "1":
                parts.append(str(v))
            elif v == 1:
                parts.append(k)
            elif v == -1:
                parts.append("-" + k)
            else:
                parts.append(f"{v}*{k}")
        return "+".join(parts).replace("+-", "-")


_LOCALS = {"sqrt2": sp.sqrt(2), "sqrt3": sp.sqrt(3), "sqrt5": sp.sqrt(5), "phi": sp.GoldenRatio,
           "golden": sp.GoldenRatio, "pi": sp.pi}


def parse(text: str | int | Fraction | SymReal) -> SymReal:
    """Parse ``"pi"``, ``"2*sqrt(2) - 1/3"``, ``"phi"`` ... into a SymReal."""
    if isinstance(text, SymReal):
        return text
    if isinstance(text, (int, Fraction)):
        return SymReal.rational(text)
    if isinstance(text, float):
        raise InputError("floats are not exact; pass a string such as '1/3' or 'sqrt2'")
    local = dict(_LOCALS)
    local.update({k: v[0] for k, v in _SYMBOLS.items() if isinstance(v[0], sp.Symbol)})
    try:
        expr = sp.sympify(str(text).strip(), locals=local, rational=True)
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise InputError(f"cannot parse real {text!r}") from exc
    expr = sp.expand(expr.expand(func=True).rewrite(sp.sqrt))
    reverse = {v[0]: k for k, v in _SYMBOLS.items()}
    coeffs: dict[str, Fraction] = {}
    for atom, coef in expr.as_coefficients_dict().items():
        if not coef.is_Rational:
            raise InputError(f"non-rational coefficient in {text!r}")
        if atom not in reverse:
            raise InputError(f"{text!r} uses {atom}, outside the supported symbol basis")
        coeffs[reverse[atom]] = coeffs.get(reverse[atom], Fraction(0)) + Fraction(int(coef.p), int(coef.q))
    return SymReal(coeffs)


def parse_list(text: str | Iterable) -> list[SymReal]:
    if isinstance(text, str):
        items = [t for t in text.split(",") if t.strip()]
    else:
        items = list(text)
    return [parse(t) for t in items]
