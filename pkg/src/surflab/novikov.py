"""Morse-Novikov homology of closed 1-forms on genus-g surfaces.

Ranks are computed over the Novikov field of the period group from the
one-vertex CW structure of the surface: the boundary matrices are the
abelianized Fox derivatives of the relator ``prod [a_i, b_i]`` with each
generator sent to ``t**period``.

Series carry a *floor*: a series is known exactly for exponents ``>= floor``
and nothing is claimed below it.  Finite sums are exact (``floor = -inf``);
only inversion introduces a finite floor.  Precision propagates through
arithmetic the way p-adic precision does.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import FloorExhausted, InputError
from .symreal import SymReal, parse, parse_list

_MAX_DIVISION_STEPS = 200_000


def _key(e: SymReal):
    return e.mpf()


class NovikovSeries:
    """Element of the Novikov field: ``sum c_i t^{e_i}`` with decreasing ``e_i``."""

    __slots__ = ("terms", "floor")

    def __init__(self, terms: Iterable[tuple[SymReal, Fraction]] = (), floor: float = -math.inf):
        acc: dict[SymReal, Fraction] = {}
        for e, c in terms:
            e = parse(e) if not isinstance(e, SymReal) else e
            acc[e] = acc.get(e, Fraction(0)) + Fraction(c)
        kept = [(e, c) for e, c in acc.items() if c != 0 and float(e) >= floor]
        kept.sort(key=lambda ec: _key(ec[0]), reverse=True)
        self.terms: tuple[tuple[SymReal, Fraction], ...] = tuple(kept)
        self.floor = float(floor)

    # construction helpers
    @classmethod
    def monomial(cls, exponent, coeff=1) -> NovikovSeries:
        return cls([(parse(exponent), Fraction(coeff))])

    @classmethod
    def one(cls) -> NovikovSeries:
        return cls.monomial(0)

    @classmethod
    def zero(cls) -> NovikovSeries:
        return cls()

    @property
    def exact(self) -> bool:
        return self.floor == -math.inf

    def is_zero(self) -> bool:
        """True when no term survives above the floor (exact zero if ``exact``)."""
        return not self.terms

    @property
    def lead_exponent(self) -> SymReal:
        if not self.terms:
            raise ZeroDivisionError("zero series has no leading term")
        return self.terms[0][0]

    @property
    def lead_coefficient(self) -> Fraction:
        if not self.terms:
            raise ZeroDivisionError("zero series has no leading term")
        return self.terms[0][1]

    def _lead_float(self) -> float:
        return float(self.terms[0][0]) if self.terms else -math.inf

    def __add__(self, other: NovikovSeries) -> NovikovSeries:
        fl = max(self.floor, other.floor)
        return NovikovSeries(self.terms + other.terms, fl)

    def __neg__(self) -> NovikovSeries:
        return NovikovSeries([(e, -c) for e, c in self.terms], self.floor)

    def __sub__(self, other: NovikovSeries) -> NovikovSeries:
        return self + (-other)

    def __mul__(self, other: NovikovSeries) -> NovikovSeries:
        fl = max(self.floor + other._lead_float(), other.floor + self._lead_float())
        if math.isnan(fl):
            fl = -math.inf
        prods = [(e1 + e2, c1 * c2) for e1, c1 in self.terms for e2, c2 in other.terms]
        return NovikovSeries(prods, fl)

    def scale(self, q: Fraction | int) -> NovikovSeries:
        return NovikovSeries([(e, c * q) for e, c in self.terms], self.floor)

    def shift(self, exponent: SymReal) -> NovikovSeries:
        return NovikovSeries([(e + exponent, c) for e, c in self.terms], self.floor + float(exponent))

    def invert(self, floor: float) -> NovikovSeries:
        """Inverse, expanded by long division down to ``floor``.

        The leading exponent of the result is minus that of ``self``.
        """
        if self.is_zero():
            raise ZeroDivisionError("cannot invert the zero series")
        lead_e, lead_c = self.terms[0]
        if -float(lead_e) < floor:
            raise FloorExhausted(f"inverse leading exponent {-lead_e} is below floor {floor}")
        if len(self.terms) == 1 and self.exact:
            return NovikovSeries([(-lead_e, 1 / lead_c)])
        # precision of the input bounds the certified depth of the inverse
        depth = floor
        if not self.exact:
            depth = max(depth, self.floor - 2 * float(lead_e))
        out: list[tuple[SymReal, Fraction]] = []
        rem = {SymReal(): Fraction(1)}
        for _ in range(_MAX_DIVISION_STEPS):
            if not rem:
                break
            e_r = max(rem, key=_key)
            q_e = e_r - lead_e
            if float(q_e) < depth:
                break
            q_c = rem[e_r] / lead_c
            out.append((q_e, q_c))
            for e, c in self.terms:
                ee = e + q_e
                if float(ee) < depth + float(lead_e):
                    continue
                v = rem.get(ee, Fraction(0)) - q_c * c
                if v:
                    rem[ee] = v
                else:
                    rem.pop(ee, None)
        else:
            raise FloorExhausted("long division did not terminate above the floor")
        return NovikovSeries(out, depth)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NovikovSeries):
            return NotImplemented
        fl = max(self.floor, other.floor)
        a = [t for t in self.terms if float(t[0]) >= fl]
        b = [t for t in other.terms if float(t[0]) >= fl]
        return a == b

    def agrees_above(self, other: NovikovSeries, level: float) -> bool:
        a = [t for t in self.terms if float(t[0]) >= level]
        b = [t for t in other.terms if float(t[0]) >= level]
        return a == b

    def __repr__(self) -> str:
        return f"NovikovSeries({self})"

    def __str__(self) -> str:
        if not self.terms:
            body = "0"
        else:
            parts = []
            for e, c in self.terms:
                if e.is_zero():
                    parts.append(f"{c}")
                else:
                    parts.append(f"{c}·t^{{{e}}}")
            body = " + ".join(parts).replace("+ -", "- ")
        if not self.exact:
            body += f" + O(t^{{{self.floor:g}}})"
        return body


# free functions mirroring the operation names
def series_add(a: NovikovSeries, b: NovikovSeries) -> NovikovSeries:
    return a + b


def series_mul(a: NovikovSeries, b: NovikovSeries) -> NovikovSeries:
    return a * b


def series_invert(a: NovikovSeries, floor: float = -50.0) -> NovikovSeries:
    return a.invert(floor)


class NovikovMatrix:
    """Immutable rectangular matrix of Novikov series."""

    def __init__(self, rows: Sequence[Sequence[NovikovSeries]]):
        rows = tuple(tuple(r) for r in rows)
        if rows and len({len(r) for r in rows}) != 1:
            raise InputError("NovikovMatrix rows must have equal length")
        self.rows = rows

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.rows), len(self.rows[0]) if self.rows else 0)

    def __getitem__(self, ij):
        i, j = ij
        return self.rows[i][j]

    def __matmul__(self, other: NovikovMatrix) -> NovikovMatrix:
        n, k = self.shape
        k2, m = other.shape
        if k != k2:
            raise InputError("shape mismatch")
        out = []
        for i in range(n):
            row = []
            for j in range(m):
                acc = NovikovSeries.zero()
                for r in range(k):
                    acc = acc + self.rows[i][r] * other.rows[r][j]
                row.append(acc)
            out.append(row)
        return NovikovMatrix(out)

    def is_zero(self) -> bool:
        return all(e.is_zero() for r in self.rows for e in r)

    def rank(self, floor: float) -> int:
        """Rank over the Novikov field by valuation-greedy Gaussian elimination."""
        a = [list(r) for r in self.rows]
        n, m = self.shape
        rows_left = list(range(n))
        cols_left = list(range(m))
        rank = 0
        while rows_left and cols_left:
            best = None
            for i in rows_left:
                for j in cols_left:
                    s = a[i][j]
                    if s.is_zero():
                        continue
                    if best is None or s.lead_exponent > a[best[0]][best[1]].lead_exponent:
                        best = (i, j)
            if best is None:
                if any(not a[i][j].exact for i in rows_left for j in cols_left):
                    raise FloorExhausted("remaining block is zero only up to the floor")
                break
            pi, pj = best
            inv = a[pi][pj].invert(floor)
            rows_left.remove(pi)
            cols_left.remove(pj)
            for i in rows_left:
                if a[i][pj].is_zero() and a[i][pj].exact:
                    continue
                factor = a[i][pj] * inv
                for j in cols_left:
                    a[i][j] = a[i][j] - factor * a[pi][j]
                a[i][pj] = NovikovSeries.zero()
            rank += 1
        return rank


@dataclass(frozen=True)
class PeriodVector:
    """Periods (alpha_1, beta_1, ..., alpha_g, beta_g) of a closed 1-form."""

    genus: int
    periods: tuple[SymReal, ...]

    def __post_init__(self):
        if self.genus < 1:
            raise InputError("genus must be >= 1")
        if len(self.periods) != 2 * self.genus:
            raise InputError(f"expected {2 * self.genus} periods, got {len(self.periods)}")

    @classmethod
    def parse(cls, genus: int, text) -> PeriodVector:
        return cls(genus, tuple(parse_list(text)))

    def is_zero(self) -> bool:
        return all(p.is_zero() for p in self.periods)

    def scaled(self, c) -> PeriodVector:
        c = parse(c)
        if c.is_rational():
            return PeriodVector(self.genus, tuple(p * c for p in self.periods))
        # irrational scalar: only rational periods can be scaled exactly
        return PeriodVector(self.genus, tuple(c * p for p in self.periods))

    def default_floor(self) -> float:
        return -50.0 * (max(abs(float(p)) for p in self.periods) + 1.0)

    def to_json(self) -> str:
        return json.dumps({"genus": self.genus, "periods": [str(p) for p in self.periods]})

    @classmethod
    def from_json(cls, text: str) -> PeriodVector:
        try:
            d = json.loads(text)
            return cls.parse(int(d["genus"]), d["periods"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad PeriodVector JSON: {exc}") from exc


@dataclass(frozen=True)
class HomologyRanks:
    ranks: tuple[int, int, int]
    euler: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "euler", self.ranks[0] - self.ranks[1] + self.ranks[2])

    def to_json(self) -> str:
        return json.dumps({"ranks": list(self.ranks), "euler": self.euler})

    @classmethod
    def from_json(cls, text: str) -> HomologyRanks:
        d = json.loads(text)
        hr = cls(tuple(int(r) for r in d["ranks"]))
        if "euler" in d and d["euler"] != hr.euler:
            raise InputError("euler inconsistent with ranks")
        return hr


def _gen(p: SymReal) -> NovikovSeries:
    """``t^p - 1``."""
    return NovikovSeries([(p, 1), (SymReal(), -1)])


def cellular_complex(w: PeriodVector) -> tuple[NovikovMatrix, NovikovMatrix]:
    """Boundary matrices ``(d2, d1)`` of the one-vertex CW complex.

    ``d2`` is the 2g x 1 column of abelianized Fox derivatives of the surface
    relator, ``d1`` the 1 x 2g row ``(t^{alpha_i} - 1, t^{beta_i} - 1)``.
    """
    one = NovikovSeries.one()
    d1, d2 = [], []
    for i in range(w.genus):
        alpha, beta = w.periods[2 * i], w.periods[2 * i + 1]
        d1 += [_gen(alpha), _gen(beta)]
        d2 += [[one - NovikovSeries.monomial(beta)], [_gen(alpha)]]
    return NovikovMatrix(d2), NovikovMatrix([d1])


def novikov_ranks(w: PeriodVector, floor: float | None = None, retries: int = 3) -> HomologyRanks:
    d2, d1 = cellular_complex(w)
    floor = w.default_floor() if floor is None else floor
    for attempt in range(retries + 1):
        try:
            r1 = d1.rank(floor)
            r2 = d2.rank(floor)
            break
        except FloorExhausted:
            if attempt == retries:
                raise
            floor *= 2
    n1 = 2 * w.genus
    return HomologyRanks((1 - r1, n1 - r1 - r2, 1 - r2))


def euler_number(w: PeriodVector) -> int:
    return novikov_ranks(w).euler
