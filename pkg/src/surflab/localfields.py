"""Planar Hamiltonians of the constructions and their fixed-point analysis.

The basic Hamiltonian for genus ``g`` is the product of ``h/2`` lines
through the origin,

    H0(x, y) = prod_{j=1}^{h/2} (x - tan(j a) y),   h = 4g - 2,  a = 2 pi / h,

with a degenerate saddle of index ``2 - 2g`` at the origin.  The
``linear_perturbed`` variant adds ``delta * x`` (``2g - 2`` simple saddles),
the ``cubic_perturbed`` variant subtracts ``delta * x**3``.

Sign convention: ``X_H = (-dH/dy, dH/dx)`` for the area form ``dx ^ dy``, so
``H = (x**2 + y**2) / 2`` rotates counterclockwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import sympy as sp

from .errors import AngleJump, GeometryViolation, InputError, TolTooCoarse, ZeroOnContour

X, Y = sp.symbols("x y", real=True)
VARIANTS = ("pure", "linear_perturbed", "cubic_perturbed", "custom")
DEFAULT_DELTA = 0.1


def _broadcast_lambdify(expr, shape_like=True):
    fn = sp.lambdify((X, Y), expr, "numpy")

    def call(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.asarray(fn(x, y), dtype=float), np.broadcast(x, y).shape).copy()

    return call


def product_lines(genus: int) -> sp.Expr:
    """Exact product ``prod (x - tan(j a) y)`` for the given genus."""
    h = 4 * genus - 2
    a = 2 * sp.pi / h
    return sp.Mul(*[X - sp.tan(j * a) * Y for j in range(1, h // 2 + 1)])


class PlanarHamiltonian:
    """A polynomial (or general sympy) Hamiltonian on the plane.

    Use :meth:`construction` for the genus-``g`` Hamiltonians and
    :meth:`custom` for anything else.
    """

    def __init__(self, expr: sp.Expr, genus: Optional[int] = None, variant: str = "custom",
                 delta: float = 0.0, exact: Optional[sp.Expr] = None):
        if variant not in VARIANTS:
            raise InputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if variant == "pure" and delta != 0:
            raise InputError("pure variant has delta = 0")
        if variant in ("linear_perturbed", "cubic_perturbed") and delta == 0:
            raise InputError(f"{variant} needs a nonzero delta")
        self.genus = genus
        self.variant = variant
        self.delta = float(delta)
        self.exact = exact if exact is not None else expr
        self.expr = sp.expand(expr)
        hx, hy = sp.diff(self.expr, X), sp.diff(self.expr, Y)
        self._exprs = {
            "h": self.expr, "hx": hx, "hy": hy,
            "hxx": sp.diff(hx, X), "hxy": sp.diff(hx, Y), "hyy": sp.diff(hy, Y),
        }
        self._f = {k: _broadcast_lambdify(v) for k, v in self._exprs.items()}
        names = ("h", "hx", "hy", "hxx", "hxy", "hyy")
        self._joint = sp.lambdify((X, Y), [self._exprs[k] for k in names], "numpy", cse=True)
        self.is_polynomial = self.expr.is_polynomial(X, Y)
        self.bound_available = self.is_polynomial
        if self.is_polynomial:
            self._hess_polys = {k: sp.Poly(self._exprs[k], X, Y) for k in ("hxx", "hxy", "hyy")}

    # construction helpers
    @classmethod
    def construction(cls, genus: int, variant: str = "pure", delta: Optional[float] = None) -> PlanarHamiltonian:
        if genus < 2:
            raise InputError("genus must be >= 2")
        h = 4 * genus - 2
        a = 2 * math.pi / h
        for j in range(1, h // 2 + 1):
            if abs(math.cos(j * a)) < 1e-12:
                raise InputError(f"tan({j}a) is infinite")
        if variant == "pure":
            delta = 0.0
        elif delta is None:
            delta = DEFAULT_DELTA
        exact = product_lines(genus)
        numeric = sp.expand(sp.N(sp.expand(exact), 30))
        d = sp.Float(delta, 30)
        if variant == "linear_perturbed":
            exact, numeric = exact + d * X, numeric + d * X
        elif variant == "cubic_perturbed":
            exact, numeric = exact - d * X**3, numeric - d * X**3
        elif variant != "pure":
            raise InputError(f"variant {variant!r} is not a construction; use custom()")
        return cls(numeric, genus, variant, float(delta), exact=exact)

    @classmethod
    def custom(cls, expr: str | sp.Expr) -> PlanarHamiltonian:
        if isinstance(expr, str):
            try:
                expr = sp.sympify(expr, locals={"x": X, "y": Y})
            except (sp.SympifyError, SyntaxError) as exc:
                raise InputError(f"cannot parse Hamiltonian {expr!r}") from exc
        return cls(expr)

    @property
    def h(self) -> int:
        return 4 * self.genus - 2

    @property
    def a(self) -> float:
        return 2 * math.pi / self.h

    def __repr__(self) -> str:
        if self.variant == "custom":
            return f"PlanarHamiltonian({self.expr})"
        return f"PlanarHamiltonian(g={self.genus}, {self.variant}, delta={self.delta})"

    # evaluation, vectorised over the leading axes of p
    def value(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return self._f["h"](p[..., 0], p[..., 1])

    def gradient(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.stack([self._f["hx"](p[..., 0], p[..., 1]), self._f["hy"](p[..., 0], p[..., 1])], axis=-1)

    def hessian(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        x, y = p[..., 0], p[..., 1]
        hxx, hxy, hyy = self._f["hxx"](x, y), self._f["hxy"](x, y), self._f["hyy"](x, y)
        return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)

    def derivatives(self, p):
        """Value, gradient and hessian in one pass."""
        p = np.asarray(p, dtype=float)
        x, y = p[..., 0], p[..., 1]
        shape = p.shape[:-1]
        h, hx, hy, hxx, hxy, hyy = self._joint(x, y)
        v = np.empty(shape)
        v[...] = h
        gr = np.empty(shape + (2,))
        gr[..., 0], gr[..., 1] = hx, hy
        hs = np.empty(shape + (2, 2))
        hs[..., 0, 0], hs[..., 0, 1], hs[..., 1, 0], hs[..., 1, 1] = hxx, hxy, hxy, hyy
        return v, gr, hs

    def vector(self, p) -> np.ndarray:
        g = self.gradient(p)
        return np.stack([-g[..., 1], g[..., 0]], axis=-1)

    def jacobian(self, p) -> np.ndarray:
        return hamiltonian_jacobian(self.hessian(p))

    def jacobian_bound(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Upper bound of the Frobenius norm of DX over boxes ``[lo, hi]``."""
        if not self.is_polynomial:
            raise InputError("rigorous bound only for polynomial Hamiltonians")
        mx = np.maximum(np.abs(lo[..., 0]), np.abs(hi[..., 0]))
        my = np.maximum(np.abs(lo[..., 1]), np.abs(hi[..., 1]))
        tot = np.zeros_like(mx)
        for k, mult in (("hxx", 1.0), ("hxy", 2.0), ("hyy", 1.0)):
            b = np.zeros_like(mx)
            for (i, j), c in zip(self._hess_polys[k].monoms(), self._hess_polys[k].coeffs()):
                b = b + abs(float(c)) * mx**i * my**j
            tot = tot + mult * b**2
        return np.sqrt(tot)

    def conservation_residual(self) -> sp.Expr:
        """Symbolic ``grad H . X_H`` (identically zero)."""
        hx, hy = sp.diff(self.exact, X), sp.diff(self.exact, Y)
        return sp.simplify(hx * (-hy) + hy * hx)


def hamiltonian_jacobian(hess: np.ndarray) -> np.ndarray:
    """DX for X = (-H_y, H_x): [[-H_yx, -H_yy], [H_xx, H_xy]]."""
    hxx, hxy, hyy = hess[..., 0, 0], hess[..., 0, 1], hess[..., 1, 1]
    return np.stack([np.stack([-hxy, -hyy], -1), np.stack([hxx, hxy], -1)], -2)


def evaluate(H, p) -> tuple[float, np.ndarray]:
    """``(H(p), X_H(p))``."""
    p = np.asarray(p, dtype=float)
    return float(H.value(p)), H.vector(p)


# fixed points

@dataclass
class FixedPointRecord:
    location: tuple[float, float]
    lefschetz_index: int
    jacobian: np.ndarray
    nondegenerate: bool
    hyperbolic_regions: Optional[int] = None
    chart: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "location": [float(v) for v in self.location],
            "lefschetz_index": int(self.lefschetz_index),
            "jacobian": np.asarray(self.jacobian).tolist(),
            "nondegenerate": bool(self.nondegenerate),
            "hyperbolic_regions": self.hyperbolic_regions,
            "chart": self.chart,
        }


def _numeric_jacobian_bound(field, lo, hi) -> np.ndarray:
    # sampled Frobenius norm on a 3x3 grid per box with a safety factor of 2
    best = np.zeros(lo.shape[:-1])
    for fx in (0.0, 0.5, 1.0):
        for fy in (0.0, 0.5, 1.0):
            p = np.stack([lo[..., 0] + fx * (hi[..., 0] - lo[..., 0]), lo[..., 1] + fy * (hi[..., 1] - lo[..., 1])], -1)
            best = np.maximum(best, np.linalg.norm(field.jacobian(p), axis=(-2, -1)))
    return 2.0 * best + 1e-12


def _boxes_components(lo: np.ndarray, hi: np.ndarray) -> list[list[int]]:
    n = len(lo)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    eps = 1e-12
    for i in range(n):
        touch = np.all((lo <= hi[i] + eps) & (hi >= lo[i] - eps), axis=1)
        for j in np.nonzero(touch)[0]:
            if j > i:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    comps: dict[int, list[int]] = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    return list(comps.values())


def _newton(field, p0: np.ndarray, tol: float, max_iter: int = 300) -> tuple[np.ndarray, bool]:
    p = np.array(p0, dtype=float)
    for _ in range(max_iter):
        v = field.vector(p)
        jac = field.jacobian(p)
        step, *_ = np.linalg.lstsq(jac, -v, rcond=1e-13)
        p = p + step
        if np.linalg.norm(step) < 0.01 * tol:
            break
    return p, np.linalg.norm(field.vector(p)) < 1e-9


def find_zeros(H, region: Sequence[float], tol: float = 1e-10, cell: float | None = None,
               max_depth: int = 40, winding_radius: float | None = None,
               with_regions: bool = True, domain=None) -> list[FixedPointRecord]:
    """All zeros of the vector field of ``H`` in ``region = (xmin, xmax, ymin, ymax)``.

    Quadtree subdivision discards a box when ``|X(center)| > L * r`` with ``L``
    a bound on ``|DX|`` over the box and ``r`` its half-diagonal; surviving
    boxes are clustered and each cluster is polished by Newton's method.
    ``domain`` (e.g. a :class:`RegionD`) further restricts the search; it
    must provide ``box_outside(lo, hi)`` and ``contains(p)``.  For fields
    without a polynomial bound the Lipschitz constant is estimated from
    samples of the Jacobian on each box (with a factor 2 margin).
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    xmin, xmax, ymin, ymax = map(float, region)
    if not (xmax > xmin and ymax > ymin):
        raise InputError("empty region")
    size = max(xmax - xmin, ymax - ymin)
    cell = cell if cell is not None else size * 2.0**-12
    bound = getattr(H, "jacobian_bound", None) if getattr(H, "bound_available", False) else None
    lo = np.array([[xmin, ymin]])
    hi = np.array([[xmax, ymax]])
    survivors_lo, survivors_hi = [], []
    for _ in range(max_depth):
        if len(lo) == 0:
            break
        c = 0.5 * (lo + hi)
        r = 0.5 * np.linalg.norm(hi - lo, axis=1)
        L = bound(lo, hi) if bound is not None else _numeric_jacobian_bound(H, lo, hi)
        keep = np.linalg.norm(H.vector(c), axis=1) <= L * r
        if domain is not None:
            keep &= ~domain.box_outside(lo, hi)
        lo, hi, c = lo[keep], hi[keep], c[keep]
        small = np.max(hi - lo, axis=1) <= cell
        survivors_lo.append(lo[small])
        survivors_hi.append(hi[small])
        lo, hi, c = lo[~small], hi[~small], c[~small]
        # split remaining boxes in four
        nlo, nhi = [], []
        for qx in (0, 1):
            for qy in (0, 1):
                a_lo = np.stack([np.where(qx, c[:, 0], lo[:, 0]), np.where(qy, c[:, 1], lo[:, 1])], 1)
                a_hi = np.stack([np.where(qx, hi[:, 0], c[:, 0]), np.where(qy, hi[:, 1], c[:, 1])], 1)
                nlo.append(a_lo)
                nhi.append(a_hi)
        lo, hi = np.concatenate(nlo), np.concatenate(nhi)
    if len(lo):
        survivors_lo.append(lo)
        survivors_hi.append(hi)
    slo = np.concatenate(survivors_lo) if survivors_lo else np.zeros((0, 2))
    shi = np.concatenate(survivors_hi) if survivors_hi else np.zeros((0, 2))
    zeros: list[np.ndarray] = []
    for comp in _boxes_components(slo, shi):
        clo, chi = slo[comp].min(axis=0), shi[comp].max(axis=0)
        centers = 0.5 * (slo[comp] + shi[comp])
        start = centers[np.argmin(np.linalg.norm(H.vector(centers), axis=1))]
        p, ok = _newton(H, start, tol)
        margin = 2 * cell
        if not ok or np.any(p < clo - margin) or np.any(p > chi + margin):
            continue
        if not (xmin - tol <= p[0] <= xmax + tol and ymin - tol <= p[1] <= ymax + tol):
            continue
        if domain is not None and not domain.contains(p):
            continue
        merged = False
        for z in zeros:
            d = np.linalg.norm(z - p)
            if d <= 10 * tol:
                merged = True
            elif d < cell:
                raise TolTooCoarse(f"distinct zeros {z} and {p} closer than the resolution")
        if not merged:
            zeros.append(p)
    zeros.sort(key=lambda z: (round(z[0], 9), round(z[1], 9)))
    records = []
    for z in zeros:
        others = [np.linalg.norm(z - w) for w in zeros if w is not z]
        rad = winding_radius or 0.25 * min(others + [0.4 * size])
        records.append(classify_zero(H, z, rad, with_regions=with_regions))
    return records


def classify_zero(H, z, radius: float, with_regions: bool = True) -> FixedPointRecord:
    jac = np.asarray(H.jacobian(np.asarray(z)))
    det = float(np.linalg.det(jac))
    scale = 1.0 + float(np.sum(jac * jac))
    nondeg = abs(det) > 1e-8 * scale
    if nondeg:
        idx = 1 if det > 0 else -1
    else:
        idx = winding_index(H, z, radius)
    regions = None
    if with_regions and hasattr(H, "value"):
        try:
            regions = hyperbolic_regions(H, z, radius)
        except (ZeroOnContour, AngleJump):
            regions = None
        if regions is not None and regions > 0 and 1 - regions // 2 != idx:
            regions = None  # sector count not meaningful here (elliptic/parabolic sectors)
        if regions == 0:
            regions = None
    return FixedPointRecord((float(z[0]), float(z[1])), int(idx), jac, bool(nondeg), regions)


# indices

def _field_fn(field) -> Callable[[np.ndarray], np.ndarray]:
    return field.vector if hasattr(field, "vector") else field


def winding_index(field, center: Sequence[float], radius: float, n0: int = 256,
                  max_depth: int = 30) -> int:
    """Winding number of the field along the circle ``|p - center| = radius``."""
    vec = _field_fn(field)
    c = np.asarray(center, dtype=float)

    def at(theta):
        return vec(c + radius * np.stack([np.cos(theta), np.sin(theta)], -1))

    thetas = np.linspace(0.0, 2 * np.pi, n0 + 1)
    vals = at(thetas)
    total = 0.0
    for k in range(n0):
        total += _arc_angle(at, thetas[k], thetas[k + 1], vals[k], vals[k + 1], max_depth)
    w = total / (2 * np.pi)
    if abs(w - round(w)) > 1e-6:
        raise AngleJump(f"accumulated angle {w} is not an integer")
    return int(round(w))


def _arc_angle(at, t0, t1, v0, v1, depth) -> float:
    n0, n1 = np.linalg.norm(v0), np.linalg.norm(v1)
    if min(n0, n1) <= 1e-8:
        raise ZeroOnContour(f"field vanishes on the contour (|X| = {min(n0, n1):.2e})")
    d = math.atan2(v0[0] * v1[1] - v0[1] * v1[0], v0[0] * v1[0] + v0[1] * v1[1])
    if abs(d) < np.pi / 4:
        return d
    if depth == 0:
        if abs(d) >= np.pi / 2:
            raise AngleJump("adjacent samples differ by >= pi/2 after maximal refinement")
        return d
    tm = 0.5 * (t0 + t1)
    vm = at(np.array(tm))
    return _arc_angle(at, t0, tm, v0, vm, depth - 1) + _arc_angle(at, tm, t1, vm, v1, depth - 1)


def hyperbolic_regions(H, zero: Sequence[float], radius: float, n: int = 8192) -> int:
    """Number of hyperbolic sectors at an isolated zero.

    Counted as the sign changes of ``H - H(zero)`` on the circle of the given
    radius: each hyperbolic sector is bounded by two separatrices on which
    ``H`` takes the critical value.
    """
    z = np.asarray(zero, dtype=float)
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    pts = z + radius * np.stack([np.cos(theta), np.sin(theta)], -1)
    v = np.linalg.norm(H.vector(pts), axis=1)
    if np.min(v) <= 1e-8:
        raise ZeroOnContour("field vanishes on the contour")
    f = H.value(pts) - H.value(z)
    scale = np.max(np.abs(f))
    s = np.sign(np.where(np.abs(f) <= 1e-13 * scale, 0.0, f))
    s = s[s != 0]
    if len(s) == 0:
        return 0
    return int(np.sum(s != np.roll(s, 1)))


# smooth steps

def smoothstep(u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """C-infinity step: 0 for u <= 0, 1 for u >= 1, strictly increasing between.

    Returns the value and its first two derivatives.
    """
    u = np.asarray(u, dtype=float)
    s = np.array(u >= 1.0, dtype=float)
    s1, s2 = np.zeros(u.shape), np.zeros(u.shape)
    mid = (u > 0) & (u < 1)
    if not np.any(mid):
        return s, s1, s2
    x = u[mid]
    v = 1.0 - x
    a, b = np.exp(-1.0 / x), np.exp(-1.0 / v)
    a1, b1 = a / x**2, -b / v**2
    a2, b2 = a * (1.0 / x**4 - 2.0 / x**3), b * (1.0 / v**4 - 2.0 / v**3)
    den = a + b
    num1 = a1 * b - a * b1
    num1d = a2 * b - a * b2
    s[mid] = a / den
    s1[mid] = num1 / den**2
    s2[mid] = (num1d * den - 2.0 * num1 * (a1 + b1)) / den**3
    return s, s1, s2


# region D

@dataclass(frozen=True)
class Side:
    index: int  # 1-based, counterclockwise, side l is the bottom one
    start: np.ndarray
    end: np.ndarray
    normal: np.ndarray  # outward unit normal
    offset: float  # D: normal . p <= offset
    kind: str  # "identified" or "circle"
    bisector: Optional[int]  # j with x - tan(j a) y = 0 bisecting the side

    @property
    def direction(self) -> np.ndarray:
        d = self.end - self.start
        return d / np.linalg.norm(d)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.start + self.end)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    def reflect(self, p: np.ndarray) -> np.ndarray:
        """Reflection across the line of this side."""
        p = np.asarray(p, dtype=float)
        d = p @ self.normal - self.offset
        return p - 2.0 * d[..., None] * self.normal


def mirror(p: np.ndarray) -> np.ndarray:
    """Reflection in the x-axis."""
    p = np.array(p, dtype=float)
    p[..., 1] *= -1.0
    return p


@dataclass
class RegionD:
    """Nested polygons D'' in D' in D around the origin.

    Vertices of D sit at radius ``scale`` on the rays
    ``x - tan(a/2 + (j-1) a) y = 0`` (``j != g``), which makes every side
    not crossing the x-axis bisected by a zero line of ``H0``.  Sides of the
    identified class move inward in D' and D'' (factors ``ratios``, by
    default depending on the genus); circle
    sides are shared by the three polygons.  ``band`` is the relative width of
    the strip next to each circle side where ``F`` blends into the height
    function, as a fraction of the narrowest D'-to-D margin of the identified
    sides; the same width bounds the overlap used by side gluings.
    """

    genus: int
    scale: float = 1.0
    ratios: Optional[tuple[float, float]] = None  # D'' and D' offsets relative to D
    band: float = 0.2
    sides: list[Side] = field(init=False)

    def __post_init__(self):
        g = self.genus
        if g < 2:
            raise GeometryViolation("genus must be >= 2")
        if self.ratios is None:
            # strips of two identified sides next to a common circle side meet
            # at relative offset cos(a); stay halfway between that and D
            ca = math.cos(2 * math.pi / (4 * g - 2))
            self.ratios = (1 - 0.5 * (1 - ca), 1 - 0.25 * (1 - ca))
        if not 0 < self.ratios[0] < self.ratios[1] < 1:
            raise GeometryViolation("need 0 < D'' ratio < D' ratio < 1")
        h = 4 * g - 2
        a = 2 * math.pi / h
        rays = []
        for j in range(1, h // 2 + 1):
            if j == g:
                continue
            phi = a / 2 + (j - 1) * a
            base = math.pi / 2 - phi
            rays += [base % (2 * math.pi), (base + math.pi) % (2 * math.pi)]
        rays.sort()
        verts = [self.scale * np.array([math.cos(t), math.sin(t)]) for t in rays]
        # start at the vertex ending the bottom side: first ray past 3pi/2
        start = next(k for k, t in enumerate(rays) if t > 1.5 * math.pi)
        n = len(verts)
        sides = []
        for i in range(n):
            A = verts[(start + i) % n]
            B = verts[(start + i + 1) % n]
            mid = 0.5 * (A + B)
            nrm = mid / np.linalg.norm(mid)
            kind = "identified" if (i + 1) % 2 == g % 2 else "circle"
            ang = math.atan2(mid[1], mid[0])
            bis = None
            for j in range(1, h // 2 + 1):
                # zero line j has polar angle pi/2 - j a (mod pi)
                if abs(((math.pi / 2 - j * a) - ang + math.pi / 2) % math.pi - math.pi / 2) < 1e-9:
                    bis = j
            sides.append(Side(i + 1, A, B, nrm, float(mid @ nrm), kind, bis))
        self.sides = sides
        self._check()

    @property
    def l(self) -> int:
        return 4 * self.genus - 4

    def collar_width(self) -> float:
        margins = [s.offset * (1 - self.ratios[1]) for s in self.sides if s.kind == "identified"]
        return self.band * min(margins)

    def box_outside(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """True for boxes certainly disjoint from D (D is convex)."""
        out = np.zeros(lo.shape[:-1], dtype=bool)
        for s in self.sides:
            # minimum of n.p over the box
            m = np.minimum(lo[..., 0] * s.normal[0], hi[..., 0] * s.normal[0]) + \
                np.minimum(lo[..., 1] * s.normal[1], hi[..., 1] * s.normal[1])
            out |= m > s.offset
        return out

    def side(self, i: int) -> Side:
        return self.sides[(i - 1) % self.l]

    def offsets(self, level: str) -> np.ndarray:
        out = []
        for s in self.sides:
            if s.kind == "circle" or level == "D":
                out.append(s.offset)
            else:
                out.append(s.offset * (self.ratios[0] if level == "Dpp" else self.ratios[1]))
        return np.array(out)

    def contains(self, p, level: str = "D", strict: bool = False) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        normals = np.array([s.normal for s in self.sides])
        val = p @ normals.T - self.offsets(level)
        return np.all(val < 0, axis=-1) if strict else np.all(val <= 1e-12, axis=-1)

    def mirror_index(self, i: int) -> int:
        """Index of the side that is the x-axis mirror image of side i."""
        return (2 * self.genus - 2 - i - 1) % self.l + 1

    def _check(self):
        g, l = self.genus, self.l
        s = self.sides
        if not (abs(s[g - 2].direction[0]) < 1e-12 and abs(s[3 * g - 4].direction[0]) < 1e-12):
            raise GeometryViolation("sides s_{g-1}, s_{3g-3} must be vertical")
        if not (abs(s[2 * g - 3].direction[1]) < 1e-12 and abs(s[l - 1].direction[1]) < 1e-12):
            raise GeometryViolation("sides s_{2g-2}, s_l must be horizontal")
        for k in range(l):
            if s[(k + 1) % l].kind == s[k].kind:
                raise GeometryViolation("side classes must alternate")
            m = self.mirror_index(k + 1)
            if np.max(np.abs(mirror(s[k].start) - s[m - 1].end)) > 1e-12:
                raise GeometryViolation("polygon is not symmetric in the x-axis")
        # strips of identified sides must not meet inside D
        inner = self.offsets("Dpp")
        for k in range(l):
            if s[k].kind != "identified":
                continue
            k2 = (k + 2) % l
            nmat = np.array([s[k].normal, s[k2].normal])
            if abs(np.linalg.det(nmat)) < 1e-12:
                continue
            p = np.linalg.solve(nmat, [inner[k], inner[k2]])
            if self.contains(p, "D"):
                raise GeometryViolation(f"blending strips of sides {k + 1} and {k2 + 1} overlap inside D")
        for v in [x.start for x in s]:
            ang = math.atan2(v[0], v[1])  # x = tan(phi) y  <=>  phi = atan2(x, y)
            h = 4 * g - 2
            a = 2 * math.pi / h
            jj = ((ang - a / 2) / a) % (h // 2)
            if abs(jj - round(jj)) > 1e-9 or int(round(jj)) % (h // 2) + 1 == g:
                raise GeometryViolation("vertex off the prescribed rays")


# blended Hamiltonians

class BlendedHamiltonian:
    """``Hhat = H0 + sum_i nu_i (H1_i - H0)`` and optionally the circle blend.

    ``H1_i = kappa_i * (x - tan(j_i a) y)`` on the strip of identified side
    ``i``; ``kappa_i`` is the cofactor of that line in ``H0`` evaluated at the
    midpoint of the D' side, so ``H1_i`` and ``H0`` agree to first order
    there.  With ``stage="F"`` the field is further blended, in a strip of
    width ``geometry.collar_width()`` along each circle side, into the
    height function ``G_k(p) = Hhat(q) + s * dHhat/dn(q)`` (``q`` the
    projection onto the side line, ``s`` the outward distance).  ``G_k`` and
    ``Hhat`` agree to first order on the side, so the blend adds no zeros
    for a thin strip, and near a side ``F`` is determined by the values of
    ``Hhat`` and its normal derivative along the side.
    """

    def __init__(self, H: PlanarHamiltonian, geometry: RegionD, stage: str = "F"):
        if stage not in ("Hhat", "F"):
            raise InputError("stage must be 'Hhat' or 'F'")
        if H.genus != geometry.genus:
            raise GeometryViolation("Hamiltonian and region have different genus")
        self.H0 = H
        self.geometry = geometry
        self.stage = stage
        self.genus = H.genus
        self.is_polynomial = False
        self.bound_available = True
        g = geometry
        a = H.a
        pp, p1 = g.offsets("Dpp"), g.offsets("Dp")
        self._strips = []
        for k, s in enumerate(g.sides):
            if s.kind != "identified":
                continue
            j = s.bisector
            if j is None:
                raise GeometryViolation(f"identified side {s.index} is not bisected by a zero line")
            ell = np.array([1.0, -math.tan(j * a)])
            m = s.midpoint * (p1[k] / s.offset)
            cof = float(H.value(m)) / float(m @ ell) if abs(m @ ell) > 1e-12 else None
            if cof is None:
                # midpoint on the zero line: use the directional derivative across it
                cof = float(H.gradient(m) @ ell) / float(ell @ ell)
            self._strips.append((s, pp[k], p1[k], cof * ell))
        self._circles = [s for s in g.sides if s.kind == "circle"]
        self.width = g.collar_width()

    # Hhat
    def _hhat(self, p, order=2):
        p = np.asarray(p, dtype=float)
        v, gr, hs = self.H0.derivatives(p)
        if order < 2:
            hs = None
        flat = p.reshape(-1, 2)
        v0, g0 = v.reshape(-1), gr.reshape(-1, 2)
        h0 = None if hs is None else hs.reshape(-1, 2, 2)
        v, gr = v0.copy(), g0.copy()
        hs = None if h0 is None else h0.copy()
        for s, cpp, cp, lin in self._strips:
            u = (flat @ s.normal - cpp) / (cp - cpp)
            m = u > 0
            if not np.any(m):
                continue
            nu, nu1, nu2 = smoothstep(u[m])
            gnu = (nu1 / (cp - cpp))[:, None] * s.normal
            diff = flat[m] @ lin - v0[m]
            gdiff = lin - g0[m]
            v[m] += nu * diff
            gr[m] += nu[:, None] * gdiff + diff[:, None] * gnu
            if hs is not None:
                hnu = (nu2 / (cp - cpp) ** 2)[:, None, None] * np.outer(s.normal, s.normal)
                hs[m] += (-nu[:, None, None] * h0[m] + gnu[:, :, None] * gdiff[:, None, :]
                          + gdiff[:, :, None] * gnu[:, None, :] + diff[:, None, None] * hnu)
        shape = p.shape[:-1]
        return v.reshape(shape), gr.reshape(shape + (2,)), None if hs is None else hs.reshape(shape + (2, 2))

    def _full(self, p, order=2):
        v, gr, hs = self._hhat(p, order)
        if self.stage == "Hhat":
            return v, gr, hs
        p = np.asarray(p, dtype=float)
        shape = p.shape[:-1]
        flat = p.reshape(-1, 2)
        v0, g0 = v.reshape(-1), gr.reshape(-1, 2)
        h0 = None if hs is None else hs.reshape(-1, 2, 2)
        v, gr = v0.copy(), g0.copy()
        hs = None if h0 is None else h0.copy()
        w = self.width
        for s in self._circles:
            n, t = s.normal, s.direction
            d_all = s.offset - flat @ n  # inward distance
            m = d_all < w
            if not np.any(m):
                continue
            d = d_all[m]
            st, st1, st2 = smoothstep(d / w)
            tau = 1.0 - st
            q = flat[m] + d[:, None] * n
            hv, hg, hh = self._hhat(q, 2)
            N = hg @ n
            hn = hh @ n
            Phn = (hn @ t)[:, None] * t
            gv = hv - d * N
            gg = hg - d[:, None] * Phn
            gtau = (st1 / w)[:, None] * n
            diff = gv - v0[m]
            gdiff = gg - g0[m]
            v[m] += tau * diff
            gr[m] += tau[:, None] * gdiff + diff[:, None] * gtau
            if hs is not None:
                eps = 1e-5 * max(1.0, self.geometry.scale)
                dtt = ((self._hhat(q + eps * t, 2)[2] @ n) @ t - (self._hhat(q - eps * t, 2)[2] @ n) @ t) / (2 * eps)
                P = np.outer(t, t)
                gh = (P @ hh @ P + n[:, None] * Phn[:, None, :] + Phn[:, :, None] * n[None, :]
                      - (d * dtt)[:, None, None] * P)
                htau = (-st2 / w**2)[:, None, None] * np.outer(n, n)
                hs[m] += (tau[:, None, None] * (gh - h0[m]) + gtau[:, :, None] * gdiff[:, None, :]
                          + gdiff[:, :, None] * gtau[:, None, :] + diff[:, None, None] * htau)
        return v.reshape(shape), gr.reshape(shape + (2,)), None if hs is None else hs.reshape(shape + (2, 2))

    def value(self, p):
        return self._full(p, order=1)[0]

    def gradient(self, p):
        return self._full(p, order=1)[1]

    def hessian(self, p):
        return self._full(p, order=2)[2]

    def vector(self, p):
        g = self.gradient(p)
        return np.stack([-g[..., 1], g[..., 0]], axis=-1)

    def jacobian(self, p):
        return hamiltonian_jacobian(self.hessian(p))

    def jacobian_bound(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Exact polynomial bound on boxes inside D'', sampled bound elsewhere."""
        corners = np.stack([lo, np.stack([lo[..., 0], hi[..., 1]], -1), hi,
                            np.stack([hi[..., 0], lo[..., 1]], -1)], 0)
        inner = np.all(self.geometry.contains(corners, "Dpp", strict=True), axis=0)
        if self.stage == "F":
            w = self.width
            for s in self._circles:
                inner &= np.all(s.offset - corners @ s.normal > w, axis=0)
        out = np.empty(lo.shape[:-1])
        if np.any(inner):
            out[inner] = self.H0.jacobian_bound(lo[inner], hi[inner])
        if np.any(~inner):
            out[~inner] = _numeric_jacobian_bound(self, lo[~inner], hi[~inner])
        return out

    def length_scale(self, p) -> np.ndarray:
        """Width of the thinnest blend band near p (inf away from all bands).

        Integrators limit the distance travelled per step by a fraction of
        this, since the blends vary on this scale.
        """
        p = np.asarray(p, dtype=float)
        out = np.full(p.shape[:-1], np.inf)
        for s, cpp, cp, _ in self._strips:
            u = (p @ s.normal - cpp) / (cp - cpp)
            out = np.where((u > -0.5) & (u < 1.5), np.minimum(out, abs(cp - cpp)), out)
        if self.stage == "F":
            for s in self._circles:
                d = s.offset - p @ s.normal
                out = np.where(d < 1.5 * self.width, np.minimum(out, self.width), out)
        return out

    def nu(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        out = np.zeros(p.shape[:-1])
        for s, cpp, cp, _ in self._strips:
            out = np.maximum(out, smoothstep((p @ s.normal - cpp) / (cp - cpp))[0])
        return out

    def linear_part(self, side_index: int):
        for s, _, _, lin in self._strips:
            if s.index == side_index:
                return lin
        raise KeyError(side_index)


def interpolated_field(H: PlanarHamiltonian, stage: str = "Hhat", geometry: RegionD | None = None) -> BlendedHamiltonian:
    geometry = geometry or RegionD(H.genus)
    return BlendedHamiltonian(H, geometry, stage)
