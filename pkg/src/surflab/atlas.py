"""Glued surfaces as flat chart atlases, and blow-up coordinates at a zero.

The surface of genus ``g`` is assembled from

* ``g`` flat tori ``[0,1]^2`` carrying constant fields ``w_i`` of irrational
  slope, each with an open square ``R_i`` (two sides along the flow) removed;
* the polygon chart ``D`` carrying the interpolated Hamiltonian ``F``, whose
  identified sides are glued in pairs and whose remaining sides close up into
  ``g`` boundary circles ``C_k``;
* ``g`` connector charts ``P_k``: a square ``Q_k`` (glued rigidly to
  ``R_k``) minus a star-shaped hole ``Gamma_k`` whose boundary is glued to
  ``C_k``.

In the connector the field is ``(c_k, 0)`` with Hamiltonian
``L_k = g0_k - c_k Y``.  The hole boundary is parametrized by the arclength
``sigma`` of ``C_k`` with height ``Y(sigma) = (g0_k - F(sigma)) / c_k``, so a
point of ``C_k`` and its image on ``Gamma_k`` carry the same Hamiltonian value
and the flow crosses both in the same sense.  A flow line of ``P_k`` at height
``Y`` therefore re-enters ``D`` on the level ``F = g0_k - c_k Y`` and, as long
as it avoids the zeros of ``F``, leaves through a point of the same level.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .errors import CrowdedDisc, FieldMismatch, GeometryViolation, InputError, NotVanishingAtOrigin
from .localfields import (BlendedHamiltonian, PlanarHamiltonian, RegionD, Side, find_zeros, mirror)
from .symreal import SymReal, parse

DEFAULT_SLOPES = ("sqrt2", "phi", "sqrt3", "sqrt5", "1+sqrt2", "1+sqrt3", "2+sqrt5", "sqrt2+sqrt3")
HOLE_FRACTION = 0.35  # hole extent relative to the connector square side


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


# boundary circles of D

class CircleProfile:
    """One boundary circle of ``D``: one side, or a side and its mirror image.

    ``sigma`` runs over ``[0, length)`` counterclockwise with respect to ``D``.
    The hole of the connector is the star-shaped curve
    ``(lam * r cos(theta), r sin(theta))`` with ``r sin(theta) = Y(sigma)`` and
    ``theta`` increasing in ``sigma``, vanishing where ``Y`` crosses 0
    upwards and equal to ``pi`` where it crosses downwards.
    """

    def __init__(self, index: int, sides: Sequence[Side], field, epsilon: float,
                 samples: int = 4096):
        self.index = index
        self.sides = list(sides)
        self.field = field
        self.epsilon = epsilon
        self.lengths = np.array([s.length for s in self.sides])
        self.cum = np.concatenate([[0.0], np.cumsum(self.lengths)])
        self.length = float(self.cum[-1])
        self._sample(samples)

    # geometry along the circle
    def _split(self, sigma):
        sigma = np.mod(np.asarray(sigma, dtype=float), self.length)
        k = np.clip(np.searchsorted(self.cum, sigma, side="right") - 1, 0, len(self.sides) - 1)
        return k, sigma - self.cum[k]

    def point(self, sigma) -> np.ndarray:
        k, s = self._split(sigma)
        starts = np.array([sd.start for sd in self.sides])
        dirs = np.array([sd.direction for sd in self.sides])
        return starts[k] + s[..., None] * dirs[k]

    def tangent(self, sigma) -> np.ndarray:
        k, _ = self._split(sigma)
        return np.array([sd.direction for sd in self.sides])[k]

    def normal(self, sigma) -> np.ndarray:
        k, _ = self._split(sigma)
        return np.array([sd.normal for sd in self.sides])[k]

    def value(self, sigma) -> np.ndarray:
        return self.field.value(self.point(sigma))

    def slope(self, sigma) -> np.ndarray:
        """dF/dsigma; positive where the flow enters ``D``."""
        return np.einsum("...i,...i->...", self.field.gradient(self.point(sigma)), self.tangent(sigma))

    def locate(self, p, side_index: int) -> float:
        """Arclength coordinate of a point lying on the given side."""
        for k, s in enumerate(self.sides):
            if s.index == side_index:
                t = float((np.asarray(p) - s.start) @ s.direction)
                return float(self.cum[k] + min(max(t, 0.0), s.length))
        raise KeyError(side_index)

    # profile and hole
    def _sample(self, n: int) -> None:
        sig = np.linspace(0.0, self.length, n, endpoint=False)
        h = self.value(sig)
        self.sigma_grid, self.h_grid = sig, h
        lo, hi = float(h.min()), float(h.max())
        if hi - lo < 1e-9:
            raise GeometryViolation(f"circle C{self.index}: F is constant on the circle")
        # reference level: middle of the widest band of levels met exactly twice
        levels = np.linspace(lo, hi, 1001)[1:-1]
        counts = np.array([np.count_nonzero(np.diff(np.sign(np.append(h, h[0]) - lv)) != 0) for lv in levels])
        good = counts == 2
        if not np.any(good):
            raise GeometryViolation(f"circle C{self.index}: no level crosses the profile exactly twice")
        best, run, start = (0, 0), 0, 0
        for i, ok in enumerate(good):
            if ok:
                if run == 0:
                    start = i
                run += 1
                if run > best[1] - best[0]:
                    best = (start, i + 1)
            else:
                run = 0
        self.g0 = float(0.5 * (levels[best[0]] + levels[best[1] - 1]))
        self.c = max(hi - self.g0, self.g0 - lo) / (HOLE_FRACTION * self.epsilon)
        # crossings of the reference level
        y = (self.g0 - h) / self.c
        ups, downs = [], []
        for i in range(n):
            j = (i + 1) % n
            if y[i] < 0 <= y[j] or y[i] <= 0 < y[j]:
                ups.append(self._root(sig[i], sig[i] + self.length / n))
            elif y[i] > 0 >= y[j] or y[i] >= 0 > y[j]:
                downs.append(self._root(sig[i], sig[i] + self.length / n))
        if len(ups) != 1 or len(downs) != 1:
            raise GeometryViolation(f"circle C{self.index}: reference level is not crossed exactly twice")
        self.sigma_up = ups[0] % self.length
        self.sigma_down = downs[0] % self.length
        span1 = (self.sigma_down - self.sigma_up) % self.length
        self._span = (span1, self.length - span1)
        # radius on a sigma grid; at the crossings use the limit Y' / (theta' cos theta)
        m = 8192
        ss = self.sigma_up + np.linspace(0.0, self.length, m, endpoint=False)
        th, dth = self._theta(ss)
        yy = self.height(ss)
        r = np.empty(m)
        small = np.abs(np.sin(th)) < 1e-6
        r[~small] = yy[~small] / np.sin(th[~small])
        r[small] = (-self.slope(ss[small]) / self.c) / (dth[small] * np.cos(th[small]))
        if not np.all(np.isfinite(r)) or np.min(r) <= 0:
            raise GeometryViolation(f"circle C{self.index}: hole is not star-shaped")
        d = ss - self.sigma_up
        self._r = CubicSpline(np.append(d, self.length), np.append(r, r[0]), bc_type="periodic")
        xmax = float(np.max(np.abs(r * np.cos(th))))
        self.lam = HOLE_FRACTION * self.epsilon / xmax
        self._build_arcs()

    def _build_arcs(self) -> None:
        """Split the circle into maximal arcs on which F is strictly monotone.

        Arc ends are refined to the zeros (or sign jumps at vertices) of
        dF/dsigma; arcs where F is constant (flow tangent to the side) are
        dropped.  Arcs are stored unwrapped, ``lo < hi <= lo + length``.
        """
        n = len(self.sigma_grid)
        sl = self.slope(self.sigma_grid)
        sgn = np.where(np.abs(sl) < 1e-12, 0, np.sign(sl)).astype(int)
        if np.all(sgn == 0):
            raise GeometryViolation(f"circle C{self.index}: F is constant on the circle")
        # rotate so that index 0 starts a run
        k0 = next(i for i in range(n) if sgn[i] != sgn[i - 1])
        runs, i = [], 0
        while i < n:
            j = i
            while j + 1 < n and sgn[(k0 + j + 1) % n] == sgn[(k0 + i) % n]:
                j += 1
            runs.append((k0 + i, k0 + j, sgn[(k0 + i) % n]))
            i = j + 1
        step = self.length / n
        self.arcs = []
        for a, b, s in runs:
            if s == 0:
                continue
            lo = self._refine_switch(self.sigma_grid[0] + (a - 1) * step, self.sigma_grid[0] + a * step, s, 0)
            hi = self._refine_switch(self.sigma_grid[0] + b * step, self.sigma_grid[0] + (b + 1) * step, s, 1)
            ss = np.linspace(lo, hi, max(64, 4 * (b - a + 1)))
            ff = self.value(ss)
            self.arcs.append({"lo": lo, "hi": hi, "inflow": bool(s > 0), "s": ss, "f": ff,
                              "fmin": float(ff.min()), "fmax": float(ff.max())})

    def _refine_switch(self, a: float, b: float, s: int, end: int) -> float:
        """Point in [a, b] where the slope sign leaves (end=1) or enters (end=0) the value s."""
        inside = lambda x: np.sign(float(self.slope(x))) == s
        lo, hi = (a, b) if end == 1 else (b, a)  # lo inside the run, hi outside
        if not inside(lo):
            return lo
        if inside(hi):
            return hi
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if inside(mid):
                lo = mid
            else:
                hi = mid
        return lo

    def arc_solve(self, arc: dict, level) -> np.ndarray:
        """sigma on the arc with F(sigma) = level (levels inside the arc's range)."""
        level = np.asarray(level, dtype=float)
        f, s = arc["f"], arc["s"]
        if f[-1] < f[0]:
            f, s = f[::-1], s[::-1]
        x = np.interp(level, f, s)
        for _ in range(8):
            r = self.value(x) - level
            if np.all(np.abs(r) <= 1e-15 * (1.0 + np.abs(level))):
                break
            d = self.slope(x)
            x = np.clip(x - r / np.where(np.abs(d) > 1e-14, d, 1e-14), arc["lo"], arc["hi"])
        return x

    def level_crossings(self, level: float, inflow: bool) -> np.ndarray:
        """All sigma (unwrapped into [0, length)) where F = level on inflow or outflow arcs."""
        out = []
        for arc in self.arcs:
            if arc["inflow"] == inflow and arc["fmin"] <= level <= arc["fmax"]:
                out.append(float(self.arc_solve(arc, level)) % self.length)
        return np.array(out)

    def arc_index(self, sigma: float) -> int:
        for k, arc in enumerate(self.arcs):
            d = (sigma - arc["lo"]) % self.length
            if d <= arc["hi"] - arc["lo"] + 1e-12:
                return k
        return -1

    def _theta(self, sigma):
        """Polar angle of the hole point and its sigma-derivative.

        On an arc of length ``s`` between crossings the angle advances by
        ``pi`` as ``pi d/s + A sin(2 pi d/s)``; ``A`` gives the slope
        ``2 pi / length`` at both ends, which keeps the radius continuous.
        """
        d = np.mod(np.asarray(sigma, dtype=float) - self.sigma_up, self.length)
        s1, s2 = self._span
        k = 2 * math.pi / self.length
        first = d <= s1
        s = np.where(first, s1, s2)
        e = np.where(first, d, d - s1)
        A = (k * s - math.pi) / (2 * math.pi)
        th = math.pi * e / s + A * np.sin(2 * math.pi * e / s) + np.where(first, 0.0, math.pi)
        dth = math.pi / s + A * (2 * math.pi / s) * np.cos(2 * math.pi * e / s)
        return th, dth

    def _root(self, a: float, b: float) -> float:
        f = lambda s: float(self.value(s)) - self.g0
        fa, fb = f(a), f(b)
        if fa == 0:
            return a
        if fb == 0 or fa * fb > 0:
            return b
        return brentq(f, a, b, xtol=1e-15)

    def height(self, sigma) -> np.ndarray:
        return (self.g0 - self.value(sigma)) / self.c

    def hole(self, sigma) -> np.ndarray:
        """Point of the hole boundary in connector coordinates."""
        th, _ = self._theta(sigma)
        d = np.mod(np.asarray(sigma, dtype=float) - self.sigma_up, self.length)
        return np.stack([self.lam * self._r(d) * np.cos(th), self.height(sigma)], axis=-1)

    def hole_tangent(self, sigma) -> np.ndarray:
        """d(hole)/dsigma; the height component is exact."""
        th, dth = self._theta(sigma)
        d = np.mod(np.asarray(sigma, dtype=float) - self.sigma_up, self.length)
        r, r1 = self._r(d), self._r(d, 1)
        dx = self.lam * (r1 * np.cos(th) - r * np.sin(th) * dth)
        return np.stack([dx, -self.slope(sigma) / self.c], axis=-1)

    def level_points(self, level: float, inflow: Optional[bool] = None) -> np.ndarray:
        """All sigma with F(sigma) = level, optionally only inflow or outflow."""
        h = np.append(self.h_grid, self.h_grid[0])
        out = []
        n = len(self.sigma_grid)
        step = self.length / n
        for i in np.nonzero(np.diff(np.sign(h - level)) != 0)[0]:
            a = self.sigma_grid[i]
            s = brentq(lambda x: float(self.value(x)) - level, a, a + step, xtol=1e-15)
            if inflow is None or (self.slope(s) > 0) == inflow:
                out.append(s % self.length)
        return np.array(sorted(out))

    def to_json(self) -> dict:
        return {"index": self.index, "sides": [s.index for s in self.sides], "length": self.length,
                "g0": self.g0, "c": self.c, "lam": self.lam, "hole_fraction": HOLE_FRACTION}


# fields on flat charts

class LinearField:
    """Constant field ``w`` with local Hamiltonian ``w_y x - w_x y + k0``."""

    def __init__(self, w: Sequence[float], k0: float = 0.0):
        self.w = np.asarray(w, dtype=float)
        self.k0 = float(k0)

    def vector(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(self.w, p.shape).copy()

    def jacobian(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.zeros(p.shape[:-1] + (2, 2))

    def value(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return self.w[1] * p[..., 0] - self.w[0] * p[..., 1] + self.k0


# charts

@dataclass
class Chart:
    id: str
    kind: str  # torus | regionD | connector | cylinderBand
    field: object

    def contains(self, p) -> bool:
        raise NotImplementedError

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind}


@dataclass
class TorusChart(Chart):
    """``[0,1]^2`` with periodic sides minus the open square ``R``.

    ``R`` is centred at ``center`` and rotated by ``theta`` so that two of its
    sides are flow lines; ``to_square`` gives connector coordinates.
    """
    index: int = 0
    slope: Optional[SymReal] = None
    w: np.ndarray = None
    center: np.ndarray = None
    epsilon: float = 0.2

    @property
    def theta(self) -> float:
        return math.atan2(self.w[1], self.w[0])

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.w))

    def to_square(self, p) -> np.ndarray:
        """Connector coordinates of the periodic image of p nearest the square centre."""
        d = np.asarray(p, dtype=float) - self.center
        d = d - np.round(d)
        return d @ _rot(self.theta)  # = Rot(-theta) d for row vectors

    def from_square(self, q) -> np.ndarray:
        return np.mod(np.asarray(q, dtype=float) @ _rot(self.theta).T + self.center, 1.0)

    def in_square(self, p, strict: bool = True) -> np.ndarray:
        q = self.to_square(p)
        h = self.epsilon / 2
        return np.all(np.abs(q) < h, axis=-1) if strict else np.all(np.abs(q) <= h, axis=-1)

    def contains(self, p) -> bool:
        return not bool(self.in_square(p))

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "domain": "unit square, periodic, minus rotated square",
                "index": self.index, "slope": str(self.slope), "w": self.w.tolist(),
                "center": self.center.tolist(), "epsilon": self.epsilon, "theta": self.theta}


@dataclass
class RegionDChart(Chart):
    region: RegionD = None
    hamiltonian: PlanarHamiltonian = None

    def contains(self, p) -> bool:
        return bool(self.region.contains(p))

    def to_json(self) -> dict:
        r = self.region
        return {"id": self.id, "kind": self.kind, "domain": "convex polygon",
                "vertices": [s.start.tolist() for s in r.sides], "scale": r.scale,
                "ratios": list(r.ratios), "band": r.band, "hamiltonian": str(self.hamiltonian.expr)}


@dataclass
class ConnectorChart(Chart):
    """Square ``[-eps/2, eps/2]^2`` minus the star-shaped hole of one circle."""
    index: int = 0
    circle: CircleProfile = None
    epsilon: float = 0.2

    def inside_hole(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        C = self.circle
        ang = np.arctan2(q[..., 1], q[..., 0] / C.lam)
        # invert the monotone angle map on the sampled grid
        s, th = self._angle_table()
        sig = np.interp(np.mod(ang, 2 * math.pi), th, s)
        b = C.hole(sig)
        return np.hypot(q[..., 0] / C.lam, q[..., 1]) < np.hypot(b[..., 0] / C.lam, b[..., 1])

    def _angle_table(self):
        if not hasattr(self, "_atab"):
            C = self.circle
            s = C.sigma_up + np.linspace(0.0, C.length, 4097)
            b = C.hole(s)
            th = np.unwrap(np.arctan2(b[:, 1], b[:, 0] / C.lam))
            th = th - th[0]
            object.__setattr__(self, "_atab", (s, th))
        return self._atab

    def contains(self, p) -> bool:
        q = np.asarray(p, dtype=float)
        return bool(np.all(np.abs(q) <= self.epsilon / 2) and not self.inside_hole(q))

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "domain": "square minus star-shaped hole",
                "index": self.index, "epsilon": self.epsilon, "circle": self.circle.to_json()}


# transitions

@dataclass
class Transition:
    """Coordinate change from ``source`` to ``target`` over an edge or band.

    ``apply`` and ``jacobian`` act on single points (``sigma`` based maps need
    the side the point lies on, passed as ``edge``).
    """
    source: str
    target: str
    kind: str  # side | square | height | polar | polar_band
    edge: str
    apply: Callable = dc_field(repr=False, default=None)
    jacobian: Callable = dc_field(repr=False, default=None)
    weight: Optional[Callable] = dc_field(repr=False, default=None)  # density of the target area form

    def to_json(self) -> dict:
        return {"from": self.source, "to": self.target, "kind": self.kind, "edge": self.edge}


def side_gluing(region: RegionD, i: int) -> Transition:
    """``p -> mirror(r_i(p))``: carries side i onto its partner, a rotation."""
    s = region.side(i)
    k = region.mirror_index(i)
    refl = np.eye(2) - 2.0 * np.outer(s.normal, s.normal)
    J = np.diag([1.0, -1.0]) @ refl
    return Transition("D", "D", "side", f"s{i}->s{k}",
                      apply=lambda p, s=s: mirror(s.reflect(p)),
                      jacobian=lambda p, J=J: J.copy())


def square_gluings(torus: TorusChart, connector_id: str) -> tuple[Transition, Transition]:
    R = _rot(torus.theta)
    to_t = Transition(connector_id, torus.id, "square", f"Q{torus.index}->R{torus.index}",
                      apply=torus.from_square, jacobian=lambda p, R=R: R.copy())
    to_p = Transition(torus.id, connector_id, "square", f"R{torus.index}->Q{torus.index}",
                      apply=torus.to_square, jacobian=lambda p, R=R: R.T.copy())
    return to_t, to_p


def height_gluings(circle: CircleProfile, field, connector_id: str) -> tuple[Transition, Transition]:
    """Circle ``C_k`` of D to the hole of ``P_k`` and back, by arclength.

    The Jacobian sends the D field to the connector field and the side tangent
    to the hole tangent; its determinant is ``c Y'(sigma) / (-dF/dsigma) = 1``.
    """
    C = circle

    def d_to_p(p, side):
        return C.hole(C.locate(p, side))

    def p_to_d(sigma, side=None):
        return C.point(sigma)

    def jac_dp(p, side):
        s = C.locate(p, side)
        XD = field.vector(np.asarray(p, dtype=float))
        A = np.column_stack([XD, C.tangent(s)])
        B = np.column_stack([[C.c, 0.0], C.hole_tangent(s)])
        return B @ np.linalg.inv(A)

    def jac_pd(sigma, side=None):
        p = C.point(sigma)
        return np.linalg.inv(jac_dp(p, C.sides[C._split(sigma)[0]].index))

    edge = "+".join(f"s{s.index}" for s in C.sides)
    return (Transition("D", connector_id, "height", f"C{C.index}:{edge}", apply=d_to_p, jacobian=jac_dp),
            Transition(connector_id, "D", "height", f"C{C.index}:{edge}", apply=p_to_d, jacobian=jac_pd))


# the atlas

@dataclass
class SurfaceParams:
    genus: int
    variant: str = "pure"
    delta: Optional[float] = None
    epsilon: float = 0.2
    slopes: Optional[tuple[str, ...]] = None
    scale: Optional[float] = None
    ratios: Optional[tuple[float, float]] = None
    band: float = 0.2
    allow_rational: bool = False

    def resolved_slopes(self) -> list[str]:
        if self.slopes is not None:
            if len(self.slopes) != self.genus:
                raise InputError(f"need {self.genus} slopes, got {len(self.slopes)}")
            return [str(s) for s in self.slopes]
        return [DEFAULT_SLOPES[i % len(DEFAULT_SLOPES)] for i in range(self.genus)]

    def resolved_scale(self) -> float:
        return 1.0 if self.scale is None else float(self.scale)

    def to_json(self) -> dict:
        return {"genus": self.genus, "variant": self.variant, "delta": self.delta, "epsilon": self.epsilon,
                "slopes": self.resolved_slopes(), "scale": self.resolved_scale(),
                "ratios": None if self.ratios is None else list(self.ratios), "band": self.band,
                "allow_rational": self.allow_rational}

    @classmethod
    def from_json(cls, d: dict) -> SurfaceParams:
        try:
            return cls(genus=int(d["genus"]), variant=str(d.get("variant", "pure")), delta=d.get("delta"),
                       epsilon=float(d.get("epsilon", 0.2)),
                       slopes=None if d.get("slopes") is None else tuple(d["slopes"]),
                       scale=d.get("scale"), ratios=None if d.get("ratios") is None else tuple(d["ratios"]),
                       band=float(d.get("band", 0.2)), allow_rational=bool(d.get("allow_rational", False)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad surface parameters: {exc}") from exc


@dataclass
class ChartAtlas:
    """Charts, transitions and pairing tables of a glued surface."""
    genus: int
    params: SurfaceParams
    charts: dict
    transitions: list
    pairings: list  # (i, k) identified sides of D, i < k
    circles: list  # CircleProfile, C_k glued to P_k and T_k
    region: RegionD
    field_D: BlendedHamiltonian

    def chart(self, cid: str) -> Chart:
        return self.charts[cid]

    @property
    def tori(self) -> list[TorusChart]:
        return [self.charts[f"T{k}"] for k in range(1, self.genus + 1)]

    @property
    def connectors(self) -> list[ConnectorChart]:
        return [self.charts[f"P{k}"] for k in range(1, self.genus + 1)]

    def circle_of_side(self, i: int) -> CircleProfile:
        for C in self.circles:
            if any(s.index == i for s in C.sides):
                return C
        raise KeyError(i)

    def side_transition(self, i: int) -> Transition:
        return self._side_tr[i]

    def field_assignment(self) -> dict:
        out = {"D": "interpolated Hamiltonian F"}
        for T in self.tori:
            out[T.id] = f"constant field w = {T.w.tolist()} (slope {T.slope})"
        for P in self.connectors:
            out[P.id] = f"constant field ({P.circle.c}, 0), Hamiltonian {P.circle.g0} - {P.circle.c} Y"
        return out

    # topology
    def cell_counts(self) -> dict:
        """CW counts of D with its side identifications (circle sides left free)."""
        R = self.region
        verts = [s.start for s in R.sides]
        parent = list(range(len(verts)))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def vid(p):
            return int(np.argmin([np.linalg.norm(p - v) for v in verts]))

        for i, k in self.pairings:
            tr = self.side_transition(i)
            s = R.side(i)
            for p in (s.start, s.end):
                q = tr.apply(p)
                if np.min([np.linalg.norm(q - v) for v in verts]) > 1e-9:
                    raise GeometryViolation(f"gluing of s{i} does not map vertices to vertices")
                parent[find(vid(p))] = find(vid(q))
        V = len({find(v) for v in range(len(verts))})
        E = len(self.pairings) + sum(len(C.sides) for C in self.circles)
        # boundary circles: circle sides joined through vertex classes
        cparent = {s.index: s.index for C in self.circles for s in C.sides}

        def cfind(a):
            while cparent[a] != a:
                a = cparent[a]
            return a

        csides = [s for s in R.sides if s.kind == "circle"]
        for s in csides:
            for t in csides:
                if s.index < t.index and {find(vid(s.start)), find(vid(s.end))} & {find(vid(t.start)), find(vid(t.end))}:
                    cparent[cfind(s.index)] = cfind(t.index)
        nb = len({cfind(s.index) for s in csides})
        return {"V": V, "E": E, "F": 1, "boundary_circles": nb}

    def euler_characteristic(self) -> int:
        """chi(D / ~) plus the tori with squares removed; connectors are annuli."""
        c = self.cell_counts()
        chi_s = c["V"] - c["E"] + c["F"]
        # torus minus open square: V = 4 + 1, E = 4 + 2 + 1, F = 1
        chi_torus = 5 - 7 + 1
        # connector (square minus disc): V = 4 + 1, E = 4 + 1 + 1, F = 1
        chi_conn = 5 - 6 + 1
        # gluing along circles (chi 0) does not change the sum
        return chi_s + self.genus * (chi_torus + chi_conn)

    # serialization
    def to_json(self) -> dict:
        return {"format": "surflab-atlas", "version": 1, "genus": self.genus, "params": self.params.to_json(),
                "charts": [c.to_json() for c in self.charts.values()],
                "pairings": [list(p) for p in self.pairings],
                "circles": [C.to_json() for C in self.circles],
                "transitions": [t.to_json() for t in self.transitions],
                "fields": self.field_assignment()}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, doc) -> ChartAtlas:
        if isinstance(doc, (str, bytes)):
            try:
                doc = json.loads(doc)
            except json.JSONDecodeError as exc:
                raise InputError(f"atlas file is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("format") != "surflab-atlas":
            raise InputError("not a surflab atlas document")
        for key in ("params", "pairings", "circles", "charts"):
            if key not in doc:
                raise InputError(f"atlas document lacks {key!r}")
        atlas = build_surface(SurfaceParams.from_json(doc["params"]))
        if [list(p) for p in atlas.pairings] != [list(p) for p in doc["pairings"]]:
            raise InputError("pairing table in the document does not match the rebuilt atlas")
        if [C.to_json()["sides"] for C in atlas.circles] != [c.get("sides") for c in doc["circles"]]:
            raise InputError("circle table in the document does not match the rebuilt atlas")
        return atlas

    def validate(self, samples: int = 1000, seed: int = 0) -> dict:
        return validate(self, samples, seed)

    def cylinder_map(self, p, r: float = 1.0) -> np.ndarray:
        """Genus 2: the rectangle with top and bottom glued, embedded as a cylinder.

        The height is rescaled so that the rectangle becomes ``[-b, b] x [-pi, pi]``
        and then mapped by ``(x, y) -> (r cos y, x, r sin y)``.
        """
        if self.genus != 2:
            raise InputError("the cylinder map is defined for genus 2")
        p = np.asarray(p, dtype=float)
        ymax = float(np.max([abs(s.start[1]) for s in self.region.sides]))
        y = p[..., 1] * math.pi / ymax
        return np.stack([r * np.cos(y), p[..., 0], r * np.sin(y)], axis=-1)


def _circle_sides(region: RegionD) -> list[list[Side]]:
    g = region.genus
    out, used = [], set()
    order = [3 * g - 3, g - 1] + [s.index for s in region.sides]
    for i in order:
        s = region.side(i)
        if s.kind != "circle" or i in used:
            continue
        m = region.mirror_index(i)
        grp = [s] if m == i else [s, region.side(m)]
        used |= {x.index for x in grp}
        out.append(grp)
    return out


def build_surface(params: SurfaceParams | int, variant: str = "pure", **kw) -> ChartAtlas:
    """Assemble the atlas of the genus-g surface for one of the variants."""
    if not isinstance(params, SurfaceParams):
        params = SurfaceParams(genus=int(params), variant=variant, **kw)
    g = params.genus
    if g < 2:
        raise InputError("genus must be >= 2")
    eps = params.epsilon
    H = PlanarHamiltonian.construction(g, params.variant, params.delta)
    region = RegionD(g, scale=params.resolved_scale(), ratios=params.ratios, band=params.band)
    F = BlendedHamiltonian(H, region, "F")
    charts: dict = {"D": RegionDChart("D", "regionD", F, region=region, hamiltonian=H)}
    transitions: list = []
    pairings, side_tr = [], {}
    for s in region.sides:
        if s.kind != "identified":
            continue
        k = region.mirror_index(s.index)
        if region.side(k).kind != "identified":
            raise GeometryViolation(f"s{s.index} is paired with a circle side")
        tr = side_gluing(region, s.index)
        side_tr[s.index] = tr
        transitions.append(tr)
        if s.index < k:
            pairings.append((s.index, k))
    circles = [CircleProfile(k + 1, grp, F, eps) for k, grp in enumerate(_circle_sides(region))]
    if len(circles) != g:
        raise GeometryViolation(f"expected {g} boundary circles, found {len(circles)}")
    slopes = [parse(s) for s in params.resolved_slopes()]
    for k, (C, sl) in enumerate(zip(circles, slopes), start=1):
        if sl.is_rational() and not params.allow_rational:
            raise InputError(f"slope {sl} of torus {k} is rational")
        s = float(sl)
        w = C.c * np.array([1.0, s]) / math.hypot(1.0, s)
        T = TorusChart(f"T{k}", "torus", LinearField(w), index=k, slope=sl, w=w,
                       center=np.array([0.5, 0.5]), epsilon=eps)
        reach = eps / 2 * (abs(math.cos(T.theta)) + abs(math.sin(T.theta)))
        if reach + eps > 0.5 + 1e-12:
            raise GeometryViolation(f"square R{k} does not fit its torus with margin epsilon")
        P = ConnectorChart(f"P{k}", "connector", LinearField([C.c, 0.0], C.g0), index=k, circle=C, epsilon=eps)
        charts[T.id], charts[P.id] = T, P
        transitions += list(square_gluings(T, P.id)) + list(height_gluings(C, F, P.id))
    atlas = ChartAtlas(g, params, charts, transitions, pairings, circles, region, F)
    atlas._side_tr = side_tr
    return atlas


def paired_side(g: int, j: int) -> int:
    """Partner of identified side j: ``2g - 2 - j`` when that is a side, else ``6g - 6 - j``."""
    k = 2 * g - 2 - j
    return k if 1 <= k <= 4 * g - 4 else 6 * g - 6 - j


def validate(atlas: ChartAtlas, samples: int = 1000, seed: int = 0, raise_on_failure: bool = False) -> dict:
    """Re-run the structural, symplectic and field-coherence checks.

    Sampled points avoid the tangency set of each circle (where the height
    gluing is not a local diffeomorphism); everything else is sampled
    uniformly on the overlaps.
    """
    rng = np.random.default_rng(seed)
    R, F, g = atlas.region, atlas.field_D, atlas.genus
    out: dict = {}
    # tables
    ids = sorted(i for p in atlas.pairings for i in p)
    ident = sorted(s.index for s in R.sides if s.kind == "identified")
    circ = sorted(s.index for C in atlas.circles for s in C.sides)
    out["perfect_matching"] = ids == ident and circ == sorted(s.index for s in R.sides if s.kind == "circle") \
        and len(atlas.circles) == len(atlas.tori) == len(atlas.connectors) == g
    out["parity_rule"] = all((s.kind == "identified") == (s.index % 2 == g % 2) for s in R.sides)
    out["pairing_formula"] = all(k == paired_side(g, i) and i == paired_side(g, k) for i, k in atlas.pairings)
    out["euler_characteristic"] = atlas.euler_characteristic()
    out["euler_ok"] = out["euler_characteristic"] == 2 - 2 * g
    out["slopes_irrational"] = all(not T.slope.is_rational() for T in atlas.tori)
    # side gluings
    det_err, field_err, value_err = 0.0, 0.0, 0.0
    w = R.collar_width()
    per = max(1, samples // max(1, len(atlas.pairings) * 2))
    for s in R.sides:
        if s.kind != "identified":
            continue
        tr = atlas.side_transition(s.index)
        t = rng.uniform(0.0, 1.0, per)
        d = rng.uniform(-w, w, per)
        p = s.start + t[:, None] * (s.end - s.start) - d[:, None] * s.normal
        q = tr.apply(p)
        J = tr.jacobian(p[0])
        det_err = max(det_err, abs(np.linalg.det(J) - 1.0))
        field_err = max(field_err, float(np.max(np.abs(F.vector(p) @ J.T - F.vector(q)))))
        value_err = max(value_err, float(np.max(np.abs(F.value(p) - F.value(q)))))
    out["side_det_error"] = det_err
    out["side_field_mismatch"] = field_err
    out["side_value_mismatch"] = value_err
    # square gluings
    det_err, field_err = 0.0, 0.0
    for T, P in zip(atlas.tori, atlas.connectors):
        for tr in atlas.transitions:
            if tr.kind != "square" or T.id not in (tr.source, tr.target):
                continue
            J = tr.jacobian(None)
            det_err = max(det_err, abs(np.linalg.det(J) - 1.0))
            src = T if tr.source == T.id else P
            dst = P if src is T else T
            field_err = max(field_err, float(np.max(np.abs(J @ src.field.w - dst.field.w))))
        q = rng.uniform(-T.epsilon / 2, T.epsilon / 2, (per, 2))
        err = np.max(np.abs(T.to_square(T.from_square(q)) - q))
        field_err = max(field_err, float(err))
    out["square_det_error"] = det_err
    out["square_field_mismatch"] = field_err
    # height gluings
    det_err, hgt_err, sense_bad, push_err = 0.0, 0.0, 0, 0.0
    for C, P in zip(atlas.circles, atlas.connectors):
        sig = rng.uniform(0.0, C.length, per)
        sl = C.slope(sig)
        sig = sig[np.abs(sl) > 1e-6]
        pts = C.point(sig)
        hp = C.hole(sig)
        hgt_err = max(hgt_err, float(np.max(np.abs(C.value(sig) - P.field.value(hp)))))
        ht = C.hole_tangent(sig)
        sense_bad += int(np.count_nonzero(np.sign(-C.c * ht[:, 1]) != np.sign(C.slope(sig))))
        tr = next(t for t in atlas.transitions if t.kind == "height" and t.source == "D" and t.target == P.id)
        for s0, p0 in zip(sig[:50], pts[:50]):
            side = C.sides[int(C._split(s0)[0])].index
            J = tr.jacobian(p0, side)
            det_err = max(det_err, abs(np.linalg.det(J) - 1.0))
            push_err = max(push_err, float(np.max(np.abs(J @ F.vector(p0) - P.field.w))))
    out["height_det_error"] = det_err
    out["height_level_mismatch"] = hgt_err
    out["height_crossing_sense_violations"] = sense_bad
    out["height_field_mismatch"] = push_err
    out["ok"] = bool(out["perfect_matching"] and out["parity_rule"] and out["pairing_formula"] and out["euler_ok"]
                     and max(out["side_det_error"], out["square_det_error"]) < 1e-10
                     and out["height_det_error"] < 1e-10
                     and max(out["side_field_mismatch"], out["square_field_mismatch"]) < 1e-9
                     and out["height_level_mismatch"] < 1e-9 and sense_bad == 0
                     and (out["slopes_irrational"] or atlas.params.allow_rational))
    if raise_on_failure and not out["ok"]:
        if max(out["side_field_mismatch"], out["square_field_mismatch"], out["height_level_mismatch"]) >= 1e-9:
            raise FieldMismatch(json.dumps(out))
        raise GeometryViolation(json.dumps(out))
    return out


# blow-up of a zero

class BlowupGluing:
    """Radial profile ``f`` on ``[delta, 2 delta]`` and the cylinder area density.

    ``f(x) = x^2/2`` near ``delta`` and ``f(x) = x`` near ``2 delta``; in between
    a quintic matches value, slope and curvature at both ends.  In the
    coordinates ``(rho, theta) = (f(r), theta)`` the area form ``r dr dtheta``
    becomes ``h(rho) drho dtheta`` with ``h = f^{-1} (f^{-1})'``.
    """

    def __init__(self, delta: float, eps_f: Optional[float] = None):
        from scipy.interpolate import BPoly

        if delta <= 0:
            raise InputError("delta must be positive")
        self.delta = float(delta)
        self.eps_f = float(eps_f) if eps_f is not None else delta / 10
        a, b = self.delta + self.eps_f, 2 * self.delta - self.eps_f
        if not a < b:
            raise InputError("eps_f too large for delta")
        self._a, self._b = a, b
        self._mid = BPoly.from_derivatives([a, b], [[a * a / 2, a, 1.0], [b, 1.0, 0.0]])
        self.F = None  # glued Hamiltonian, set by glue_F users
        x = np.linspace(self.delta, 2 * self.delta, 4001)
        if np.min(self.fprime(x)) <= 0:
            raise InputError(f"interpolating profile is not monotone for eps_f = {self.eps_f}")

    def f(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.where(x <= self._a, 0.5 * x * x, np.where(x >= self._b, x, self._mid(np.clip(x, self._a, self._b))))

    def fprime(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.where(x <= self._a, x, np.where(x >= self._b, 1.0, self._mid(np.clip(x, self._a, self._b), 1)))

    def finv(self, rho) -> np.ndarray:
        """Inverse of f on [delta, 2 delta] by bracketed Newton."""
        rho = np.asarray(rho, dtype=float)
        lo = np.full(rho.shape, self.delta)
        hi = np.full(rho.shape, 2 * self.delta)
        x = np.clip(np.sqrt(2 * np.abs(rho)), lo, hi)
        for _ in range(100):
            r = self.f(x) - rho
            lo = np.where(r < 0, x, lo)
            hi = np.where(r > 0, x, hi)
            xn = x - r / self.fprime(x)
            bad = (xn <= lo) | (xn >= hi)
            xn = np.where(bad, 0.5 * (lo + hi), xn)
            if np.max(np.abs(xn - x)) < 1e-16:
                x = xn
                break
            x = xn
        return x

    def h(self, rho) -> np.ndarray:
        x = self.finv(rho)
        return x / self.fprime(x)


def _polar(z):
    z = np.asarray(z, dtype=float)

    def jac_inner(p):
        x, y = np.asarray(p, dtype=float) - z
        r2 = x * x + y * y
        return np.array([[x, y], [-y / r2, x / r2]])

    return jac_inner


def blowup_chart(z: Sequence[float], delta: float, field=None, zeros: Optional[Sequence] = None,
                 eps_f: Optional[float] = None) -> tuple[list[Transition], BlowupGluing]:
    """Cylinder coordinates around the zero ``z``.

    Inner band ``r <= delta + eps_f``: ``(rho, theta) = (r^2/2, theta)`` with
    form ``drho dtheta``.  Interpolation band up to ``2 delta``:
    ``(f(r), theta)`` with form ``h(rho) drho dtheta``.  Other zeros within
    ``2 delta`` (given, or searched for in ``field``) raise CrowdedDisc.
    """
    z = np.asarray(z, dtype=float)
    others = [] if zeros is None else [np.asarray(q, dtype=float) for q in zeros]
    if field is not None:
        box = [z[0] - 2.5 * delta, z[0] + 2.5 * delta, z[1] - 2.5 * delta, z[1] + 2.5 * delta]
        others += [np.asarray(r.location, dtype=float) for r in find_zeros(field, box, with_regions=False)]
    for q in others:
        d = float(np.linalg.norm(q - z))
        if 1e-9 < d < 2 * delta:
            raise CrowdedDisc(f"zero at {q.tolist()} lies within 2*delta of {z.tolist()}")
    bl = BlowupGluing(delta, eps_f)
    jac_inner = _polar(z)

    def inner(p):
        d = np.asarray(p, dtype=float) - z
        return np.stack([0.5 * np.sum(d * d, axis=-1), np.arctan2(d[..., 1], d[..., 0])], axis=-1)

    def band(p):
        d = np.asarray(p, dtype=float) - z
        r = np.hypot(d[..., 0], d[..., 1])
        return np.stack([bl.f(r), np.arctan2(d[..., 1], d[..., 0])], axis=-1)

    def jac_band(p):
        x, y = np.asarray(p, dtype=float) - z
        r = math.hypot(x, y)
        fp = float(bl.fprime(r))
        return np.array([[fp * x / r, fp * y / r], [-y / r**2, x / r**2]])

    trs = [Transition("disc", "cylinder", "polar", f"0<r<={bl._a:.6g}", apply=inner, jacobian=jac_inner,
                      weight=lambda rho: np.ones_like(np.asarray(rho, dtype=float))),
           Transition("disc", "cylinder", "polar_band", f"{bl._a:.6g}<=r<={2 * delta:.6g}", apply=band,
                      jacobian=jac_band, weight=bl.h)]
    return trs, bl


def circle_action(M: np.ndarray, theta) -> np.ndarray:
    """Angle of ``M u / |M u|`` for ``u = (cos theta, sin theta)``."""
    theta = np.asarray(theta, dtype=float)
    u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    v = u @ np.asarray(M, dtype=float).T
    return np.arctan2(v[..., 1], v[..., 0])


def boundary_velocity(A: np.ndarray, theta) -> np.ndarray:
    """Angular velocity on the boundary circle of the blow-up of ``x' = A x``."""
    theta = np.asarray(theta, dtype=float)
    u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    v = u @ np.asarray(A, dtype=float).T
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _as_callable(H) -> Callable:
    if hasattr(H, "value"):
        return lambda x, y: H.value(np.stack(np.broadcast_arrays(x, y), axis=-1))
    if isinstance(H, str) or hasattr(H, "free_symbols"):
        import sympy as sp

        from .localfields import X as SX, Y as SY
        expr = sp.sympify(H, locals={"x": SX, "y": SY})
        fn = sp.lambdify((SX, SY), expr, "numpy")
        return lambda x, y: np.broadcast_to(fn(x, y), np.broadcast(x, y).shape).astype(float)
    return H


class GluedHamiltonian:
    """``F(rho, theta)`` on the doubled cylinder built from a local Hamiltonian.

    ``F = H(sqrt(2 rho) u)`` for ``rho > 0`` and ``-H(-sqrt(-2 rho) u)`` for
    ``rho < 0``, ``u = (cos theta, sin theta)``, and 0 on ``rho = 0``.
    """

    def __init__(self, H):
        self._H = _as_callable(H)
        v0 = float(np.asarray(self._H(np.array(0.0), np.array(0.0))))
        if abs(v0) > 1e-14:
            raise NotVanishingAtOrigin(f"H(0) = {v0}, expected 0")
        e = 1e-6
        gx = (float(self._H(np.array(e), np.array(0.0))) - float(self._H(np.array(-e), np.array(0.0)))) / (2 * e)
        gy = (float(self._H(np.array(0.0), np.array(e))) - float(self._H(np.array(0.0), np.array(-e)))) / (2 * e)
        if math.hypot(gx, gy) > 1e-8:
            raise NotVanishingAtOrigin(f"dH(0) = ({gx:.3g}, {gy:.3g}); the origin must be a fixed point")

    def __call__(self, rho, theta) -> np.ndarray:
        rho, theta = np.broadcast_arrays(np.asarray(rho, dtype=float), np.asarray(theta, dtype=float))
        r = np.sqrt(2 * np.abs(rho))
        c, s = np.cos(theta), np.sin(theta)
        pos = self._H(r * c, r * s)
        neg = -self._H(-r * c, -r * s)
        return np.where(rho > 0, pos, np.where(rho < 0, neg, 0.0))


def glue_F(H) -> GluedHamiltonian:
    return GluedHamiltonian(H)


def one_sided_partials(F: Callable, theta: float, ks: Sequence[int] = (3, 4, 5, 6)) -> dict:
    """Central differences of F at ``rho = +-10^-k`` with step ``10^-k / 2``.

    Returns per side the sequences of ``dF/drho``, ``dF/dtheta`` and ``F``.
    """
    out = {"k": list(ks)}
    for name, sgn in (("right", 1.0), ("left", -1.0)):
        dr, dt, val = [], [], []
        for k in ks:
            r0 = sgn * 10.0 ** (-k)
            h = 0.5 * 10.0 ** (-k)
            dr.append(float((F(r0 + h, theta) - F(r0 - h, theta)) / (2 * h)))
            dt.append(float((F(r0, theta + 1e-6) - F(r0, theta - 1e-6)) / 2e-6))
            val.append(float(F(r0, theta)))
        out[name] = {"drho": dr, "dtheta": dt, "value": val}
    return out


def _limit(seq: Sequence[float], ks: Sequence[int]) -> float:
    """Value at rho = 0 of the polynomial in ``s = sqrt(|rho|)`` through the samples.

    Near the axis F and its partials are power series in ``s`` (a degree-d
    term contributes ``rho^(d/2)``), so Richardson extrapolation in ``s``
    recovers the one-sided limits.
    """
    s = np.sqrt(10.0 ** (-np.asarray(ks, dtype=float)))
    v = np.asarray(seq, dtype=float)
    # Neville at 0
    p = v.copy()
    n = len(s)
    for m in range(1, n):
        for i in range(n - m):
            p[i] = (s[i + m] * p[i] - s[i] * p[i + 1]) / (s[i + m] - s[i])
    return float(p[0])


def c1_gap(F: Callable, thetas: Sequence[float], ks: Sequence[int] = (3, 4, 5, 6)) -> float:
    """Largest left/right disagreement of the extrapolated limits of F and its first partials."""
    gap = 0.0
    for th in thetas:
        d = one_sided_partials(F, th, ks)
        for key in ("drho", "dtheta", "value"):
            gap = max(gap, abs(_limit(d["right"][key], ks) - _limit(d["left"][key], ks)))
    return gap


def second_difference_growth(F: Callable, theta: float, ks: Sequence[int] = (2, 3, 4, 5, 6, 7)) -> list[float]:
    """``|d^2F/drho^2|`` at ``rho = 10^-k`` by second differences, for increasing k."""
    out = []
    for k in ks:
        r0 = 10.0 ** (-k)
        h = 0.25 * r0
        out.append(abs(float((F(r0 + h, theta) - 2 * F(r0, theta) + F(r0 - h, theta)) / h**2)))
    return out


def detects_c2_failure(F: Callable, thetas: Sequence[float] = (0.0, 0.7, 2.0)) -> bool:
    """True when the second rho-difference grows without bound as rho -> 0+."""
    for th in thetas:
        seq = second_difference_growth(F, th)
        # rounding noise also grows like 1/rho, but stays tiny in absolute terms
        if all(b > 2.0 * a > 0 for a, b in zip(seq, seq[1:])) and seq[-1] > 100 * max(seq[0], 1e-3):
            return True
    return False
