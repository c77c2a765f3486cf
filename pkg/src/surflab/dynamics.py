"""Flows on chart atlases: integration, flux, section returns, periodic search.

Inside a Hamiltonian chart the flow is advanced by implicit-midpoint steps
composed into the fourth-order symmetric triple jump; every substep is
symplectic, so the variational Jacobian has determinant 1 up to rounding.
Step sizes follow a Richardson estimate (one step against two half steps).
Chart boundaries are located by bisection in time.  Constant fields on tori
and connectors are advanced in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import roots_legendre

from .atlas import ChartAtlas, CircleProfile, LinearField, TorusChart
from .errors import GeometryViolation, HorizonExceeded, InputError, LeftAtlas, StuckAtBoundary
from .localfields import FixedPointRecord, classify_zero, find_zeros

_CBRT2 = 2.0 ** (1.0 / 3.0)
TRIPLE_JUMP = (1.0 / (2.0 - _CBRT2), -_CBRT2 / (2.0 - _CBRT2), 1.0 / (2.0 - _CBRT2))
ABSORB_RADIUS = 1e-6


# one-chart stepping

def midpoint_step(field, p: np.ndarray, h, variational: bool = False, tol: float = 1e-15,
                  max_iter: int = 30):
    """Implicit midpoint ``p1 = p + h X((p + p1) / 2)`` for a batch of points.

    Returns ``(p1, M)`` where ``M`` is the exact derivative of the step
    (``None`` unless ``variational``).  The implicit equation is solved by
    a simplified Newton iteration with the Jacobian frozen at the predictor.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    h = np.broadcast_to(np.asarray(h, dtype=float), p.shape[:1])[:, None]
    p1 = p + h * field.vector(p)
    A = field.jacobian(0.5 * (p + p1))
    K = np.eye(2) - 0.5 * h[..., None] * A
    scale = 1.0 + np.max(np.abs(p))
    for _ in range(max_iter):
        r = p1 - p - h * field.vector(0.5 * (p + p1))
        dp = np.linalg.solve(K, r[..., None])[..., 0]
        p1 = p1 - dp
        if np.max(np.abs(dp)) <= tol * scale:
            break
    M = None
    if variational:
        A = field.jacobian(0.5 * (p + p1))
        hA = 0.5 * h[..., None] * A
        M = np.linalg.solve(np.eye(2) - hA, np.eye(2) + hA)
    return p1, M


def composed_step(field, p: np.ndarray, h, variational: bool = False):
    """Fourth-order triple-jump composition of implicit midpoint steps."""
    M = None
    for c in TRIPLE_JUMP:
        p, Mi = midpoint_step(field, p, c * np.asarray(h, dtype=float), variational)
        if variational:
            M = Mi if M is None else Mi @ M
    return p, M


# results

@dataclass
class OrbitTrace:
    samples: list  # (time, chart id, point)
    energy_drift: float = 0.0
    jacobian_det_drift: float = 0.0
    status: str = "ok"  # ok | absorbed
    transitions: list = dc_field(default_factory=list)  # (time, edge)
    jacobian: Optional[np.ndarray] = None

    @property
    def end(self):
        return self.samples[-1]

    def to_csv(self) -> str:
        lines = ["t,chart,x,y"]
        lines += [f"{float(t)!r},{c},{float(p[0])!r},{float(p[1])!r}" for t, c, p in self.samples]
        return "\n".join(lines) + "\n"


@dataclass
class SectionReturn:
    section: str
    hits: list  # (time, coordinate, transverse sign)
    status: str = "ok"  # ok | absorbed

    def times(self) -> np.ndarray:
        return np.array([h[0] for h in self.hits])

    def coordinates(self) -> np.ndarray:
        return np.array([h[1] for h in self.hits])


@dataclass
class PeriodicSearchReport:
    horizon: float
    min_return_distance: dict  # iterate count -> min distance
    found: list  # dicts: section, coordinate, period (iterates), time, residual
    seeds: int = 0
    absorbed: int = 0
    fixed_points: list = dc_field(default_factory=list)

    def to_json(self) -> dict:
        return {"horizon": self.horizon, "seeds": self.seeds, "absorbed": self.absorbed,
                "min_return_distance": {str(k): v for k, v in sorted(self.min_return_distance.items())},
                "found": self.found, "fixed_points": self.fixed_points}


@dataclass
class FluxVector:
    genus: int
    values: list
    cycles: list = dc_field(default_factory=list)

    def __post_init__(self):
        if len(self.values) != 2 * self.genus:
            raise ValueError("flux vector needs 2g values")


# adaptive stepping with events in one chart

BAND_FRACTION = 0.05


def _travel_cap(field, p: np.ndarray) -> np.ndarray:
    """Largest step keeping the distance travelled below a fraction of the local blend width."""
    if not hasattr(field, "length_scale"):
        return np.full(len(p), np.inf)
    ell = field.length_scale(p)
    speed = np.linalg.norm(field.vector(p), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(np.isfinite(ell), BAND_FRACTION * ell / np.maximum(speed, 1e-300), np.inf)

class _Stepper:
    """Richardson-controlled composed midpoint steps for one Hamiltonian field.

    ``outside(p)`` returns a positive number when ``p`` has left the chart.
    """

    def __init__(self, field, tol: float, outside=None, h0: float = 0.01, hmax: float = 0.05):
        self.field = field
        self.tol = tol
        self.outside = outside
        self.h = h0
        self.hmax = hmax

    def step(self, p: np.ndarray, J: Optional[np.ndarray], hmax: float):
        """One accepted step of length at most hmax.  Returns (p1, J1, h, exited)."""
        h = min(self.h, hmax, _travel_cap(self.field, p[None])[0])
        for _ in range(60):
            p1, M1 = composed_step(self.field, p, h, J is not None)
            pa, Ma = composed_step(self.field, p, 0.5 * h, J is not None)
            pb, Mb = composed_step(self.field, pa, 0.5 * h, J is not None)
            err = float(np.max(np.abs(p1 - pb))) / 15.0
            if err <= self.tol * h or h < 1e-12:
                fac = 2.0 if err == 0 else min(2.0, max(0.3, 0.9 * (self.tol * h / err) ** 0.25))
                self.h = min(self.hmax, h * fac)
                Jn = None if J is None else (Mb @ Ma)[0] @ J
                if self.outside is not None and self.outside(pb[0]) > 0:
                    return self._locate(p, J, h)
                return pb[0], Jn, h, False
            h *= max(0.2, 0.9 * (self.tol * h / err) ** 0.25)
        raise StuckAtBoundary("step size control failed to converge")

    def _locate(self, p, J, h):
        """Bisect the step fraction until the exit time is known to 1e-12."""
        lo, hi = 0.0, h
        p_out = None
        while hi - lo > 1e-12:
            mid = 0.5 * (lo + hi)
            q, _ = composed_step(self.field, p[None], mid)
            if self.outside(q[0]) > 0:
                hi, p_out = mid, q[0]
            else:
                lo = mid
        if p_out is None:
            p_out, _ = composed_step(self.field, p[None], hi)
            p_out = p_out[0]
        Jn = None
        if J is not None:
            _, M = composed_step(self.field, p[None], hi, True)
            Jn = M[0] @ J
        if hi <= 0:
            raise StuckAtBoundary("event location made no progress")
        return p_out, Jn, hi, True


def _region_outside(region):
    normals = np.array([s.normal for s in region.sides])
    offsets = np.array([s.offset for s in region.sides])
    return lambda p: float(np.max(normals @ p - offsets))


def _exit_side(region, p) -> int:
    normals = np.array([s.normal for s in region.sides])
    offsets = np.array([s.offset for s in region.sides])
    return int(np.argmax(normals @ p - offsets)) + 1


# single-chart models used for checks

@dataclass
class FlatTorus:
    """A flat torus ``[0,1]^2`` with a constant field and nothing removed."""
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)


def flat_torus(u, v) -> FlatTorus:
    return FlatTorus(np.array([float(u), float(v)]))


def _integrate_plane(field, p0, T, tol, J0=None):
    st = _Stepper(field, tol)
    p = np.asarray(p0, dtype=float)
    J = np.eye(2) if J0 is None else J0
    t = 0.0
    samples = [(0.0, "plane", p.copy())]
    has_H = hasattr(field, "value")
    H0 = float(field.value(p)) if has_H else 0.0
    drift, ddrift = 0.0, 0.0
    while t < T - 1e-15:
        p, J, h, _ = st.step(p, J, T - t)
        t += h
        samples.append((t, "plane", p.copy()))
        if has_H:
            drift = max(drift, abs(float(field.value(p)) - H0))
        ddrift = max(ddrift, abs(np.linalg.det(J) - 1.0))
    return OrbitTrace(samples, drift, ddrift, jacobian=J)


# glued dynamics

def _torus_next_entry(T: TorusChart, p: np.ndarray, tmax: float):
    """First time the straight line from p enters the square R (None if > tmax)."""
    th, c, e = T.theta, T.speed, T.epsilon
    cth, sth = math.cos(th), math.sin(th)
    q0 = (p - T.center) @ np.array([[cth, -sth], [sth, cth]])
    m_lo = math.floor(p[0]) - 2
    m_hi = math.ceil(p[0] + T.w[0] * tmax) + 2
    mx = np.arange(m_lo, m_hi + 1)
    lo = (q0[1] + sth * mx - e / 2) / cth
    hi = (q0[1] + sth * mx + e / 2) / cth
    my = np.ceil(lo)
    ok = my < hi
    mx, my = mx[ok], my[ok]
    Mx = cth * mx + sth * my
    My = -sth * mx + cth * my
    t = (Mx - e / 2 - q0[0]) / c
    good = (t > 1e-13) & (t <= tmax)
    if not np.any(good):
        return None
    k = np.argmin(np.where(good, t, np.inf))
    return float(t[k]), np.array([-e / 2, q0[1] - My[k]])


def _connector_next(P, q: np.ndarray):
    """Next event moving right from q: ('hole', sigma, dt) or ('square', None, dt)."""
    C = P.circle
    level = float(P.field.value(q))
    best, arg = P.epsilon / 2, None
    for s in C.level_crossings(level, inflow=True):
        x = float(C.hole(s)[0])
        if q[0] + 1e-12 < x < best:
            best, arg = x, s
    dt = (best - q[0]) / C.c
    return ("hole", arg, dt) if arg is not None else ("square", None, dt)


def integrate(atlas, start, T: float, tol: float = 1e-9, record_every: int = 1) -> OrbitTrace:
    """Integrate the glued flow from ``start = (chart id, point)`` for time T.

    ``atlas`` may also be a planar Hamiltonian (single chart without
    boundary) or a :class:`FlatTorus`.
    """
    if T <= 0:
        raise InputError("T must be positive")
    if isinstance(atlas, FlatTorus):
        p0 = np.asarray(start[1] if isinstance(start, tuple) else start, dtype=float)
        ts = np.linspace(0.0, T, 101)
        samples = [(float(t), "torus", np.mod(p0 + atlas.w * t, 1.0)) for t in ts]
        return OrbitTrace(samples, 0.0, 0.0, jacobian=np.eye(2))
    if not isinstance(atlas, ChartAtlas):
        p0 = start[1] if isinstance(start, tuple) else start
        return _integrate_plane(atlas, p0, T, tol)
    cid, p = start
    p = np.asarray(p, dtype=float)
    if cid not in atlas.charts:
        raise LeftAtlas(f"unknown chart {cid!r}")
    ch = atlas.chart(cid)
    if not ch.contains(p) and cid != "D":
        raise InputError(f"start point {p.tolist()} is not in chart {cid}")
    if cid == "D" and _region_outside(atlas.region)(p) > 1e-12:
        raise InputError(f"start point {p.tolist()} is not in D")
    F, region = atlas.field_D, atlas.region
    stepper = _Stepper(F, tol, _region_outside(region))
    zeros = _zeros_of(atlas)
    t, J = 0.0, np.eye(2)
    samples = [(0.0, cid, p.copy())]
    events = []
    level = None if cid.startswith("T") else float(atlas.chart(cid).field.value(p))
    drift, ddrift, status = 0.0, 0.0, "ok"
    nstep = 0
    while t < T - 1e-14:
        if cid == "D":
            p, J, h, exited = stepper.step(p, J, T - t)
            t += h
            nstep += 1
            if level is not None:
                drift = max(drift, abs(float(F.value(p)) - level))
            if len(zeros) and _absorbed(F, zeros, p):
                samples.append((t, cid, p.copy()))
                status = "absorbed"
                break
            if not exited:
                if nstep % record_every == 0:
                    samples.append((t, cid, p.copy()))
                continue
            i = _exit_side(region, p)
            side = region.side(i)
            if side.kind == "identified":
                tr = atlas.side_transition(i)
                J = tr.jacobian(p) @ J
                p = tr.apply(p)
                events.append((t, tr.edge))
                samples.append((t, cid, p.copy()))
                continue
            C = atlas.circle_of_side(i)
            Pc = atlas.chart(f"P{C.index}")
            q = p - (p @ side.normal - side.offset) * side.normal
            s = C.locate(q, i)
            tr = next(x for x in atlas.transitions if x.kind == "height" and x.source == "D" and x.target == Pc.id)
            J = tr.jacobian(q, i) @ J
            p = C.hole(s)
            cid = Pc.id
            events.append((t, tr.edge))
            samples.append((t, cid, p.copy()))
        elif cid.startswith("P"):
            Pc = atlas.chart(cid)
            C = Pc.circle
            if level is not None:
                drift = max(drift, abs(float(Pc.field.value(p)) - level))
            kind, s, dt = _connector_next(Pc, p)
            if t + dt > T:
                p = p + np.array([Pc.circle.c * (T - t), 0.0])
                t = T
                samples.append((t, cid, p.copy()))
                break
            t += dt
            if kind == "hole":
                tr = next(x for x in atlas.transitions if x.kind == "height" and x.source == cid)
                J = tr.jacobian(s) @ J
                p = C.point(s)
                cid = "D"
                events.append((t, tr.edge))
            else:
                Tc = atlas.chart(f"T{Pc.index}")
                p = Tc.from_square(np.array([Pc.epsilon / 2, p[1]]))
                J = _rotation(Tc.theta) @ J
                cid = Tc.id
                level = None
                events.append((t, f"Q{Pc.index}->R{Pc.index}"))
            samples.append((t, cid, p.copy()))
        else:
            Tc = atlas.chart(cid)
            hit = _torus_next_entry(Tc, p, T - t)
            if hit is None:
                p = np.mod(p + Tc.w * (T - t), 1.0)
                t = T
                samples.append((t, cid, p.copy()))
                break
            dt, q = hit
            t += dt
            J = _rotation(-Tc.theta) @ J
            cid = f"P{Tc.index}"
            p = q
            level = float(atlas.chart(cid).field.value(p))
            events.append((t, f"R{Tc.index}->Q{Tc.index}"))
            samples.append((t, cid, p.copy()))
        ddrift = max(ddrift, abs(np.linalg.det(J) - 1.0))
    ddrift = max(ddrift, abs(np.linalg.det(J) - 1.0))
    return OrbitTrace(samples, drift, ddrift, status, events, J)


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _zeros_of(atlas: ChartAtlas) -> np.ndarray:
    if not hasattr(atlas, "_zero_cache"):
        recs = index_audit(atlas)[0]
        atlas._zero_cache = np.array([r.location for r in recs]).reshape(-1, 2)
    return atlas._zero_cache


def _absorbed(F, zeros: np.ndarray, p: np.ndarray) -> bool:
    d = zeros - p
    k = int(np.argmin(np.sum(d * d, axis=1)))
    if float(np.linalg.norm(d[k])) >= ABSORB_RADIUS:
        return False
    return float(F.vector(p) @ (p - zeros[k])) < 0


# fixed points

def index_audit(atlas: ChartAtlas, tol: float = 1e-10) -> tuple[list[FixedPointRecord], int]:
    """Zeros of all chart fields with their indices, and the index sum.

    Tori and connectors carry constant nonzero fields; the D chart is searched
    over its polygon.  A zero lying on an identified side is counted once.
    """
    for ch in list(atlas.tori) + list(atlas.connectors):
        if float(np.hypot(*ch.field.w)) == 0.0:
            raise InputError(f"chart {ch.id} has a vanishing constant field")
    R = atlas.region
    pts = np.array([s.start for s in R.sides])
    pad = 1e-3 * R.scale
    box = [pts[:, 0].min() - pad, pts[:, 0].max() + pad, pts[:, 1].min() - pad, pts[:, 1].max() + pad]
    recs = find_zeros(atlas.field_D, box, tol=tol, domain=R)
    kept: list[FixedPointRecord] = []
    for r in recs:
        z = np.asarray(r.location)
        dup = False
        for q in kept:
            for i, _ in atlas.pairings:
                for j in (i, R.mirror_index(i)):
                    img = atlas.side_transition(j).apply(z)
                    if np.linalg.norm(img - np.asarray(q.location)) < 10 * tol:
                        dup = True
        if not dup:
            r.chart = "D"
            kept.append(r)
    return kept, int(sum(r.lefschetz_index for r in kept))


# flux

def cycle_flux(vector, gamma, dgamma, panels: int = 32, order: int = 10) -> float:
    """``int_0^1 omega(X(gamma(s)), gamma'(s)) ds`` by composite Gauss-Legendre."""
    x, w = roots_legendre(order)
    edges = np.linspace(0.0, 1.0, panels + 1)
    a, b = edges[:-1, None], edges[1:, None]
    s = (0.5 * (b - a) * x + 0.5 * (a + b)).ravel()
    ws = (0.5 * (b - a) * w).ravel()
    X = vector(gamma(s))
    d = dgamma(s)
    return float(np.sum(ws * (X[:, 0] * d[:, 1] - X[:, 1] * d[:, 0])))


def _torus_cycles(y0: float = 0.0, x0: float = 0.0):
    horiz = (lambda s: np.stack([s, np.full_like(s, y0)], -1), lambda s: np.tile([1.0, 0.0], (len(s), 1)))
    vert = (lambda s: np.stack([np.full_like(s, x0), s], -1), lambda s: np.tile([0.0, 1.0], (len(s), 1)))
    return horiz, vert


def flux(atlas) -> FluxVector:
    """Integrals of ``i_X omega`` over the core circles of every torus.

    The D chart and the connectors carry Hamiltonian fields and contribute
    nothing; the torus cycles ``y = 0`` and ``x = 0`` avoid the squares.
    """
    tori = [atlas] if isinstance(atlas, FlatTorus) else atlas.tori
    vals, names = [], []
    for k, T in enumerate(tori, start=1):
        w = T.w
        vec = lambda p, w=w: np.broadcast_to(w, p.shape)
        for name, (gam, dgam) in zip(("a", "b"), _torus_cycles()):
            if not isinstance(T, FlatTorus) and np.any(T.in_square(gam(np.linspace(0, 1, 2001)), strict=False)):
                raise InputError(f"core cycle {name}{k} meets the removed square")
            vals.append(cycle_flux(vec, gam, dgam))
            names.append(f"{name}{k}")
    return FluxVector(len(tori), vals, names)


def loop_flux(field, center: Sequence[float], radius: float) -> float:
    """Flux of a planar field through a circle (zero for Hamiltonian fields)."""
    c = np.asarray(center, dtype=float)
    gam = lambda s: c + radius * np.stack([np.cos(2 * np.pi * s), np.sin(2 * np.pi * s)], -1)
    dgam = lambda s: 2 * np.pi * radius * np.stack([-np.sin(2 * np.pi * s), np.cos(2 * np.pi * s)], -1)
    return cycle_flux(field.vector, gam, dgam)


# passages through D

def flow_through_D(atlas: ChartAtlas, points: np.ndarray, tol: float = 1e-9, t_cap: float = 200.0,
                   hmax: float = 0.05) -> list:
    """Batch-integrate points of D until they leave through a circle side.

    All points share one Richardson-controlled step size.  Points that cross
    a side are located individually by bisection; identified sides are
    glued and the point continues.  Returns, per point, ``(side index,
    exit point, time)`` or ``None`` if it is still in D at ``t_cap``.
    """
    F, R = atlas.field_D, atlas.region
    outside = _region_outside(R)
    normals = np.array([s.normal for s in R.sides])
    offsets = np.array([s.offset for s in R.sides])
    locator = _Stepper(F, tol, outside)
    p = np.array(points, dtype=float).reshape(-1, 2)
    t = np.zeros(len(p))
    active = np.ones(len(p), dtype=bool)
    result: list = [None] * len(p)
    h = 0.01
    while np.any(active):
        idx = np.nonzero(active)[0]
        q = p[idx]
        h = min(h, float(np.min(_travel_cap(F, q))))
        p1, _ = composed_step(F, q, h)
        pa, _ = composed_step(F, q, 0.5 * h)
        pb, _ = composed_step(F, pa, 0.5 * h)
        err = float(np.max(np.abs(p1 - pb))) / 15.0
        if err > tol * h and h > 1e-12:
            h *= max(0.2, 0.9 * (tol * h / err) ** 0.25)
            continue
        out = np.max(pb @ normals.T - offsets, axis=1) > 0
        stay = idx[~out]
        p[stay], t[stay] = pb[~out], t[stay] + h
        for i in idx[out]:
            pe, _, dt, _ = locator._locate(p[i], None, h)
            t[i] += dt
            k = _exit_side(R, pe)
            side = R.side(k)
            if side.kind == "identified":
                p[i] = atlas.side_transition(k).apply(pe)
            else:
                result[i] = (k, pe, float(t[i]))
                active[i] = False
        active &= t < t_cap
        fac = 2.0 if err == 0 else min(2.0, max(0.3, 0.9 * (tol * h / err) ** 0.25))
        h = min(hmax, h * fac)
    return result


NODE_FRACTIONS = (0.01, 0.03, 0.1, 0.25, 0.5, 0.75, 0.9, 0.97, 0.99)


@dataclass
class PassageBranch:
    """Inflow levels of one arc whose orbits all leave D through one outflow arc."""
    circle: int
    arc: int
    level_lo: float
    level_hi: float
    target_circle: int
    target_arc: int
    levels: np.ndarray  # node levels, increasing
    times: np.ndarray  # passage times at the nodes

    def _u(self, level):
        f = (np.asarray(level, dtype=float) - self.level_lo) / (self.level_hi - self.level_lo)
        f = np.clip(f, 1e-12, 1 - 1e-12)
        return np.log(f / (1 - f))

    def time(self, level) -> np.ndarray:
        """Passage time, interpolated as log T against the logit of the level fraction.

        Near a critical level the time grows like a power of the distance
        to it, which is close to linear in these variables.
        """
        if not hasattr(self, "_interp"):
            self._interp = PchipInterpolator(self._u(self.levels), np.log(self.times), extrapolate=True)
        return np.exp(self._interp(self._u(level)))


class PassageTable:
    """Where and when orbits entering D leave it, as a function of the level.

    Inside D the flow preserves F, so an orbit entering at level ``l``
    leaves at a point of an outflow arc with the same value of F.  Which
    outflow arc is reached can only change at the values of F at its zeros;
    between consecutive such values one integrated node decides the
    branch, further nodes give the passage time.  The exit point itself is
    always obtained by solving ``F = l`` on the target arc, which makes it
    level matched to the precision of that solve.
    """

    def __init__(self, atlas: ChartAtlas, tol: float = 1e-9, t_cap: float = 200.0):
        self.atlas = atlas
        F = atlas.field_D
        zeros = _zeros_of(atlas)
        self.critical = np.array([float(F.value(z)) for z in zeros])
        # levels met inside the absorbing balls around the zeros
        ang = np.linspace(0.0, 2 * math.pi, 64, endpoint=False)
        ring = ABSORB_RADIUS * np.stack([np.cos(ang), np.sin(ang)], -1)
        self.absorb_band = np.array([float(np.max(np.abs(F.value(z + ring) - F.value(z)))) for z in zeros])
        self.branches: dict = {}
        jobs = []
        x = 2 * np.asarray(NODE_FRACTIONS) - 1
        for C in atlas.circles:
            for a, arc in enumerate(C.arcs):
                if not arc["inflow"]:
                    continue
                cuts = [arc["fmin"]] + sorted(c for c in self.critical if arc["fmin"] < c < arc["fmax"]) + [arc["fmax"]]
                cuts = np.unique(cuts)
                for lo, hi in zip(cuts[:-1], cuts[1:]):
                    lv = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
                    jobs.append((C, a, lo, hi, lv))
        starts = np.concatenate([C.point(C.arc_solve(C.arcs[a], lv)) for C, a, _, _, lv in jobs])
        res = flow_through_D(atlas, starts, tol, t_cap)
        self.level_error = 0.0
        pos = 0
        for C, a, lo, hi, lv in jobs:
            out = res[pos:pos + len(lv)]
            pos += len(lv)
            targets = set()
            times = []
            for level, r in zip(lv, out):
                if r is None:
                    raise StuckAtBoundary(f"orbit from C{C.index} at level {level:.6g} did not leave D by t = {t_cap}")
                k, pe, tt = r
                Cj = atlas.circle_of_side(k)
                q = pe - (pe @ atlas.region.side(k).normal - atlas.region.side(k).offset) * atlas.region.side(k).normal
                sj = Cj.locate(q, k)
                aj = Cj.arc_index(sj)
                targets.add((Cj.index, aj))
                self.level_error = max(self.level_error, abs(float(Cj.value(sj)) - level))
                times.append(tt)
            if len(targets) != 1:
                raise GeometryViolation(f"inflow levels ({lo:.6g}, {hi:.6g}) of C{C.index} split between outflow arcs {sorted(targets)}")
            (tc, ta), = targets
            br = PassageBranch(C.index, a, float(lo), float(hi), tc, ta, np.asarray(lv), np.asarray(times))
            self.branches.setdefault((C.index, a), []).append(br)

    def lookup(self, circle: int, arc: int, level: np.ndarray):
        """Target circle, exit sigma, passage time and absorption flag per level."""
        level = np.asarray(level, dtype=float)
        tc = np.zeros(len(level), dtype=int)
        sig = np.zeros(len(level))
        dt = np.zeros(len(level))
        for br in self.branches[(circle, arc)]:
            m = (level >= br.level_lo) & (level <= br.level_hi)
            if not np.any(m):
                continue
            Cj = self.atlas.circles[br.target_circle - 1]
            tc[m] = br.target_circle
            sig[m] = Cj.arc_solve(Cj.arcs[br.target_arc], level[m])
            dt[m] = br.time(level[m])
        absorbed = np.zeros(len(level), dtype=bool)
        for c, band in zip(self.critical, self.absorb_band):
            absorbed |= np.abs(level - c) <= band
        return tc, sig, dt, absorbed


def _passages(atlas: ChartAtlas) -> PassageTable:
    if not hasattr(atlas, "_passage_cache"):
        atlas._passage_cache = PassageTable(atlas)
    return atlas._passage_cache


# returns to the square edges

class TorusReturn:
    """First entry into the square after leaving it, on one torus.

    In square coordinates the flow is horizontal with speed ``c``; the
    translates of the square by the integer lattice sit at ``(xi_m, eta_m)``.
    An orbit leaving the right edge at height ``y`` next enters the
    translate with the smallest ``xi_m > 0`` and ``|y - eta_m| < eps/2``.
    """

    def __init__(self, T: TorusChart, reach: int = 4):
        self.torus = T
        e = T.epsilon
        R = _rotation(-T.theta)
        while True:
            r = np.arange(-reach, reach + 1)
            m = np.stack(np.meshgrid(r, r), -1).reshape(-1, 2)
            xe = m @ R.T
            keep = (xe[:, 0] > e) & (np.abs(xe[:, 1]) < e)
            xe = xe[keep]
            xe = xe[np.argsort(xe[:, 0])]
            if self._covers(xe, e) or reach > 4096:
                break
            reach *= 2
        self.xi, self.eta = xe[:, 0], xe[:, 1]
        self.covered = self._covers(xe, e)

    @staticmethod
    def _covers(xe, e) -> bool:
        iv = sorted((max(-e / 2, y - e / 2), min(e / 2, y + e / 2)) for y in xe[:, 1])
        reach = -e / 2
        for lo, hi in iv:
            if lo > reach + 1e-15:
                return False
            reach = max(reach, hi)
        return reach >= e / 2

    def __call__(self, y: np.ndarray):
        """(time, new height) from the right edge at height y to the left edge."""
        y = np.asarray(y, dtype=float)
        e, c = self.torus.epsilon, self.torus.speed
        k = np.full(y.shape, -1)
        for j in range(len(self.xi)):
            todo = k < 0
            if not np.any(todo):
                break
            hit = todo & (np.abs(y - self.eta[j]) < e / 2)
            k[hit] = j
        if np.any(k < 0):
            raise HorizonExceeded("torus orbit did not return to the square")
        return (self.xi[k] - e) / c, y - self.eta[k]


def _connector_first_inflow(C: CircleProfile, level: np.ndarray, x0: np.ndarray):
    """First inflow crossing of the hole to the right of x0 at the given levels."""
    best_x = np.full(level.shape, np.inf)
    best_s = np.zeros(level.shape)
    best_a = np.full(level.shape, -1)
    for a, arc in enumerate(C.arcs):
        if not arc["inflow"]:
            continue
        m = (level >= arc["fmin"]) & (level <= arc["fmax"])
        if not np.any(m):
            continue
        s = C.arc_solve(arc, level[m])
        x = C.hole(s)[:, 0]
        better = (x > x0[m] + 1e-12) & (x < best_x[m])
        ii = np.nonzero(m)[0][better]
        best_x[ii], best_s[ii], best_a[ii] = x[better], s[better], a
    return best_a, best_s, best_x


class GluedReturn:
    """Return map of the glued flow to the entry edges of the squares.

    A state is ``(k, y)``: the orbit crosses the left edge of the square in
    torus ``k`` at height ``y`` (connector coordinates).  One application
    follows it through the connector, any number of passages through D and
    connectors, and the torus back to the next entry edge.
    """

    def __init__(self, atlas: ChartAtlas, table: Optional[PassageTable] = None):
        self.atlas = atlas
        self.table = table or _passages(atlas)
        self.tori = {T.index: TorusReturn(T) for T in atlas.tori}
        self.epsilon = atlas.params.epsilon

    def __call__(self, k: np.ndarray, y: np.ndarray):
        """Returns (next k, next y, elapsed time, absorbed, D passages)."""
        k = np.array(k, dtype=int).copy()
        y = np.array(y, dtype=float).copy()
        e = self.epsilon
        x = np.full(y.shape, -e / 2)
        t = np.zeros(y.shape)
        absorbed = np.zeros(y.shape, dtype=bool)
        npass = np.zeros(y.shape, dtype=int)
        moving = np.ones(y.shape, dtype=bool)
        for _ in range(1000):
            if not np.any(moving):
                break
            for C in self.atlas.circles:
                m = moving & (k == C.index)
                if not np.any(m):
                    continue
                ii = np.nonzero(m)[0]
                level = C.g0 - C.c * y[ii]
                a, s, xh = _connector_first_inflow(C, level, x[ii])
                edge = a < 0
                je = ii[edge]
                t[je] += (e / 2 - x[je]) / C.c
                moving[je] = False
                jh = ii[~edge]
                t[jh] += (xh[~edge] - x[jh]) / C.c
                for arc in np.unique(a[~edge]):
                    sel = a[~edge] == arc
                    jj = jh[sel]
                    tc, sj, dt, ab = self.table.lookup(C.index, int(arc), level[~edge][sel])
                    t[jj] += dt
                    npass[jj] += 1
                    absorbed[jj] |= ab
                    moving[jj[ab]] = False
                    for tgt in np.unique(tc[~ab]):
                        q = jj[(tc == tgt) & ~ab]
                        Cj = self.atlas.circles[tgt - 1]
                        hp = Cj.hole(sj[(tc == tgt) & ~ab])
                        k[q], x[q], y[q] = tgt, hp[:, 0], hp[:, 1]
        else:
            raise StuckAtBoundary("orbit keeps returning to D inside one connector")
        for idx, R in self.tori.items():
            m = (k == idx) & ~absorbed
            if np.any(m):
                dt, yn = R(y[m])
                t[m] += dt
                y[m] = yn
        return k, y, t, absorbed, npass


def _parse_section(section: str, atlas) -> Optional[int]:
    s = section.strip()
    if isinstance(atlas, FlatTorus):
        if s.replace(" ", "") not in ("x=0", "x==0"):
            raise InputError(f"flat torus sections are 'x=0', not {section!r}")
        return None
    if len(s) > 1 and s[0] == "Q" and s[1:].isdigit() and 1 <= int(s[1:]) <= atlas.genus:
        return int(s[1:])
    raise InputError(f"unknown section {section!r}; expected Q1..Q{atlas.genus}")


def return_map(atlas, section: str, start: float, n_hits: int, T_max: float) -> SectionReturn:
    """First ``n_hits`` crossings of a section by the orbit through ``start``.

    Sections are the entry edges ``Qk`` of the squares (coordinate: height
    in connector coordinates) on an atlas, or ``x=0`` on a flat torus
    (coordinate: y).  Hits on every square edge are reported; the section
    name only fixes where the orbit starts.
    """
    if n_hits < 1 or T_max <= 0:
        raise InputError("n_hits and T_max must be positive")
    k0 = _parse_section(section, atlas)
    hits = []
    if isinstance(atlas, FlatTorus):
        u, v = atlas.w
        if u == 0:
            raise InputError("field is parallel to the section")
        n = np.arange(1, n_hits + 1)
        t = n / abs(u)
        if t[-1] > T_max:
            raise HorizonExceeded(f"only {int(np.sum(t <= T_max))} hits by T = {T_max}")
        ys = np.mod(float(start) + v * t, 1.0)
        return SectionReturn(section, [(float(a), float(b), int(np.sign(u))) for a, b in zip(t, ys)])
    e = atlas.params.epsilon
    if not abs(float(start)) < e / 2:
        raise InputError(f"start height must lie in (-{e / 2}, {e / 2})")
    G = GluedReturn(atlas)
    k, y, t = np.array([k0]), np.array([float(start)]), 0.0
    while len(hits) < n_hits:
        k, y, dt, ab, _ = G(k, y)
        t += float(dt[0])
        if ab[0]:
            return SectionReturn(section, hits, "absorbed")
        if t > T_max:
            raise HorizonExceeded(f"only {len(hits)} hits by T = {T_max}")
        hits.append((t, float(y[0]), 1, f"Q{int(k[0])}"))
    return SectionReturn(section, hits)


# periodic orbit search

def _iterate_returns(atlas, k: np.ndarray, y: np.ndarray, T_max: float, max_iter: int = 100000):
    """Iterate the return map on a batch until every orbit passes T_max or is absorbed.

    Returns arrays of shape (n_iter + 1, n): section index, height, time,
    and the absorbed flag per orbit.
    """
    if isinstance(atlas, FlatTorus):
        u, v = atlas.w
        n = int(math.floor(T_max * abs(u)))
        it = np.arange(n + 1)[:, None]
        ys = np.mod(y[None, :] + v / abs(u) * it, 1.0)
        return np.zeros_like(ys, dtype=int), ys, np.broadcast_to(it / abs(u), ys.shape), np.zeros(len(y), bool)
    G = GluedReturn(atlas)
    ks, ys, ts = [k.copy()], [y.copy()], [np.zeros(len(y))]
    t = np.zeros(len(y))
    absorbed = np.zeros(len(y), dtype=bool)
    live = np.ones(len(y), dtype=bool)
    for _ in range(max_iter):
        if not np.any(live):
            break
        kn, yn, tn = ks[-1].copy(), ys[-1].copy(), np.full(len(y), np.inf)
        ii = np.nonzero(live)[0]
        k1, y1, dt, ab, _ = G(kn[ii], yn[ii])
        t[ii] += dt
        absorbed[ii] |= ab
        kn[ii], yn[ii], tn[ii] = k1, y1, t[ii]
        tn[ii[ab]] = np.inf
        live &= ~absorbed & (t <= T_max)
        ks.append(kn)
        ys.append(yn)
        ts.append(np.where(tn <= T_max, tn, np.inf))
    return np.array(ks), np.array(ys), np.array(ts), absorbed


def _return_residual(atlas, k0: int, y: float, n: int) -> tuple[float, int]:
    """``R^n(y) - y`` for one start (inf if the orbit ends on another section or is absorbed)."""
    if isinstance(atlas, FlatTorus):
        u, v = atlas.w
        d = (y + n * v / abs(u)) - y
        return float(d - round(d)), 0
    G = GluedReturn(atlas)
    k, yy = np.array([k0]), np.array([y])
    for _ in range(n):
        k, yy, _, ab, _ = G(k, yy)
        if ab[0]:
            return math.inf, -1
    if int(k[0]) != k0:
        return math.inf, int(k[0])
    return float(yy[0] - y), k0


def _refine(atlas, k0: int, y0: float, n: int, half_width: float, tol: float):
    """Newton iteration on ``R^n(y) - y`` with a secant derivative.

    Returns (y, residual).  On pieces where the return map is a translation
    the derivative vanishes and the residual at the seed is final.
    """
    y, best = y0, (y0, abs(_return_residual(atlas, k0, y0, n)[0]))
    for _ in range(20):
        r, _ = _return_residual(atlas, k0, y, n)
        if not math.isfinite(r):
            break
        if abs(r) < best[1]:
            best = (y, abs(r))
        if abs(r) < tol:
            break
        dy = 1e-7 * max(1.0, half_width)
        r2, _ = _return_residual(atlas, k0, y + dy, n)
        slope = (r2 - r) / dy
        if not math.isfinite(slope) or abs(slope) < 1e-9:
            break
        step = -r / slope
        if abs(step) > half_width:
            break
        y = y + step
    return best


def search_periodic(atlas, T_max: float, n_seeds: int = 1000, tol: float = 1e-8,
                    candidate_radius: float = 1e-3) -> PeriodicSearchReport:
    """Seeded search for periodic orbits through the square entry edges.

    Seeds are evenly spaced on every section.  Each orbit is followed by
    the return map up to time ``T_max``; for every iterate count ``n`` the
    smallest ``|R^n(y) - y|`` over seeds that are back on their own section
    goes into ``min_return_distance``.  Pairs closer than
    ``candidate_radius`` are refined by Newton's method on ``R^n - id`` and
    kept when the residual is below ``tol``.  Zeros of the field are listed
    separately in ``fixed_points``.
    """
    if T_max <= 0 or n_seeds < 1:
        raise InputError("T_max and n_seeds must be positive")
    if isinstance(atlas, FlatTorus):
        sections, width, lo = [0], 1.0, 0.0
        fixed = []
    else:
        sections = [T.index for T in atlas.tori]
        width = atlas.params.epsilon
        lo = -width / 2
        fixed = [r.to_dict() for r in index_audit(atlas)[0]]
    per = max(1, n_seeds // len(sections))
    grid = lo + width * (np.arange(per) + 0.5) / per
    k0 = np.repeat(sections, per)
    y0 = np.tile(grid, len(sections))
    ks, ys, ts, absorbed = _iterate_returns(atlas, k0, y0, T_max)
    table: dict = {}
    cands = []
    for n in range(1, len(ys)):
        ok = (ks[n] == k0) & np.isfinite(ts[n])
        if not np.any(ok):
            continue
        d = np.abs(ys[n] - y0)
        if isinstance(atlas, FlatTorus):
            d = np.minimum(d, 1.0 - d)
        d = np.where(ok, d, np.inf)
        table[n] = float(np.min(d))
        for sec in sections:
            ds = np.where(k0 == sec, d, np.inf)
            j = int(np.argmin(ds))
            if ds[j] < candidate_radius:
                cands.append((n, j))
    found = []
    for n, j in cands:
        if any(_same_orbit(ys, ks, j, f) for f in found):
            continue
        y, res = _refine(atlas, int(k0[j]), float(y0[j]), n, candidate_radius, tol)
        if res >= tol:
            continue
        period = next(p for p in range(1, n + 1)
                      if n % p == 0 and abs(_return_residual(atlas, int(k0[j]), y, p)[0]) < tol)
        res = abs(_return_residual(atlas, int(k0[j]), y, period)[0])
        found.append({"section": _section_name(atlas, int(k0[j])), "coordinate": y, "period": period,
                      "time": float(ts[period][j]) if np.isfinite(ts[period][j]) else None,
                      "residual": res})
    return PeriodicSearchReport(float(T_max), table, found, len(y0), int(np.sum(absorbed)), fixed)


def _section_name(atlas, k: int) -> str:
    return "x=0" if isinstance(atlas, FlatTorus) else f"Q{k}"


def _same_orbit(ys, ks, j, f) -> bool:
    """Whether seed j's orbit passes through a recorded periodic point."""
    name = f["section"]
    for n in range(len(ys)):
        if name in ("x=0", f"Q{int(ks[n][j])}") and abs(ys[n][j] - f["coordinate"]) < 1e-6:
            return True
    return False
