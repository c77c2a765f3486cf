"""Conley-Zehnder and mean index of paths of 2x2 symplectic matrices.

Conventions (n = 1, standard complex structure ``J = [[0, -1], [1, 0]]``):

* A path ``Psi(t)``, ``t in [0, 1]``, starts at the identity.  Its generator
  ``S(t) = -J Psi'(t) Psi(t)^{-1}`` is symmetric.
* ``cz_index`` counts crossings ``det(Psi(t) - I) = 0`` (equivalently
  ``trace Psi(t) = 2``) signed by the crossing form ``v -> <v, S v>`` on
  ``ker(Psi(t) - I)``; the crossing at ``t = 0`` contributes half the
  signature of ``S(0)``.  A rotation by ``2*pi*lam*t`` with ``0 < lam < 1``
  has index 1.
* ``mean_index`` lifts the rotation invariant ``rho(Psi(t))`` (eigenvalue
  angle on the elliptic locus, ``+-1`` on the hyperbolic locus) continuously
  and returns ``theta(1) / pi``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .errors import DegenerateEndpoint, InputError, InsufficientSampling, NotAFixedPoint

J = np.array([[0.0, -1.0], [1.0, 0.0]])

IDENTITY_TOL = 1e-12
DET_TOL = 1e-9
ENDPOINT_TOL = 1e-9
MAX_REFINE = 6
MAX_BISECT = 60
MAX_SAMPLES = 2_000_000

Generator = Callable[[np.ndarray], np.ndarray]


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class SymplecticPath:
    """Sampled path in Sp(2) starting at the identity.

    ``generator`` maps an array of times in [0, 1] to an ``(n, 2, 2)`` stack
    of matrices; when present it is used to refine the sampling.
    """

    times: np.ndarray
    matrices: np.ndarray
    generator: Optional[Generator] = field(default=None, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        m = np.asarray(self.matrices, dtype=float).reshape(-1, 2, 2)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "matrices", m)
        if len(t) < 2 or len(t) != len(m):
            raise InputError("need at least two samples with matching times and matrices")
        if abs(t[0]) > 1e-15 or abs(t[-1] - 1.0) > 1e-15 or np.any(np.diff(t) <= 0):
            raise InputError("times must increase strictly from 0 to 1")
        if np.max(np.abs(m[0] - np.eye(2))) > IDENTITY_TOL:
            raise InputError("path must start at the identity")
        # relative to |M|^2: large hyperbolic samples lose absolute digits
        err = np.abs(np.linalg.det(m) - 1.0) / np.maximum(1.0, 0.5 * np.sum(m * m, axis=(1, 2)))
        if np.max(err) > DET_TOL:
            raise InputError(f"non-symplectic sample (max relative |det-1| = {np.max(err):.2e})")

    @classmethod
    def from_function(cls, fn: Generator, n: int = 2001) -> SymplecticPath:
        t = np.linspace(0.0, 1.0, n)
        return cls(t, fn(t), fn)

    @property
    def endpoint(self) -> np.ndarray:
        return self.matrices[-1]

    def refined(self, factor: int = 2) -> SymplecticPath:
        if self.generator is None:
            raise InsufficientSampling("refinement requested but the path has no generator")
        n = (len(self.times) - 1) * factor + 1
        return SymplecticPath.from_function(self.generator, n)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["time", "m11", "m12", "m21", "m22"])
        for t, m in zip(self.times, self.matrices):
            w.writerow([repr(float(t)), *(repr(float(x)) for x in m.ravel())])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> SymplecticPath:
        rows = list(csv.reader(io.StringIO(text)))
        if rows and rows[0] and rows[0][0].strip() == "time":
            rows = rows[1:]
        try:
            data = np.array([[float(x) for x in r] for r in rows if r])
        except ValueError as exc:
            raise InputError(f"bad path CSV: {exc}") from exc
        if data.ndim != 2 or data.shape[1] != 5:
            raise InputError("path CSV needs columns time,m11,m12,m21,m22")
        return cls(data[:, 0], data[:, 1:].reshape(-1, 2, 2))


@dataclass(frozen=True)
class IndexResult:
    cz: Optional[int]
    mean: float
    nondegenerate: bool


# rotation invariant and mean index

def rho_angle(m: np.ndarray) -> np.ndarray:
    """Angle of the rotation invariant, vectorised over a stack of matrices."""
    m = np.asarray(m).reshape(-1, 2, 2)
    tr = m[:, 0, 0] + m[:, 1, 1]
    ang = np.where(tr >= 0, 0.0, np.pi)
    ell = np.abs(tr) < 2.0
    sgn = np.where(m[:, 1, 0] >= 0, 1.0, -1.0)
    ang = np.where(ell, sgn * np.arccos(np.clip(tr / 2.0, -1.0, 1.0)), ang)
    return ang


def _lift(mats: np.ndarray) -> tuple[float, float]:
    ang = rho_angle(mats)
    d = np.diff(ang)
    d = (d + np.pi) % (2 * np.pi) - np.pi
    return float(np.sum(d)), float(np.max(np.abs(d), initial=0.0))


def mean_index(path: SymplecticPath) -> float:
    """Lifted rotation angle over pi.

    Intervals where the angle jumps by pi/2 or more are bisected locally
    with the path's generator until every jump is small.
    """
    t, ang = path.times, rho_angle(path.matrices)
    for _ in range(MAX_BISECT):
        d = np.diff(ang)
        d = (d + np.pi) % (2 * np.pi) - np.pi
        bad = np.abs(d) >= np.pi / 2
        if not np.any(bad):
            return float(np.sum(d)) / np.pi
        if path.generator is None or len(t) > MAX_SAMPLES:
            break
        mids = 0.5 * (t[:-1][bad] + t[1:][bad])
        t_new = np.concatenate([t, mids])
        order = np.argsort(t_new, kind="stable")
        t, ang = t_new[order], np.concatenate([ang, rho_angle(path.generator(mids))])[order]
    raise InsufficientSampling("rotation angle jumps by >= pi/2 between samples")


# Conley-Zehnder index

def _generator_matrix(p: SymplecticPath, k: int) -> np.ndarray:
    """Symmetric S = -J Psi' Psi^{-1} at sample k (one-sided at the ends)."""
    t, m = p.times, p.matrices
    if 0 < k < len(t) - 1:
        d = (m[k + 1] - m[k - 1]) / (t[k + 1] - t[k - 1])
    elif k == 0:
        d = (-3 * m[0] + 4 * m[1] - m[2]) / (t[2] - t[0]) if len(t) > 2 else (m[1] - m[0]) / (t[1] - t[0])
    else:
        d = (m[k] - m[k - 1]) / (t[k] - t[k - 1])
    s = -J @ d @ np.linalg.inv(m[k])
    return 0.5 * (s + s.T)


def _signature(s: np.ndarray) -> int:
    ev = np.linalg.eigvalsh(s)
    scale = max(1.0, float(np.max(np.abs(ev))))
    if np.any(np.abs(ev) < 1e-9 * scale):
        raise DegenerateEndpoint("degenerate crossing form")
    return int(np.sum(ev > 0) - np.sum(ev < 0))


def _crossing_sign(mat: np.ndarray, s: np.ndarray) -> int:
    """Signature of the crossing form restricted to ker(mat - I)."""
    _, sv, vt = np.linalg.svd(mat - np.eye(2))
    if sv[0] < 1e-6:
        return _signature(s)
    v = vt[-1]
    q = float(v @ s @ v)
    if abs(q) < 1e-12:
        raise InsufficientSampling("tangential crossing")
    return 1 if q > 0 else -1


def _count_crossings(p: SymplecticPath) -> int:
    m = p.matrices
    f = 2.0 - (m[:, 0, 0] + m[:, 1, 1])  # det(Psi - I)
    noise = 1e-12 * np.maximum(1.0, np.sum(np.abs(m), axis=(1, 2)))
    sgn = np.where(np.abs(f) <= noise, 0, np.sign(f)).astype(int)
    total = 0
    n = len(f)
    k = 1
    while k < n - 1:
        if sgn[k] == 0:
            # crossing lands on samples: take the middle of the zero run
            j = k
            while j + 1 < n - 1 and sgn[j + 1] == 0:
                j += 1
            mid = (k + j) // 2
            total += _crossing_sign(m[mid], _generator_matrix(p, mid))
            k = j + 1
            continue
        if sgn[k + 1] != 0 and sgn[k] != sgn[k + 1]:
            j = k if abs(f[k]) <= abs(f[k + 1]) else k + 1
            j = min(j, n - 2)
            total += _crossing_sign(m[j], _generator_matrix(p, j))
        elif (abs(f[k]) < abs(f[k - 1]) and abs(f[k]) <= abs(f[k + 1])
              and np.max(np.abs(m[k] - np.eye(2))) < _touch_tol(p, k)):
            # Psi passes through I between samples without f changing sign
            total += _signature(_generator_matrix(p, k))
        k += 1
    return total


def _touch_tol(p: SymplecticPath, k: int) -> float:
    # Psi passes within O(h * |Psi'|) of I when it crosses I between samples
    h = p.times[min(k + 1, len(p.times) - 1)] - p.times[max(k - 1, 0)]
    d = np.max(np.abs(p.matrices[min(k + 1, len(p.times) - 1)] - p.matrices[max(k - 1, 0)]))
    return max(d, 1e-12) * 0.75 + 1e-12 * h


def cz_index(path: SymplecticPath) -> int:
    """Conley-Zehnder index by the crossing-form count."""
    if abs(np.linalg.det(path.endpoint - np.eye(2))) <= ENDPOINT_TOL:
        raise DegenerateEndpoint("endpoint has eigenvalue 1")
    start = _signature(_generator_matrix(path, 0))
    if start % 2:
        raise DegenerateEndpoint("initial crossing form is degenerate")
    count = _count_crossings(path)
    if path.generator is not None:
        for _ in range(MAX_REFINE):
            finer = path.refined()
            c2 = _count_crossings(finer)
            if c2 == count:
                break
            path, count = finer, c2
        else:
            raise InsufficientSampling("crossing count does not stabilise under refinement")
    return start // 2 + count


def index(path: SymplecticPath) -> IndexResult:
    mean = mean_index(path)
    try:
        return IndexResult(cz_index(path), mean, True)
    except DegenerateEndpoint:
        return IndexResult(None, mean, False)


def cz_from_mean(path: SymplecticPath) -> int:
    """Index from the lifted angle and the endpoint type (independent route)."""
    end = path.endpoint
    if abs(np.linalg.det(end - np.eye(2))) <= ENDPOINT_TOL:
        raise DegenerateEndpoint("endpoint has eigenvalue 1")
    d = mean_index(path)
    if abs(np.trace(end)) < 2.0:
        return 2 * int(np.floor(d / 2.0)) + 1
    return int(round(d))


def iterate(path: SymplecticPath, k: int) -> SymplecticPath:
    """k-th iterate ``Psi^k(t) = Psi(kt - j) Psi(1)^j`` on ``t in [j/k, (j+1)/k]``."""
    if k < 1 or int(k) != k:
        raise InputError("k must be a positive integer")
    if k == 1:
        return path
    end = path.endpoint
    pows = [np.linalg.matrix_power(end, j) for j in range(k)]
    times = [path.times / k]
    mats = [path.matrices]
    for j in range(1, k):
        times.append((path.times[1:] + j) / k)
        mats.append(path.matrices[1:] @ pows[j])
    t = np.concatenate(times)
    t[-1] = 1.0
    gen = None
    if path.generator is not None:
        base = path.generator
        end_g = base(np.array([1.0]))[0]

        def gen(ts, base=base, end_g=end_g, k=k):
            ts = np.asarray(ts, dtype=float)
            j = np.minimum(np.floor(ts * k), k - 1)
            out = base(ts * k - j)
            for jj in range(1, k):
                sel = j == jj
                if np.any(sel):
                    out[sel] = out[sel] @ np.linalg.matrix_power(end_g, jj)
            return out

    return SymplecticPath(t, np.concatenate(mats), gen)


def linearized_path(field, fixedpoint: Sequence[float], T: float, n: int = 2001,
                    tol: float = 1e-10) -> SymplecticPath:
    """Path of Jacobians of the time-sT flow at a zero of ``field``, s in [0, 1].

    ``field`` needs ``vector(p)`` and ``jacobian(p)`` methods (a
    :class:`~surflab.localfields.PlanarHamiltonian` qualifies).  The flow and
    its variational equation are integrated together.
    """
    p0 = np.asarray(fixedpoint, dtype=float)
    if np.linalg.norm(field.vector(p0)) > tol:
        raise NotAFixedPoint(f"|X(p)| = {np.linalg.norm(field.vector(p0)):.3e} > {tol}")

    def rhs(_, y):
        p = y[:2]
        m = y[2:].reshape(2, 2)
        return np.concatenate([field.vector(p), (field.jacobian(p) @ m).ravel()])

    s = np.linspace(0.0, 1.0, n)
    sol = solve_ivp(rhs, (0.0, T), np.concatenate([p0, np.eye(2).ravel()]), t_eval=s * T,
                    method="DOP853", rtol=1e-12, atol=1e-13)
    mats = sol.y[2:].T.reshape(-1, 2, 2)
    mats[0] = np.eye(2)
    drift = np.max(np.abs(np.linalg.det(mats) - 1.0))
    if drift > 1e-7:
        raise InsufficientSampling(f"determinant drift {drift:.2e} along the variational flow")
    a = field.jacobian(p0)

    def gen(ts, a=a, T=T):
        return np.stack([expm(a * T * t) for t in np.atleast_1d(ts)])

    return SymplecticPath(s, mats, gen)
