import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.optimize import minimize_scalar

from surflab.checks import random_path
from surflab.errors import DegenerateEndpoint, InputError, NotAFixedPoint
from surflab.localfields import PlanarHamiltonian
from surflab.sp2index import (SymplecticPath, cz_from_mean, cz_index, index, iterate, linearized_path,
                              mean_index, rotation)

J = np.array([[0.0, -1.0], [1.0, 0.0]])


def rot_path(lam, n=2001):
    return SymplecticPath.from_function(lambda t: np.stack([rotation(2 * math.pi * lam * s) for s in np.atleast_1d(t)]), n)


def hyp_path(n=2001):
    return SymplecticPath.from_function(lambda t: np.stack([np.diag([math.exp(s), math.exp(-s)])
                                                            for s in np.atleast_1d(t)]), n)


def crossing_oracle(fn, grid=100_000):
    """Signed crossing count of t -> fn(t) with the identity, from scratch.

    Zeros of the smallest singular value of fn(t) - I are bracketed on a fine
    grid and polished; each contributes the signature of the crossing form
    -J fn'(t) fn(t)^-1 on the kernel, the start contributes half of it.
    """
    def smin(s):
        return np.linalg.svd(fn(np.array([s]))[0] - np.eye(2), compute_uv=False)[-1]

    def form(s):
        h = 1e-6
        a, b = fn(np.array([max(s - h, 0.0)]))[0], fn(np.array([min(s + h, 1.0)]))[0]
        dm = (b - a) / (min(s + h, 1.0) - max(s - h, 0.0))
        S = -J @ dm @ np.linalg.inv(fn(np.array([s]))[0])
        return 0.5 * (S + S.T)

    def sig_on_kernel(s):
        m = fn(np.array([s]))[0] - np.eye(2)
        _, sv, vt = np.linalg.svd(m)
        K = np.eye(2) if sv[0] < 1e-4 else vt[-1:]
        ev = np.linalg.eigvalsh(K @ form(s) @ K.T)
        return int(np.sum(ev > 0) - np.sum(ev < 0))

    ts = np.linspace(0.0, 1.0, grid + 1)
    vals = np.linalg.svd(fn(ts) - np.eye(2), compute_uv=False)[:, -1]
    total = sig_on_kernel(0.0) / 2
    for i in range(1, grid):
        if vals[i] <= vals[i - 1] and vals[i] <= vals[i + 1] and vals[i] < 1e-2:
            r = minimize_scalar(smin, bounds=(ts[i - 1], ts[i + 1]), method="bounded", options={"xatol": 1e-13})
            if r.fun < 1e-5:
                total += sig_on_kernel(r.x)
    return total


def test_oracle_values_are_frozen():
    rot = lambda lam: (lambda t: np.stack([rotation(2 * math.pi * lam * s) for s in t]))
    assert crossing_oracle(rot(0.3)) == 1
    assert crossing_oracle(rot(1.3)) == 3
    assert crossing_oracle(lambda t: np.stack([np.diag([math.exp(s), math.exp(-s)]) for s in t])) == 0


@pytest.mark.parametrize("lam,cz", [(0.3, 1), (1.3, 3), (-0.3, -1), (2.7, 5)])
def test_cz_rotation(lam, cz):
    assert cz_index(rot_path(lam)) == cz
    assert cz_from_mean(rot_path(lam)) == cz


def test_cz_hyperbolic():
    assert cz_index(hyp_path()) == 0


def test_cz_degenerate_endpoint():
    with pytest.raises(DegenerateEndpoint):
        cz_index(rot_path(1.0))
    res = index(rot_path(1.0))
    assert res.cz is None and not res.nondegenerate


def test_mean_index_values():
    assert mean_index(rot_path(0.3)) == pytest.approx(0.6, abs=1e-12)
    ident = SymplecticPath(np.linspace(0, 1, 11), np.tile(np.eye(2), (11, 1, 1)))
    assert mean_index(ident) == 0.0
    assert mean_index(hyp_path()) == pytest.approx(0.0, abs=1e-12)


def test_mean_index_limit_oracle():
    # cz(Psi^k)/k -> mean index; k = 101 avoids a degenerate iterate
    k = 101
    fn = lambda t: np.stack([rotation(2 * math.pi * 0.3 * k * s) for s in t])
    assert crossing_oracle(fn) / k == pytest.approx(0.6, abs=0.02)
    assert crossing_oracle(fn) == cz_index(iterate(rot_path(0.3), k))


def test_iterate_examples():
    p5 = iterate(rot_path(0.3), 5)
    assert mean_index(p5) == pytest.approx(3.0, abs=1e-9)
    p = rot_path(0.3)
    assert iterate(p, 1) is p
    p3 = iterate(hyp_path(), 3)
    np.testing.assert_allclose(p3.endpoint, np.diag([math.exp(3), math.exp(-3)]), rtol=1e-12)
    assert mean_index(p3) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InputError):
        iterate(p, 0)


def test_path_validation():
    with pytest.raises(InputError):
        SymplecticPath(np.array([0.0, 1.0]), np.stack([np.eye(2) * 2, np.eye(2)]))
    with pytest.raises(InputError):
        SymplecticPath(np.array([0.0, 1.0]), np.stack([np.eye(2), np.diag([2.0, 2.0])]))
    with pytest.raises(InputError):
        SymplecticPath(np.array([0.0, 0.5]), np.stack([np.eye(2), np.eye(2)]))


def test_csv_round_trip():
    p = rot_path(0.3, 51)
    q = SymplecticPath.from_csv(p.to_csv())
    np.testing.assert_array_equal(p.times, q.times)
    np.testing.assert_array_equal(p.matrices, q.matrices)


def test_linearized_paths():
    centre = PlanarHamiltonian.custom("(x**2+y**2)/2")
    assert mean_index(linearized_path(centre, (0.0, 0.0), 1.0)) == pytest.approx(1 / math.pi, abs=1e-8)
    saddle = PlanarHamiltonian.custom("x*y")
    assert mean_index(linearized_path(saddle, (0.0, 0.0), 1.0)) == pytest.approx(0.0, abs=1e-12)
    H0 = PlanarHamiltonian.construction(2, "pure")
    p = linearized_path(H0, (0.0, 0.0), 1.0)
    np.testing.assert_allclose(p.matrices, np.tile(np.eye(2), (len(p.times), 1, 1)), atol=1e-12)
    with pytest.raises(NotAFixedPoint):
        linearized_path(centre, (0.3, 0.0), 1.0)


@pytest.mark.parametrize("seed", range(6))
def test_random_paths_against_oracle(seed):
    p = random_path(np.random.default_rng(seed))
    assert cz_index(p) == crossing_oracle(p.generator, grid=20_000)


def test_iteration_and_gap_on_random_paths():
    rng = np.random.default_rng(7)
    for _ in range(40):
        p = random_path(rng)
        res = index(p)
        for k in (2, 3, 5, 7):
            assert abs(mean_index(iterate(p, k)) - k * res.mean) < 1e-6
        assert abs(res.cz - res.mean) < 1


@given(st.floats(-3.0, 3.0), st.floats(-1.0, 1.0), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_continuity_under_small_perturbation(turns, a, seed):
    A = np.array([[a, 0.4], [0.1, -a]])
    fn = lambda t: np.stack([rotation(2 * math.pi * turns * s) @ expm(A * s) for s in np.atleast_1d(t)])
    p = SymplecticPath.from_function(fn, 801)
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(len(p.times), 2, 2))
    S = 0.5 * (S + np.transpose(S, (0, 2, 1)))
    S /= np.linalg.norm(S, ord=2, axis=(1, 2))[:, None, None]
    pert = np.stack([expm(1e-4 * J @ s) for s in S])
    pert[0] = np.eye(2)
    q = SymplecticPath(p.times, p.matrices @ pert)
    assert abs(mean_index(q) - mean_index(p)) < 1e-2


@given(st.floats(0.05, 2.95).filter(lambda x: abs(x - round(x)) > 0.02))
@settings(max_examples=20, deadline=None)
def test_refinement_stability(lam):
    p = rot_path(lam, 401)
    assert cz_index(p) == cz_index(p.refined(2))
