import math

import numpy as np
import pytest

from surflab import atlas as atl
from surflab import dynamics as dyn
from surflab.errors import HorizonExceeded, InputError
from surflab.localfields import PlanarHamiltonian
from surflab.symreal import parse

PHI = (1 + 5 ** 0.5) / 2


def _circle_gaps(y):
    y = np.sort(np.mod(y, 1.0))
    return np.append(np.diff(y), 1.0 - y[-1] + y[0])


def three_distance_oracle(alpha, n_points, partial_quotients):
    """Gap lengths of {i alpha}, i < n, from the continued fraction of alpha."""
    q = [1, partial_quotients[1]]
    for c in partial_quotients[2:]:
        q.append(c * q[-1] + q[-2])
    nrm = lambda n: abs(n * alpha - round(n * alpha))
    k = max(i for i in range(len(q)) if q[i] < n_points)
    m = (n_points - 1 - q[k - 1]) // q[k]
    d1, d2 = nrm(q[k]), nrm(q[k - 1]) - m * nrm(q[k])
    return sorted({round(d1, 9), round(d2, 9), round(d1 + d2, 9)})


# integration

def test_flat_torus_straight_line():
    T = dyn.flat_torus(1.0, math.sqrt(2))
    tr = dyn.integrate(T, ("torus", np.array([0.1, 0.2])), 10.0)
    for t, _, p in tr.samples:
        exact = np.mod(np.array([0.1, 0.2]) + t * np.array([1.0, math.sqrt(2)]), 1.0)
        d = np.abs(p - exact)
        assert np.all(np.minimum(d, 1 - d) < 1e-10)


def test_circle_period():
    H = PlanarHamiltonian.custom("(x**2+y**2)/2")
    tr = dyn.integrate(H, np.array([1.0, 0.0]), 2 * math.pi)
    np.testing.assert_allclose(tr.end[2], [1.0, 0.0], atol=1e-8)
    assert tr.energy_drift < 1e-9 * 2 * math.pi
    assert tr.jacobian_det_drift < 1e-8 * 2 * math.pi


def test_reversibility_in_the_plane():
    H = PlanarHamiltonian.custom("x**3/3 - x + y**2/2")
    back = PlanarHamiltonian.custom("-(x**3/3 - x + y**2/2)")
    p0 = np.array([0.3, 0.2])
    fwd = dyn.integrate(H, p0, 5.0)
    rev = dyn.integrate(back, fwd.end[2], 5.0)
    np.testing.assert_allclose(rev.end[2], p0, atol=1e-6)


def test_zero_level_orbit_in_D(g2):
    # the ray x = tan(a) y, y < 0 is an incoming separatrix of the origin
    a = 2 * math.pi / 6
    y = -0.2
    p = np.array([math.tan(a) * y, y])
    tr = dyn.integrate(g2, ("D", p), 2.0)
    assert {s[1] for s in tr.samples} == {"D"}
    pts = np.array([s[2] for s in tr.samples])
    assert np.max(np.abs(g2.field_D.value(pts))) < 1e-9
    r = np.hypot(pts[:, 0], pts[:, 1])
    assert r[-1] < r[0]


def test_glued_trace_records_transitions(g2):
    T1 = g2.chart("T1")
    p = T1.from_square(np.array([-T1.epsilon / 2 - 1e-3, 0.01]))
    tr = dyn.integrate(g2, ("T1", p), 1.0)
    charts = [s[1] for s in tr.samples]
    assert "P1" in charts and "D" in charts
    assert tr.jacobian_det_drift < 1e-8


def test_integrate_rejects_bad_input(g2):
    with pytest.raises(InputError):
        dyn.integrate(g2, ("D", np.zeros(2)), -1.0)


@pytest.mark.slow
def test_area_preservation_long_orbit(g2):
    T1 = g2.chart("T1")
    p = T1.from_square(np.array([-T1.epsilon / 2 - 1e-3, 0.03]))
    tr = dyn.integrate(g2, ("T1", p), 100.0)
    assert tr.status == "absorbed" or abs(np.linalg.det(tr.jacobian) - 1) < 1e-6
    assert tr.jacobian_det_drift < 1e-6


# flux

def test_flux_single_torus():
    fv = dyn.flux(dyn.flat_torus(1.0, math.sqrt(2)))
    np.testing.assert_allclose(fv.values, [-math.sqrt(2), 1.0], atol=1e-12)


@pytest.mark.parametrize("g", [2, 3])
def test_flux_ratios_of_atlases(g):
    A = atl.build_surface(g)
    fv = dyn.flux(A)
    assert len(fv.values) == 2 * g and all(abs(v) > 0 for v in fv.values)
    for k, T in enumerate(A.tori):
        assert -fv.values[2 * k] / fv.values[2 * k + 1] == pytest.approx(float(T.slope), abs=1e-9)


def test_hamiltonian_loops_have_zero_flux():
    H = PlanarHamiltonian.construction(2, "linear_perturbed")
    for c, r in [((0.0, 0.0), 0.5), ((0.3, -0.2), 0.1), ((0.0, 0.0), 1.5)]:
        assert abs(dyn.loop_flux(H, c, r)) < 1e-12


# return maps

def test_rational_torus_returns():
    sr = dyn.return_map(dyn.flat_torus(1.0, 0.5), "x=0", 0.1, 4, 10.0)
    np.testing.assert_allclose(sr.times(), [1, 2, 3, 4])
    np.testing.assert_allclose(sr.coordinates(), [0.6, 0.1, 0.6, 0.1], atol=1e-15)


def test_golden_torus_three_gaps():
    sr = dyn.return_map(dyn.flat_torus(1.0, PHI), "x=0", 0.0, 100, 200.0)
    got = sorted({round(float(g), 9) for g in _circle_gaps(sr.coordinates())})
    assert got == three_distance_oracle(PHI, 100, [1] * 40)
    assert len(got) == 3


def test_frozen_three_gap_values():
    assert three_distance_oracle(PHI, 100, [1] * 40) == [0.005024999, 0.008130619, 0.013155617]


def test_torus_horizon():
    with pytest.raises(HorizonExceeded):
        dyn.return_map(dyn.flat_torus(1.0, PHI), "x=0", 0.0, 100, 50.0)


def test_torus_return_is_rigid_rotation(g2):
    T = g2.tori[0]
    R = dyn.TorusReturn(T)
    y = np.linspace(-0.099, 0.099, 199)
    dt, y1 = R(y)
    # piecewise translation: increments take few distinct values
    jumps = np.unique(np.round(y1 - y, 8))
    assert len(jumps) <= 3
    assert np.all(np.abs(np.diff(y1 - y)[np.abs(np.diff(y1 - y)) < 1e-3]) < 1e-8)


def test_table_matches_direct_integration(g2, g2_table):
    # D passages predicted by the table against direct integration
    assert g2_table.level_error < 1e-9
    C = g2.circles[0]
    for (ci, ai), branches in g2_table.branches.items():
        if ci != C.index:
            continue
        for b in branches:
            level = b.level_lo + 0.37 * (b.level_hi - b.level_lo)
            sigma = C.arc_solve(C.arcs[ai], np.array([level]))
            tgt, s_out, dt, absorbed = g2_table.lookup(ci, ai, np.array([level]))
            assert not absorbed[0]
            side, p_exit, t_exit = dyn.flow_through_D(g2, C.point(sigma))[0]
            Ct = g2.circles[int(tgt[0]) - 1]
            np.testing.assert_allclose(Ct.point(s_out).reshape(2), p_exit, atol=1e-6)
            assert float(g2.field_D.value(p_exit)) == pytest.approx(level, abs=1e-8)
            assert dt[0] == pytest.approx(t_exit, rel=0.1)


def test_glued_return_lands_on_square_edges(g2, g2_table):
    G = dyn.GluedReturn(g2, g2_table)
    y = np.linspace(-0.09, 0.09, 37)
    k, y1, t, absorbed, npass = G(np.ones(37, dtype=int), y)
    live = ~absorbed
    assert np.all(t[live] > 0)
    assert np.all(np.isin(k, [1, 2]))
    assert np.all(np.abs(y1[live]) < g2.params.epsilon / 2)


def test_return_map_on_atlas(g2):
    sr = dyn.return_map(g2, "Q1", 0.031, 5, 200.0)
    assert sr.status in ("ok", "absorbed")
    assert np.all(np.diff(sr.times()) > 0)
    with pytest.raises(InputError):
        dyn.return_map(g2, "Q1", 0.5, 5, 200.0)


# periodic orbits and indices

def test_search_periodic_rational_torus_finds_orbits():
    rep = dyn.search_periodic(dyn.flat_torus(1.0, 0.5), 20.0, 10)
    assert rep.found and all(f["period"] == 2 for f in rep.found)


def test_search_periodic_irrational_torus_is_empty():
    rep = dyn.search_periodic(dyn.flat_torus(1.0, PHI), 50.0, 50)
    assert rep.found == []
    assert min(rep.min_return_distance.values()) > 0


def test_search_periodic_g2_short_horizon(g2):
    rep = dyn.search_periodic(g2, 50.0, 200)
    assert rep.found == []
    assert len(rep.fixed_points) == 1
    assert min(rep.min_return_distance.values()) > 0


def test_rational_control_periodic_orbit():
    A = atl.build_surface(2, "pure", slopes=("1", "1/2"), allow_rational=True)
    rep = dyn.search_periodic(A, 50.0, 200)
    assert rep.found
    # hand-built oracle: slope 1 torus with speed c returns after one lap of length sqrt(2)
    T1 = A.tori[0]
    f = [x for x in rep.found if x["section"] == "Q2" and x["period"] == 1]
    assert f and all(x["residual"] < 1e-8 for x in rep.found)
    assert any(x["time"] == pytest.approx(math.sqrt(5) / A.tori[1].speed, rel=1e-6) for x in f)


@pytest.mark.parametrize("g,variant,indices", [(2, "pure", [-2]), (2, "linear_perturbed", [-1, -1]),
                                                (3, "pure", [-4])])
def test_index_audit(g, variant, indices):
    recs, total = dyn.index_audit(atl.build_surface(g, variant))
    assert sorted(r.lefschetz_index for r in recs) == indices
    assert total == 2 - 2 * g


@pytest.mark.parametrize("g,variant,indices", [(3, "cubic_perturbed", [-2, -1, -1]),
                                                (4, "linear_perturbed", [-1] * 6),
                                                (3, "linear_perturbed", [-1] * 4), (4, "pure", [-6])])
def test_index_audit_larger(g, variant, indices):
    recs, total = dyn.index_audit(atl.build_surface(g, variant))
    assert sorted(r.lefschetz_index for r in recs) == indices
    assert total == 2 - 2 * g


@pytest.mark.slow
def test_linear_perturbed_search_only_saddles():
    A = atl.build_surface(2, "linear_perturbed")
    rep = dyn.search_periodic(A, 50.0, 200)
    assert rep.found == []
    assert sorted(f["lefschetz_index"] for f in rep.fixed_points) == [-1, -1]
