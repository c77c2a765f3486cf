import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surflab import atlas as atl
from surflab import dynamics as dyn
from surflab.checks import random_polynomial
from surflab.errors import CrowdedDisc, InputError, NotVanishingAtOrigin
from surflab.localfields import PlanarHamiltonian, find_zeros


def test_g2_structure(g2):
    assert len(g2.tori) == len(g2.connectors) == 2
    assert g2.euler_characteristic() == -2
    assert g2.region.l == 4
    for T in g2.tori:
        assert not T.slope.is_rational()


def test_g3_pairing_table(g3):
    assert sorted(g3.pairings) == [(1, 3), (5, 7)]
    assert len(g3.tori) == 3
    assert g3.euler_characteristic() == -4


@pytest.mark.parametrize("g", [2, 3, 4, 5])
def test_pairing_formula_and_parity(g):
    R = atl.build_surface(g).region
    ident = [s.index for s in R.sides if s.kind == "identified"]
    assert all((i % 2 == g % 2) for i in ident)
    assert all(atl.paired_side(g, atl.paired_side(g, i)) == i for i in ident)


@pytest.mark.parametrize("g,variant", [(2, "pure"), (2, "linear_perturbed"), (3, "pure")])
def test_validate(g, variant):
    v = atl.validate(atl.build_surface(g, variant), samples=300)
    assert v["ok"], v
    assert max(v["side_det_error"], v["square_det_error"], v["height_det_error"]) < 1e-10
    assert max(v["side_field_mismatch"], v["square_field_mismatch"]) < 1e-9


def test_fixed_points_of_built_atlases(g2):
    recs, total = dyn.index_audit(g2)
    assert len(recs) == 1 and total == -2
    recs, total = dyn.index_audit(atl.build_surface(2, "linear_perturbed"))
    assert sorted(r.lefschetz_index for r in recs) == [-1, -1]


def test_rational_slopes_rejected():
    with pytest.raises(InputError):
        atl.build_surface(2, "pure", slopes=("1", "1/2"))
    A = atl.build_surface(2, "pure", slopes=("1", "1/2"), allow_rational=True)
    assert A.tori[1].slope.is_rational()


def test_json_round_trip(g2):
    doc = g2.dumps()
    B = atl.ChartAtlas.from_json(doc)
    assert B.dumps() == doc


@pytest.mark.parametrize("doc", ["{not json", json.dumps({"format": "other"}),
                                 json.dumps({"format": "surflab-atlas", "params": {"genus": 2}})])
def test_corrupt_documents(doc):
    with pytest.raises(InputError):
        atl.ChartAtlas.from_json(doc)


def test_tampered_pairings(g2):
    d = json.loads(g2.dumps())
    d["pairings"] = [[1, 2]]
    with pytest.raises(InputError):
        atl.ChartAtlas.from_json(json.dumps(d))


def test_cylinder_map_is_injective_on_rectangle(g2):
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.5, 0.5, size=(200, 2))
    img = g2.cylinder_map(pts)
    assert img.shape == (200, 3)
    np.testing.assert_allclose(np.hypot(img[:, 0], img[:, 2]), 1.0)


# blow-up and gluing

def test_profile_invariants():
    bl = atl.BlowupGluing(0.1)
    d, e = bl.delta, bl.eps_f
    x = np.linspace(d, d + e, 50)
    np.testing.assert_allclose(bl.f(x), x * x / 2)
    x = np.linspace(2 * d - e, 2 * d, 50)
    np.testing.assert_allclose(bl.f(x), x)
    x = np.linspace(d, 2 * d, 1000)
    assert np.all(bl.fprime(x) > 0)
    rho = np.linspace(d * d / 2, 2 * d, 1000)
    assert np.all(bl.h(rho) > 0)
    np.testing.assert_allclose(bl.f(bl.finv(rho)), rho, atol=1e-15)


def test_polar_transition_is_symplectic():
    trs, bl = atl.blowup_chart((0.0, 0.0), 0.1, field=None)
    rng = np.random.default_rng(0)
    for tr in trs:
        lo, hi = (0.01, bl._a) if tr.kind == "polar" else (bl._a, 0.2)
        for _ in range(1000 // len(trs)):
            r, th = rng.uniform(lo, hi), rng.uniform(0, 2 * math.pi)
            p = np.array([r * math.cos(th), r * math.sin(th)])
            rho = tr.apply(p)[0]
            assert abs(float(tr.weight(rho)) * np.linalg.det(tr.jacobian(p)) - 1) < 1e-10


def test_crowded_disc():
    H = PlanarHamiltonian.construction(2, "linear_perturbed")
    z = [r.location for r in find_zeros(H, (-2, 2, -2, 2), with_regions=False)]
    d = float(np.linalg.norm(np.subtract(z[0], z[1])))
    with pytest.raises(CrowdedDisc):
        atl.blowup_chart(z[0], 0.6 * d, field=H)
    atl.blowup_chart(z[0], 0.4 * d, field=H)


def test_circle_action_of_linear_map():
    A = np.array([[2.0, 1.0], [0.0, 0.5]])
    th = np.linspace(0, 2 * math.pi, 17)
    u = np.stack([np.cos(th), np.sin(th)], -1) @ A.T
    u /= np.linalg.norm(u, axis=1)[:, None]
    ang = atl.circle_action(A, th)
    np.testing.assert_allclose(np.stack([np.cos(ang), np.sin(ang)], -1), u, atol=1e-14)
    # velocity of the projectivised linear flow: derivative of the angle of exp(tA) u at t = 0
    from scipy.linalg import expm
    h = 1e-6
    fd = (atl.circle_action(expm(h * A), th) - atl.circle_action(expm(-h * A), th)) / (2 * h)
    fd = (fd + math.pi / h) % (2 * math.pi / h) - math.pi / h
    np.testing.assert_allclose(atl.boundary_velocity(A, th), fd, atol=1e-6)


def test_glued_cubic_closed_form():
    F = atl.glue_F("x*(x**2+y**2)")
    rho = np.array([0.01, 0.2, 1.0])
    for th in (0.0, 1.0, 2.5):
        np.testing.assert_allclose(F(rho, th), (2 * rho) ** 1.5 * math.cos(th), rtol=1e-13)
        np.testing.assert_allclose(F(-rho, th), (2 * rho) ** 1.5 * math.cos(th), rtol=1e-13)
    assert atl.detects_c2_failure(F)
    assert atl.c1_gap(F, (0.0, 1.0)) < 1e-5


def test_glued_quadratic_is_smooth():
    F = atl.glue_F("x**2-y**2")
    rho = np.linspace(-1, 1, 11)
    for th in (0.0, 0.4, 2.0):
        np.testing.assert_allclose(F(rho, th), 2 * rho * math.cos(2 * th), atol=1e-14)
    assert not atl.detects_c2_failure(F)


def test_glue_zero_and_errors():
    F = atl.glue_F("0*x")
    assert np.all(F(np.linspace(-1, 1, 5), 0.3) == 0)
    with pytest.raises(NotVanishingAtOrigin):
        atl.glue_F("x**2 + 1")
    with pytest.raises(NotVanishingAtOrigin):
        atl.glue_F("x + y**2")


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_c1_gluing_random_polynomials(seed):
    F = atl.glue_F(random_polynomial(np.random.default_rng(seed)))
    assert atl.c1_gap(F, (0.0, 0.9, 2.3, 4.1)) < 1e-5
