import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from surflab.errors import InputError, ZeroOnContour
from surflab.localfields import (PlanarHamiltonian, RegionD, evaluate, find_zeros, hyperbolic_regions,
                                 interpolated_field, smoothstep, winding_index)

BOX2 = (-2.0, 2.0, -2.0, 2.0)


def test_construction_invariants():
    for g in (2, 3, 4):
        H = PlanarHamiltonian.construction(g, "pure")
        assert H.h == 4 * g - 2
        assert H.a == pytest.approx(2 * math.pi / (4 * g - 2))
        assert H.delta == 0.0
    assert PlanarHamiltonian.construction(2, "linear_perturbed").delta == 0.1
    with pytest.raises(InputError):
        PlanarHamiltonian.construction(1)
    with pytest.raises(InputError):
        PlanarHamiltonian.construction(2, "quartic")


def test_evaluate_examples():
    v, X = evaluate(PlanarHamiltonian.construction(2, "pure"), (0.0, 0.0))
    assert v == 0.0 and np.allclose(X, 0.0)
    H = PlanarHamiltonian.construction(2, "pure")
    a = 2 * math.pi / 6
    for j in (1, 2, 3):
        y = 0.37
        if abs(math.cos(j * a)) > 1e-9:
            assert abs(float(H.value(np.array([math.tan(j * a) * y, y])))) < 1e-12
    _, X = evaluate(PlanarHamiltonian.construction(2, "linear_perturbed", 0.1), (0.0, 0.0))
    np.testing.assert_allclose(X, [0.0, 0.1], atol=1e-15)


def test_sign_convention_is_counterclockwise():
    H = PlanarHamiltonian.custom("(x**2+y**2)/2")
    np.testing.assert_allclose(H.vector(np.array([1.0, 0.0])), [0.0, 1.0])


def test_conservation_symbolic_and_numeric(rng):
    for g, v in [(2, "pure"), (3, "linear_perturbed"), (3, "cubic_perturbed"), (4, "pure")]:
        H = PlanarHamiltonian.construction(g, v)
        assert sp.simplify(H.conservation_residual()) == 0
        p = rng.uniform(-2, 2, size=(10_000, 2))
        assert np.max(np.abs(np.sum(H.gradient(p) * H.vector(p), -1))) < 1e-12


@pytest.mark.parametrize("g,variant,region,indices", [
    (2, "pure", (-1, 1, -1, 1), [-2]),
    (2, "linear_perturbed", BOX2, [-1, -1]),
    (3, "cubic_perturbed", BOX2, [-2, -1, -1]),
    (3, "pure", BOX2, [-4]),
    (3, "linear_perturbed", BOX2, [-1] * 4),
])
def test_find_zeros_examples(g, variant, region, indices):
    H = PlanarHamiltonian.construction(g, variant)
    recs = find_zeros(H, region, tol=1e-10)
    assert sorted(r.lefschetz_index for r in recs) == indices
    for r in recs:
        if r.nondegenerate:
            assert np.linalg.det(r.jacobian) < 0 and r.lefschetz_index == -1
        if r.hyperbolic_regions is not None:
            assert r.lefschetz_index == 1 - r.hyperbolic_regions // 2
    if variant == "pure":
        assert recs[0].location == pytest.approx((0.0, 0.0), abs=1e-10) and not recs[0].nondegenerate


@pytest.mark.parametrize("g", [2, 3, 4])
def test_index_and_sectors_at_origin(g):
    H = PlanarHamiltonian.construction(g, "pure")
    assert winding_index(H, (0, 0), 0.5) == 2 - 2 * g
    assert hyperbolic_regions(H, (0, 0), 0.5) == 4 * g - 2


def test_elementary_indices():
    assert winding_index(PlanarHamiltonian.custom("(x**2+y**2)/2"), (0, 0), 1.0) == 1
    saddle = PlanarHamiltonian.custom("x*y")
    assert winding_index(saddle, (0, 0), 1.0) == -1
    assert hyperbolic_regions(saddle, (0, 0), 1.0) == 4


def test_winding_of_raw_field():
    assert winding_index(lambda p: np.stack([p[..., 0], -p[..., 1]], -1), (0, 0), 1.0) == -1
    assert winding_index(lambda p: np.stack([p[..., 0] ** 2 - p[..., 1] ** 2, 2 * p[..., 0] * p[..., 1]], -1),
                         (0, 0), 1.0) == 2


def test_zero_on_contour():
    with pytest.raises(ZeroOnContour):
        winding_index(PlanarHamiltonian.custom("x*y"), (1.0, 0.0), 1.0)


@pytest.mark.parametrize("g,variant", [(2, "linear_perturbed"), (3, "linear_perturbed"), (3, "cubic_perturbed"),
                                       (4, "linear_perturbed"), (4, "pure")])
def test_big_contour_equals_sum_of_small(g, variant):
    H = PlanarHamiltonian.construction(g, variant)
    recs = find_zeros(H, BOX2, with_regions=False)
    # degenerate zeros need a contour where |X| ~ r^(2g-1) is well resolved
    locs = np.array([r.location for r in recs])
    small = 0
    for k, r in enumerate(recs):
        gap = min([np.linalg.norm(locs[k] - q) for j, q in enumerate(locs) if j != k], default=1.0)
        small += winding_index(H, r.location, 0.02 if r.nondegenerate else min(0.3, 0.4 * gap))
    assert winding_index(H, (0, 0), 1.9) == small == 2 - 2 * g


def test_smoothstep_properties():
    u = np.linspace(-0.5, 1.5, 2001)
    s, s1, s2 = smoothstep(u)
    assert np.all(s[u <= 0] == 0) and np.all(s[u >= 1] == 1)
    inside = (u > 0.01) & (u < 0.99)  # exp(-1/u) underflows closer to the ends
    assert np.all(s1[inside] > 0)
    h = 1e-6
    x = np.linspace(0.05, 0.95, 19)
    np.testing.assert_allclose(smoothstep(x)[1], (smoothstep(x + h)[0] - smoothstep(x - h)[0]) / (2 * h), atol=1e-7)
    np.testing.assert_allclose(smoothstep(x)[2], (smoothstep(x + h)[1] - smoothstep(x - h)[1]) / (2 * h), atol=1e-5)
    assert smoothstep(0.5)[0] == pytest.approx(0.5)


@pytest.mark.parametrize("g", [2, 3])
def test_blended_field_agrees_with_pieces(g, rng):
    H = PlanarHamiltonian.construction(g, "pure")
    R = RegionD(g)
    B = interpolated_field(H, "Hhat", R)
    p = rng.uniform(-1, 1, size=(4000, 2))
    inner = p[R.contains(p, "Dpp", strict=True)]
    np.testing.assert_allclose(B.value(inner), H.value(inner), rtol=1e-15, atol=1e-16)
    for s in R.sides:
        if s.kind != "identified":
            continue
        lin = B.linear_part(s.index)
        # points between D' and D near the middle of the side
        q = s.midpoint * np.linspace(0.995, 0.999, 5)[:, None]
        assert np.all(~R.contains(q, "Dp", strict=True))
        np.testing.assert_allclose(B.value(q), q @ lin, rtol=0, atol=1e-14)


@pytest.mark.parametrize("g,variant", [(2, "pure"), (2, "linear_perturbed"), (3, "pure")])
def test_no_new_zeros_in_blend(g, variant):
    H = PlanarHamiltonian.construction(g, variant)
    R = RegionD(g)
    for stage in ("Hhat", "F"):
        B = interpolated_field(H, stage, R)
        got = find_zeros(B, (-1.05, 1.05, -1.05, 1.05), domain=R, with_regions=False)
        want = [r for r in find_zeros(H, (-1.05, 1.05, -1.05, 1.05), with_regions=False)
                if R.contains(np.array(r.location), "Dpp", strict=True)]
        assert len(got) == len(want)
        np.testing.assert_allclose(sorted(r.location for r in got), sorted(r.location for r in want), atol=1e-8)


@given(st.floats(0.05, 0.3), st.floats(0.2, 2 * math.pi + 0.2))
@settings(max_examples=30, deadline=None)
def test_winding_law_for_perturbed_cubic(delta, angle):
    # index-region law at every isolated zero of a generic perturbation
    cx, cy = math.cos(angle), math.sin(angle)
    H = PlanarHamiltonian.custom(f"x**3 - 3*x*y**2 + {delta}*(x*{cx} + y*{cy})")
    for r in find_zeros(H, (-2, 2, -2, 2)):
        if r.hyperbolic_regions is not None:
            assert r.lefschetz_index == 1 - r.hyperbolic_regions // 2
    assert sum(r.lefschetz_index for r in find_zeros(H, (-2, 2, -2, 2), with_regions=False)) == \
        winding_index(H, (0, 0), 1.9)
