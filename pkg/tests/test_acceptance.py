"""The ten acceptance criteria, each with its stated tolerance and time budget.

Every criterion prints one PASS/FAIL line (also collected in the terminal
summary).  Library APIs are called directly; thresholds live here.
"""

import math
import time

import numpy as np
from scipy.linalg import expm

from conftest import ACCEPTANCE
from surflab import atlas as atl
from surflab import dynamics as dyn
from surflab.localfields import PlanarHamiltonian, find_zeros, hyperbolic_regions, winding_index
from surflab.novikov import PeriodVector, novikov_ranks
from surflab.sp2index import SymplecticPath, index, iterate, linearized_path, mean_index, rotation

BOX = (-1.0, 1.0, -1.0, 1.0)


def record(n, title, ok, detail, elapsed, budget):
    line = f"criterion {n:2d} {'PASS' if ok and elapsed < budget else 'FAIL'}  {title}: {detail}  " \
           f"({elapsed:.1f} s, budget {budget:g} s)"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line
    assert elapsed < budget, line


def test_01_index_formula():
    worst, detail, ok = 0.0, [], True
    for g in (2, 3, 4):
        t0 = time.perf_counter()
        H = PlanarHamiltonian.construction(g, "pure")
        w = winding_index(H, (0.0, 0.0), 0.3)
        n = hyperbolic_regions(H, (0.0, 0.0), 0.3)
        worst = max(worst, time.perf_counter() - t0)
        ok &= w == 2 - 2 * g and n == 4 * g - 2
        detail.append(f"g={g}: index {w}, sectors {n}")
    record(1, "index formula", ok, "; ".join(detail), worst, 1.0)


def test_02_saddle_splitting():
    worst, detail, ok = 0.0, [], True
    for g in (2, 3, 4):
        t0 = time.perf_counter()
        recs = find_zeros(PlanarHamiltonian.construction(g, "linear_perturbed"), BOX, with_regions=False)
        worst = max(worst, time.perf_counter() - t0)
        ok &= len(recs) == 2 * g - 2 and all(r.nondegenerate and r.lefschetz_index == -1 for r in recs)
        detail.append(f"g={g}: {len(recs)} saddles")
    record(2, "saddle splitting", ok, "; ".join(detail), worst, 10.0)


def test_03_partition_112():
    t0 = time.perf_counter()
    recs = find_zeros(PlanarHamiltonian.construction(3, "cubic_perturbed"), BOX, with_regions=False)
    idx = sorted(r.lefschetz_index for r in recs)
    record(3, "partition (1,1,2)", idx == [-2, -1, -1], f"indices {idx}", time.perf_counter() - t0, 10.0)


def test_04_poincare_hopf_audit():
    worst, detail, ok = 0.0, [], True
    for g in (2, 3):
        for v in ("pure", "linear_perturbed"):
            t0 = time.perf_counter()
            _, total = dyn.index_audit(atl.build_surface(g, v))
            worst = max(worst, time.perf_counter() - t0)
            ok &= total == 2 - 2 * g
            detail.append(f"g={g} {v}: {total}")
    record(4, "Poincare-Hopf audit", ok, "; ".join(detail), worst, 60.0)


def test_05_novikov_ranks():
    rng = np.random.default_rng(2024)
    symbols = ["sqrt2", "sqrt3", "sqrt5", "pi", "phi", "1"]
    worst, ok, detail = 0.0, True, []
    for g in (1, 2, 3, 5):
        n = 0
        while n < 20:
            per = [f"{int(rng.integers(-3, 4))}*{symbols[int(rng.integers(len(symbols)))]}" for _ in range(2 * g)]
            w = PeriodVector.parse(g, ",".join(per))
            if w.is_zero():
                continue
            n += 1
            t0 = time.perf_counter()
            hr = novikov_ranks(w)
            worst = max(worst, time.perf_counter() - t0)
            ok &= hr.ranks == (0, 2 * g - 2, 0) and hr.euler == 2 - 2 * g
        t0 = time.perf_counter()
        z = novikov_ranks(PeriodVector.parse(g, ",".join(["0"] * (2 * g))))
        worst = max(worst, time.perf_counter() - t0)
        ok &= z.ranks == (1, 2 * g, 1) and z.euler == 2 - 2 * g
        detail.append(f"g={g}: (0, {2 * g - 2}, 0) x20, zero periods {z.ranks}")
    record(5, "Novikov ranks", ok, "; ".join(detail), worst, 5.0)


def _random_path(rng):
    while True:
        s = rng.normal(size=(2, 2))
        a = np.array([[0.0, -1.0], [1.0, 0.0]]) @ (0.5 * (s + s.T) * rng.uniform(0.2, 2.0))
        turns = rng.uniform(-3.0, 3.0)
        end = rotation(2 * math.pi * turns) @ expm(a)
        if abs(np.linalg.det(end - np.eye(2))) > 1e-3 and np.max(np.abs(end)) < 1e3:
            fn = lambda t, a=a, turns=turns: np.stack([rotation(2 * math.pi * turns * x) @ expm(a * x)
                                                       for x in np.atleast_1d(t)])
            return SymplecticPath.from_function(fn, 2001)


def test_06_index_properties():
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    it_err, gap = 0.0, 0.0
    for _ in range(200):
        p = _random_path(rng)
        res = index(p)
        k = int(rng.integers(2, 6))
        it_err = max(it_err, abs(mean_index(iterate(p, k)) - k * res.mean))
        gap = max(gap, abs(res.cz - res.mean))
    record(6, "index properties", it_err < 1e-6 and gap < 1,
           f"max iteration error {it_err:.1e}, max |cz - mean| {gap:.3f}", time.perf_counter() - t0, 30.0)


def test_07_blowup_and_gluing():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    trs, bl = atl.blowup_chart((0.0, 0.0), 0.1)
    det_err = 0.0
    for tr in trs:
        lo, hi = (0.01, bl._a) if tr.kind == "polar" else (bl._a, 0.2)
        for _ in range(500):
            r, th = rng.uniform(lo, hi), rng.uniform(0, 2 * math.pi)
            p = np.array([r * math.cos(th), r * math.sin(th)])
            det_err = max(det_err, abs(float(tr.weight(tr.apply(p)[0])) * np.linalg.det(tr.jacobian(p)) - 1))
    gap = 0.0
    for _ in range(50):
        terms = [f"({rng.normal()!r})*x**{d - i}*y**{i}" for d in range(2, 5) for i in range(d + 1)]
        gap = max(gap, atl.c1_gap(atl.glue_F("+".join(terms)), (0.0, 1.1, 2.6, 4.4)))
    c2 = atl.detects_c2_failure(atl.glue_F("x*(x**2+y**2)"))
    record(7, "blow-up and C1 gluing", det_err < 1e-10 and gap < 1e-5 and c2,
           f"det error {det_err:.1e}, C1 gap {gap:.1e}, C2 failure detected {c2}", time.perf_counter() - t0, 30.0)


def test_08_no_other_periodic_orbits():
    t0 = time.perf_counter()
    rep = dyn.search_periodic(atl.build_surface(2, "pure"), 500.0, 1000)
    table = list(rep.min_return_distance.values())
    ctrl = dyn.search_periodic(atl.build_surface(2, "pure", slopes=("1", "1/2"), allow_rational=True), 50.0, 200)
    ok = rep.found == [] and len(rep.fixed_points) == 1 and len(table) > 0 and min(table) > 0 and len(ctrl.found) > 0
    record(8, "no other periodic orbits", ok,
           f"found {len(rep.found)}, min return distance {min(table):.2e} over {len(table)} iterates, "
           f"rational control found {len(ctrl.found)}", time.perf_counter() - t0, 600.0)


def test_09_flux_irrationality():
    t0 = time.perf_counter()
    ok, detail = True, []
    for g in (2, 3):
        A = atl.build_surface(g)
        fv = dyn.flux(A)
        for k, T in enumerate(A.tori):
            ratio = -fv.values[2 * k] / fv.values[2 * k + 1]
            ok &= abs(ratio - float(T.slope)) < 1e-9 and not T.slope.is_rational()
            detail.append(f"g={g} T{k + 1}: {T.slope}")
    record(9, "flux irrationality", ok, "; ".join(detail), time.perf_counter() - t0, 10.0)


def test_10_mean_index_at_saddles():
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for g, v in ((2, "pure"), (3, "pure"), (4, "pure"), (2, "linear_perturbed"), (3, "linear_perturbed"),
                 (4, "linear_perturbed"), (3, "cubic_perturbed")):
        H = PlanarHamiltonian.construction(g, v)
        for r in find_zeros(H, BOX, with_regions=False):
            if r.lefschetz_index < 0:
                worst = max(worst, abs(mean_index(linearized_path(H, r.location, 1.0, n=401))))
                n += 1
    record(10, "mean index at saddles", worst < 1e-6, f"{n} saddles, max |mean index| {worst:.1e}",
           time.perf_counter() - t0, 30.0)
