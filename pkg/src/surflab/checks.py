"""The checkable claims, each returning report entries.

Every function takes a seeded generator (where randomness is used) and
returns a list of :class:`Claim`.  ``ALL`` maps criterion numbers to the
functions, in the order the acceptance suite runs them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Callable

import numpy as np
from scipy.linalg import expm

from . import atlas as atl
from . import dynamics as dyn
from .localfields import PlanarHamiltonian, find_zeros, hyperbolic_regions, winding_index
from .novikov import PeriodVector, novikov_ranks
from .sp2index import SymplecticPath, index, iterate, linearized_path, mean_index, rotation

PLANE_BOX = (-1.0, 1.0, -1.0, 1.0)

# anchors name the statement each claim checks
ANCHORS = {
    "index": "index 2-2g and 4g-2 hyperbolic sectors of the product-of-lines zero",
    "split": "linear perturbation splits the zero into 2g-2 saddles of index -1",
    "partition": "cubic perturbation realises the partition (1,1,2) for g=3",
    "audit": "Lefschetz index sum equals the Euler characteristic",
    "novikov": "Novikov ranks (0,2g-2,0) for non-exact forms, Euler number 2-2g",
    "cz": "mean index homogeneous under iteration, within 1 of the Conley-Zehnder index",
    "blowup": "blow-up coordinates are symplectic and the glued Hamiltonian is C1 but not C2",
    "periodic": "the constructed flow has no periodic orbits besides its fixed points",
    "flux": "flux of the constructed flows is not rational",
    "mean": "mean index vanishes at the fixed points of flows with finitely many periodic points",
    "conservation": "the Hamiltonian is constant along its own vector field",
    "atlas": "edge pairings close up to a surface of Euler characteristic 2-2g with area-preserving transitions",
}


@dataclass
class Claim:
    claim_id: str
    anchor: str
    computed: Any
    expected: Any
    tolerance: float | None
    passed: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["computed"], d["expected"] = _plain(self.computed), _plain(self.expected)
        return d


def _plain(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def exact(cid: str, key: str, computed, expected) -> Claim:
    return Claim(cid, ANCHORS[key], computed, expected, None, computed == expected)


def close(cid: str, key: str, computed: float, expected: float, tol: float) -> Claim:
    return Claim(cid, ANCHORS[key], computed, expected, tol, bool(abs(computed - expected) < tol))


def below(cid: str, key: str, computed: float, bound: float) -> Claim:
    return Claim(cid, ANCHORS[key], computed, f"< {bound}", bound, bool(computed < bound))


# planar zeros

def plane_indices(genus: int, variant: str = "pure", delta: float | None = None) -> list[int]:
    H = PlanarHamiltonian.construction(genus, variant, delta)
    return sorted(r.lefschetz_index for r in find_zeros(H, PLANE_BOX, with_regions=False))


def index_at_origin(genus: int) -> list[Claim]:
    H = PlanarHamiltonian.construction(genus, "pure")
    w = winding_index(H, (0.0, 0.0), 0.3)
    n = hyperbolic_regions(H, (0.0, 0.0), 0.3)
    return [exact(f"01.g{genus}.winding", "index", w, 2 - 2 * genus),
            exact(f"01.g{genus}.sectors", "index", n, 4 * genus - 2)]


def saddle_split(genus: int) -> list[Claim]:
    H = PlanarHamiltonian.construction(genus, "linear_perturbed")
    recs = find_zeros(H, PLANE_BOX, with_regions=False)
    idx = sorted(r.lefschetz_index for r in recs)
    return [exact(f"02.g{genus}.indices", "split", idx, [-1] * (2 * genus - 2)),
            exact(f"02.g{genus}.nondegenerate", "split", all(r.nondegenerate for r in recs), True)]


def partition_113() -> list[Claim]:
    return [exact("03.g3.cubic", "partition", plane_indices(3, "cubic_perturbed"), [-2, -1, -1])]


# atlases

def audit(genus: int, variant: str) -> list[Claim]:
    A = atl.build_surface(genus, variant)
    _, total = dyn.index_audit(A)
    return [exact(f"04.g{genus}.{variant}", "audit", total, 2 - 2 * genus),
            exact(f"04.g{genus}.{variant}.euler", "audit", A.euler_characteristic(), 2 - 2 * genus)]


def novikov_suite(genus: int, rng: np.random.Generator, count: int = 20) -> list[Claim]:
    bad = []
    symbols = ["sqrt2", "sqrt3", "sqrt5", "pi", "phi"]
    done = 0
    while done < count:
        per = []
        for _ in range(2 * genus):
            c = int(rng.integers(-3, 4))
            per.append(f"{c}*{symbols[int(rng.integers(len(symbols)))]}" if rng.random() < 0.6 else str(c))
        w = PeriodVector.parse(genus, ",".join(per))
        if w.is_zero():
            continue
        done += 1
        hr = novikov_ranks(w)
        if hr.ranks != (0, 2 * genus - 2, 0) or hr.euler != 2 - 2 * genus:
            bad.append(",".join(per))
    z = novikov_ranks(PeriodVector.parse(genus, ",".join(["0"] * (2 * genus))))
    return [exact(f"05.g{genus}.random", "novikov", bad, []),
            exact(f"05.g{genus}.zero", "novikov", list(z.ranks), [1, 2 * genus, 1]),
            exact(f"05.g{genus}.euler", "novikov", z.euler, 2 - 2 * genus)]


def random_path(rng: np.random.Generator) -> SymplecticPath:
    """``exp(tA)`` for a random Hamiltonian matrix, possibly followed by a rotation."""
    while True:
        s = rng.normal(size=(2, 2))
        s = 0.5 * (s + s.T) * rng.uniform(0.2, 2.0)
        a = np.array([[0.0, -1.0], [1.0, 0.0]]) @ s
        turns = rng.uniform(-3.0, 3.0)
        end0 = expm(a)

        def gen(t, a=a, turns=turns):
            t = np.atleast_1d(np.asarray(t, dtype=float))
            return np.stack([rotation(2 * math.pi * turns * tt) @ expm(a * tt) for tt in t])

        end = rotation(2 * math.pi * turns) @ end0
        if abs(np.linalg.det(end - np.eye(2))) > 1e-3 and np.max(np.abs(end)) < 1e3:
            return SymplecticPath.from_function(gen, 2001)


def index_properties(rng: np.random.Generator, count: int = 200) -> list[Claim]:
    it_err, cz_gap = 0.0, 0.0
    for _ in range(count):
        p = random_path(rng)
        k = int(rng.integers(2, 6))
        res = index(p)
        it_err = max(it_err, abs(mean_index(iterate(p, k)) - k * res.mean))
        cz_gap = max(cz_gap, abs(res.cz - res.mean))
    return [below("06.iteration", "cz", it_err, 1e-6), below("06.cz_vs_mean", "cz", cz_gap, 1.0)]


def blowup_suite(rng: np.random.Generator, count: int = 50) -> list[Claim]:
    det_err = blowup_det_error(0.1)
    gap = 0.0
    thetas = (0.0, 0.9, 2.3, 4.1)
    for _ in range(count):
        H = random_polynomial(rng)
        gap = max(gap, atl.c1_gap(atl.glue_F(H), thetas))
    c2 = atl.detects_c2_failure(atl.glue_F("x*(x**2+y**2)"))
    c2_false = atl.detects_c2_failure(atl.glue_F("x**2-y**2"))
    return [below("07.jacobian_det", "blowup", det_err, 1e-10), below("07.c1_gap", "blowup", gap, 1e-6),
            exact("07.c2_cubic", "blowup", c2, True), exact("07.c2_quadratic", "blowup", c2_false, False)]


def blowup_det_error(delta: float) -> float:
    """Largest ``|w(rho) det J - 1|`` over both blow-up coordinate bands."""
    trs, bl = atl.blowup_chart((0.0, 0.0), delta)
    err = 0.0
    for tr in trs:
        lo, hi = (0.1 * delta, bl._a) if tr.kind == "polar" else (bl._a, 2 * delta)
        for r in np.linspace(lo, hi, 25):
            for th in (0.3, 1.9, 4.0):
                p = np.array([r * math.cos(th), r * math.sin(th)])
                rho = tr.apply(p)[0]
                err = max(err, abs(float(tr.weight(rho)) * np.linalg.det(tr.jacobian(p)) - 1.0))
    return err


def random_polynomial(rng: np.random.Generator, degree: int = 4) -> str:
    """Random polynomial with no constant or linear part."""
    terms = []
    for d in range(2, degree + 1):
        for i in range(d + 1):
            c = float(rng.normal())
            terms.append(f"({c!r})*x**{d - i}*y**{i}")
    return "+".join(terms)


def periodic_search(T_max: float = 500.0, seeds: int = 1000) -> list[Claim]:
    A = atl.build_surface(2, "pure")
    rep = dyn.search_periodic(A, T_max, seeds)
    table = list(rep.min_return_distance.values())
    B = atl.build_surface(2, "pure", slopes=("1", "1/2"), allow_rational=True)
    ctrl = dyn.search_periodic(B, 50.0, 200)
    return [exact("08.found", "periodic", rep.found, []),
            exact("08.fixed_points", "periodic", len(rep.fixed_points), 1),
            Claim("08.min_return_distance", ANCHORS["periodic"], min(table) if table else None, "> 0", None,
                  bool(table) and min(table) > 0),
            exact("08.rational_control", "periodic", len(ctrl.found) > 0, True)]


def flux_ratios(genus: int = 2, variant: str = "pure") -> list[Claim]:
    A = atl.build_surface(genus, variant)
    fv = dyn.flux(A)
    out = []
    for k, T in enumerate(A.tori):
        ratio = -fv.values[2 * k] / fv.values[2 * k + 1]
        out.append(close(f"09.g{genus}.T{k + 1}", "flux", ratio, float(T.slope), 1e-9))
        out.append(exact(f"09.g{genus}.T{k + 1}.irrational", "flux", not T.slope.is_rational(), True))
    return out


def saddles(genus: int, variant: str) -> list[tuple[float, float]]:
    H = PlanarHamiltonian.construction(genus, variant)
    return [r.location for r in find_zeros(H, PLANE_BOX, with_regions=False) if r.lefschetz_index < 0]


def mean_index_at_saddles(cases=((2, "pure"), (3, "pure"), (2, "linear_perturbed"), (3, "linear_perturbed"),
                                 (4, "linear_perturbed"), (3, "cubic_perturbed"))) -> list[Claim]:
    out = []
    for g, v in cases:
        H = PlanarHamiltonian.construction(g, v)
        worst = 0.0
        for z in saddles(g, v):
            worst = max(worst, abs(mean_index(linearized_path(H, z, 1.0, n=401))))
        out.append(below(f"10.g{g}.{v}", "mean", worst, 1e-6))
    return out


ALL: dict[int, Callable[[np.random.Generator], list[Claim]]] = {
    1: lambda rng: sum((index_at_origin(g) for g in (2, 3, 4)), []),
    2: lambda rng: sum((saddle_split(g) for g in (2, 3, 4)), []),
    3: lambda rng: partition_113(),
    4: lambda rng: sum((audit(g, v) for g in (2, 3) for v in ("pure", "linear_perturbed")), []),
    5: lambda rng: sum((novikov_suite(g, rng) for g in (1, 2, 3, 5)), []),
    6: lambda rng: index_properties(rng),
    7: lambda rng: blowup_suite(rng),
    8: lambda rng: periodic_search(),
    9: lambda rng: sum((flux_ratios(g) for g in (2, 3)), []),
    10: lambda rng: mean_index_at_saddles(),
}


def run(criteria=None, seed: int = 0) -> list[Claim]:
    """Run the selected criteria (all by default); each gets its own seeded generator."""
    out = []
    for k in sorted(criteria or ALL):
        out += ALL[k](np.random.default_rng([seed, k]))
    return sorted(out, key=lambda c: c.claim_id)
