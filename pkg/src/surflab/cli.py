"""The ``lab`` command line tool.

Every subcommand builds a :class:`RunConfig`, runs it and writes a
:class:`Report` (``report.json``) plus its data files to ``--out``.  Exit
status: 0 when every claim passes, 1 when one fails, 2 for bad input and
3 for numerical or internal failures.  Errors are printed as one JSON
object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import scipy
import sympy

from . import __version__
from . import atlas as atl
from . import checks
from . import dynamics as dyn
from .checks import ANCHORS, Claim, below, close, exact
from .errors import InputError, SurflabError
from .localfields import PlanarHamiltonian, find_zeros, winding_index
from .novikov import PeriodVector, novikov_ranks
from .sp2index import SymplecticPath, index, linearized_path

COMMANDS = ("indices", "zeros", "cz", "novikov", "atlas", "orbits", "flux", "blowup", "reproduce", "fields")
VARIANTS = ("pure", "linear_perturbed", "cubic_perturbed")
EXIT_PASS, EXIT_FAIL, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class RunConfig:
    command: str
    genus: int = 2
    variant: str = "pure"
    delta: Optional[float] = None
    epsilon: float = 0.2
    slopes: Optional[list] = None
    tolerances: dict = field(default_factory=dict)
    out: Optional[str] = None
    seed: int = 0
    action: Optional[str] = None  # atlas: build | validate
    atlas: Optional[str] = None
    periods: Optional[str] = None
    path: Optional[str] = None
    hamiltonian: Optional[str] = None
    T: float = 500.0
    seeds: int = 1000
    sections: Optional[list] = None
    criteria: Optional[list] = None
    box: float = 1.0
    grid: int = 41

    def validate(self) -> RunConfig:
        def need(ok, msg):
            if not ok:
                raise InputError(msg)

        need(self.command in COMMANDS, f"unknown command {self.command!r}")
        need(isinstance(self.genus, int) and 1 <= self.genus <= 12, "genus must be an integer in 1..12")
        if self.command not in ("novikov", "cz", "blowup", "reproduce"):
            need(self.genus >= 2, "genus must be >= 2 for this command")
        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}")
        need(self.delta is None or 0 < self.delta <= 1, "delta must lie in (0, 1]")
        need(0 < self.epsilon < 0.5, "epsilon must lie in (0, 0.5)")
        need(self.slopes is None or len(self.slopes) == self.genus, "need one slope per torus")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        need(0 < self.T <= 1e5, "T must lie in (0, 1e5]")
        need(isinstance(self.seeds, int) and 1 <= self.seeds <= 10**6, "seeds must lie in 1..1e6")
        need(0 < self.box <= 100, "box must lie in (0, 100]")
        need(isinstance(self.grid, int) and 2 <= self.grid <= 2001, "grid must lie in 2..2001")
        need(all(isinstance(v, (int, float)) and v > 0 for v in self.tolerances.values()),
             "tolerances must be positive numbers")
        if self.command == "atlas":
            need(self.action in ("build", "validate"), "atlas needs the action build or validate")
        if self.command == "novikov":
            need(self.periods is not None, "novikov needs --periods")
        if self.criteria is not None:
            need(all(c in checks.ALL for c in self.criteria), f"criteria must be among {sorted(checks.ALL)}")
        return self

    def tol(self, name: str, default: float) -> float:
        return float(self.tolerances.get(name, default))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str | dict) -> RunConfig:
        try:
            d = json.loads(text) if isinstance(text, str) else dict(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}") from exc
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InputError(f"unknown config keys: {sorted(extra)}")
        if "command" not in d:
            raise InputError("config lacks 'command'")
        return cls(**d).validate()


@dataclass
class Report:
    claims: list
    environment: dict
    artifacts: dict = field(default_factory=dict)  # file name -> text

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.claims)

    def to_json(self) -> dict:
        return {"status": "pass" if self.passed else "fail",
                "claims": [c.to_dict() for c in sorted(self.claims, key=lambda c: c.claim_id)],
                "environment": self.environment, "artifacts": sorted(self.artifacts)}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def environment(cfg: RunConfig) -> dict:
    return {"surflab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "sympy": sympy.__version__, "platform": platform.platform(),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), "config": json.loads(cfg.to_json())}


def _dump(obj) -> str:
    return json.dumps(checks._plain(obj), indent=2, sort_keys=True)


def _surface(cfg: RunConfig) -> atl.ChartAtlas:
    if cfg.atlas:
        try:
            with open(cfg.atlas) as fh:
                text = fh.read()
        except OSError as exc:
            raise InputError(f"cannot read atlas file: {exc}") from exc
        return atl.ChartAtlas.from_json(text)
    params = atl.SurfaceParams(cfg.genus, cfg.variant, cfg.delta, cfg.epsilon,
                               None if cfg.slopes is None else tuple(cfg.slopes))
    return atl.build_surface(params)


# subcommands; each returns (claims, artifacts)

def _indices(cfg):
    H = PlanarHamiltonian.construction(cfg.genus, cfg.variant, cfg.delta)
    g = cfg.genus
    if cfg.variant == "pure":
        w = winding_index(H, (0.0, 0.0), 0.3)
        return [exact(f"indices.g{g}.origin", "index", w, 2 - 2 * g)], {"indices.json": _dump({"origin": w})}
    recs = find_zeros(H, checks.PLANE_BOX, with_regions=False)
    idx = sorted(r.lefschetz_index for r in recs)
    claims = [exact(f"indices.g{g}.{cfg.variant}.sum", "audit", sum(idx), 2 - 2 * g)]
    return claims, {"indices.json": _dump({"indices": idx})}


def _zeros_claims(cfg, recs, tag):
    g = cfg.genus
    claims = [exact(f"{tag}.g{g}.{cfg.variant}.sum", "audit", sum(r.lefschetz_index for r in recs), 2 - 2 * g)]
    nd = [r.lefschetz_index for r in recs if r.nondegenerate]
    claims.append(exact(f"{tag}.g{g}.{cfg.variant}.nondegenerate", "split", all(i == -1 for i in nd), True))
    law = [r.lefschetz_index == 1 - r.hyperbolic_regions // 2 for r in recs if r.hyperbolic_regions is not None]
    claims.append(exact(f"{tag}.g{g}.{cfg.variant}.sectors", "index", all(law), True))
    return claims


def _zeros(cfg):
    H = PlanarHamiltonian.construction(cfg.genus, cfg.variant, cfg.delta)
    b = cfg.box
    recs = find_zeros(H, (-b, b, -b, b), tol=cfg.tol("zeros", 1e-10))
    return _zeros_claims(cfg, recs, "zeros"), {"zeros.json": _dump([r.to_dict() for r in recs])}


def _cz(cfg):
    if cfg.path:
        try:
            with open(cfg.path) as fh:
                p = SymplecticPath.from_csv(fh.read())
        except OSError as exc:
            raise InputError(f"cannot read path file: {exc}") from exc
        res = index(p)
        out = {"cz": res.cz, "mean": res.mean, "nondegenerate": res.nondegenerate}
        claims = [below("cz.path.gap", "cz", abs(res.cz - res.mean), 1.0)] if res.nondegenerate else []
        return claims, {"cz.json": _dump(out)}
    H = PlanarHamiltonian.construction(cfg.genus, cfg.variant, cfg.delta)
    rows, claims = [], []
    for j, z in enumerate(checks.saddles(cfg.genus, cfg.variant)):
        path = linearized_path(H, z, 1.0, n=401)
        res = index(path)
        rows.append({"zero": list(z), "cz": res.cz, "mean": res.mean, "nondegenerate": res.nondegenerate})
        claims.append(below(f"cz.g{cfg.genus}.{cfg.variant}.z{j}", "mean", abs(res.mean), cfg.tol("mean", 1e-6)))
    return claims, {"cz.json": _dump(rows)}


def _novikov(cfg):
    w = PeriodVector.parse(cfg.genus, cfg.periods)
    hr = novikov_ranks(w)
    g = cfg.genus
    want = (1, 2 * g, 1) if w.is_zero() else (0, 2 * g - 2, 0)
    claims = [exact(f"novikov.g{g}.ranks", "novikov", list(hr.ranks), list(want)),
              exact(f"novikov.g{g}.euler", "novikov", hr.euler, 2 - 2 * g)]
    return claims, {"novikov.json": hr.to_json() + "\n"}


def _atlas(cfg):
    A = _surface(cfg)
    g = A.genus
    arts = {}
    if cfg.action == "build":
        arts["atlas.json"] = A.dumps() + "\n"
        claims = [exact(f"atlas.g{g}.euler", "atlas", A.euler_characteristic(), 2 - 2 * g)]
        return claims, arts
    v = atl.validate(A, seed=cfg.seed)
    arts["validation.json"] = _dump(v)
    claims = [exact(f"atlas.g{g}.{k}", "atlas", bool(v[k]), True)
              for k in ("perfect_matching", "parity_rule", "pairing_formula", "euler_ok", "ok")]
    for k in ("side_det_error", "square_det_error", "height_det_error"):
        claims.append(below(f"atlas.g{g}.{k}", "atlas", v[k], cfg.tol("det", 1e-10)))
    return claims, arts


def _section_trace(A, name: str, T: float):
    try:
        k = int(name.lstrip("Q"))
        Tk = A.chart(f"T{k}")
    except (ValueError, KeyError) as exc:
        raise InputError(f"unknown section {name!r}") from exc
    # start just before the entry edge of the square, mid-height
    p = Tk.from_square(np.array([-Tk.epsilon / 2 - 1e-3, 0.0]))
    return dyn.integrate(A, (Tk.id, p), T)


def _orbits(cfg):
    A = _surface(cfg)
    rep = dyn.search_periodic(A, cfg.T, cfg.seeds, tol=cfg.tol("periodic", 1e-8))
    table = list(rep.min_return_distance.values())
    claims = [exact(f"orbits.g{A.genus}.found", "periodic", rep.found, []),
              Claim(f"orbits.g{A.genus}.min_return_distance", ANCHORS["periodic"], min(table) if table else None,
                    "> 0", None, bool(table) and min(table) > 0)]
    arts = {"periodic_search.json": _dump(rep.to_json())}
    fv = dyn.flux(A)
    arts["flux.json"] = _dump({"cycles": fv.cycles, "values": fv.values})
    for name in cfg.sections or []:
        arts[f"trace_{name}.csv"] = _section_trace(A, name, min(cfg.T, cfg.tol("trace_time", 2.0))).to_csv()
    return claims, arts


def _flux(cfg):
    A = _surface(cfg)
    fv = dyn.flux(A)
    claims = []
    for k, T in enumerate(A.tori):
        ratio = -fv.values[2 * k] / fv.values[2 * k + 1]
        claims.append(close(f"flux.g{A.genus}.T{k + 1}", "flux", ratio, float(T.slope), cfg.tol("flux", 1e-9)))
        claims.append(exact(f"flux.g{A.genus}.T{k + 1}.irrational", "flux", not T.slope.is_rational(), True))
    return claims, {"flux.json": _dump({"cycles": fv.cycles, "values": fv.values})}


def _blowup(cfg):
    expr = cfg.hamiltonian or "x*(x**2+y**2)"
    F = atl.glue_F(expr)
    thetas = (0.0, 0.9, 2.3, 4.1)
    gap = atl.c1_gap(F, thetas)
    det = checks.blowup_det_error(cfg.tol("delta", 0.1))
    c2 = atl.detects_c2_failure(F)
    claims = [below("blowup.c1_gap", "blowup", gap, cfg.tol("c1", 1e-6)),
              below("blowup.jacobian_det", "blowup", det, cfg.tol("det", 1e-10))]
    return claims, {"blowup.json": _dump({"hamiltonian": expr, "c1_gap": gap, "c2_failure_detected": c2,
                                          "jacobian_det_error": det})}


def _fields(cfg):
    H = PlanarHamiltonian.construction(cfg.genus, cfg.variant, cfg.delta)
    b = cfg.box
    recs = find_zeros(H, (-b, b, -b, b))
    xs = np.linspace(-b, b, cfg.grid)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    P = np.stack([X.ravel(), Y.ravel()], -1)
    val, vec = H.value(P), H.vector(P)
    rows = np.column_stack([P, val, vec]).tolist()
    lines = ["x,y,H,Xx,Xy"] + [",".join(repr(x) for x in row) for row in rows]
    rng = np.random.default_rng(cfg.seed)
    Q = rng.uniform(-b, b, size=(10_000, 2))
    res = float(np.max(np.abs(np.sum(H.gradient(Q) * H.vector(Q), -1))))
    claims = _zeros_claims(cfg, recs, "fields")
    claims.append(below(f"fields.g{cfg.genus}.{cfg.variant}.conservation", "conservation", res,
                        cfg.tol("conservation", 1e-12)))
    return claims, {"zeros.json": _dump([r.to_dict() for r in recs]), "grid.csv": "\n".join(lines) + "\n"}


def _reproduce(cfg):
    return checks.run(cfg.criteria, cfg.seed), {}


HANDLERS = {"indices": _indices, "zeros": _zeros, "cz": _cz, "novikov": _novikov, "atlas": _atlas,
            "orbits": _orbits, "flux": _flux, "blowup": _blowup, "fields": _fields, "reproduce": _reproduce}


def run(cfg: RunConfig) -> Report:
    """Dispatch a validated config and write the report and data files to ``cfg.out``."""
    cfg.validate()
    claims, arts = HANDLERS[cfg.command](cfg)
    rep = Report(sorted(claims, key=lambda c: c.claim_id), environment(cfg), arts)
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        for name, text in arts.items():
            with open(os.path.join(cfg.out, name), "w") as fh:
                fh.write(text)
        with open(os.path.join(cfg.out, "report.json"), "w") as fh:
            fh.write(rep.dumps() + "\n")
    return rep


def reproduce_all(seed: int = 0, out: Optional[str] = None) -> Report:
    return run(RunConfig("reproduce", seed=seed, out=out))


# argument parsing

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lab", description="Symplectic surface flows: build, analyse, report.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--genus", type=int)
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--delta", type=float)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--slopes", help="comma separated slope symbols, one per torus")
    common.add_argument("--tol", action="append", metavar="NAME=VALUE", help="override a tolerance")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("indices", "zeros", "flux"):
        sp_ = sub.add_parser(name, parents=[common])
        if name == "flux":
            sp_.add_argument("--atlas")
        if name == "zeros":
            sp_.add_argument("--box", type=float)
    sp_ = sub.add_parser("cz", parents=[common])
    sp_.add_argument("--path", help="CSV with columns time,m11,m12,m21,m22")
    sp_ = sub.add_parser("novikov", parents=[common])
    sp_.add_argument("--periods", help="comma separated periods, e.g. 'pi,1,0,0'")
    sp_ = sub.add_parser("atlas", parents=[common])
    sp_.add_argument("action", choices=("build", "validate"))
    sp_.add_argument("--atlas", help="atlas JSON to validate")
    sp_ = sub.add_parser("orbits", parents=[common])
    sp_.add_argument("--atlas")
    sp_.add_argument("--T", type=float)
    sp_.add_argument("--seeds", type=int)
    sp_.add_argument("--sections", help="comma separated sections (Q1,Q2,...) to trace")
    sp_ = sub.add_parser("blowup", parents=[common])
    sp_.add_argument("--hamiltonian", help="polynomial in x, y vanishing at the origin")
    sp_ = sub.add_parser("fields", parents=[common])
    sp_.add_argument("--box", type=float)
    sp_.add_argument("--grid", type=int)
    sp_ = sub.add_parser("reproduce", parents=[common])
    sp_.add_argument("--criteria", help="comma separated criterion numbers")
    return ap


def config_from_args(argv) -> RunConfig:
    ns = _parser().parse_args(argv)
    base: dict = {}
    if ns.config:
        try:
            with open(ns.config) as fh:
                base = json.loads(fh.read())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config: {exc}") from exc
        if not isinstance(base, dict):
            raise InputError("config must be a JSON object")
    base["command"] = ns.command
    for key, val in vars(ns).items():
        if key in ("config", "command", "tol") or val is None:
            continue
        if key in ("slopes", "sections"):
            val = [s.strip() for s in val.split(",") if s.strip()]
        elif key == "criteria":
            try:
                val = [int(s) for s in val.split(",") if s.strip()]
            except ValueError as exc:
                raise InputError(f"bad criteria list: {val}") from exc
        base[key] = val
    for item in ns.tol or []:
        name, _, value = item.partition("=")
        try:
            base.setdefault("tolerances", {})[name] = float(value)
        except ValueError as exc:
            raise InputError(f"bad tolerance {item!r}") from exc
    return RunConfig.from_json(base)


def _error(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        cfg = config_from_args(sys.argv[1:] if argv is None else argv)
        rep = run(cfg)
    except InputError as exc:
        return _error("input", exc, EXIT_INPUT)
    except SurflabError as exc:
        return _error("numerical", exc, EXIT_NUMERIC)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        return _error("internal", exc, EXIT_NUMERIC)
    for c in rep.claims:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.claim_id}  computed={checks._plain(c.computed)}")
    print("overall:", "pass" if rep.passed else "fail")
    return EXIT_PASS if rep.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
