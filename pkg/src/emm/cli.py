"""Command-line entry point: ``emm <command> [options]``.

Exit codes: 0 success, 1 invalid input, 2 construction infeasible,
3 postcondition failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BoundaryMinimizer, EMMError, MaxIterations, NoFeasibleK, PostconditionFailed, TreeError
from .generate import GeneratorSpec, generate_tree
from .jump_example import (
    ExampleSpec,
    analytic_oracles,
    build_example_tree,
    divergence_sweep,
    localization_suite,
)
from .martingale import (
    generalized_martingale_check,
    local_implies_generalized,
    martingale_residuals,
)
from .onestep import K_MAX_EXP, minimize_field, minimize_field_net, predictable_range, stage_barrier_parameter
from .pipeline import construct_density, construct_measure, leaf_table
from .tree import StoppingTime, dumps_process, dumps_tree, loads_tree

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_POSTCONDITION = 0, 1, 2, 3

log = logging.getLogger("emm")


@dataclass
class RunConfig:
    command: str
    input: str | None = None
    epsilon: float = 0.5
    tol_martingale: float = 1e-10
    tol_z: float = 1e-10
    k_max_exp: int = K_MAX_EXP
    minimizer: str = "gradient"
    net_depth: int = 8
    seed: int = 0
    grid: int = 64
    p_max: int = 6
    output: str | None = None
    format: str = "json"

    def validate(self) -> "RunConfig":
        if not self.epsilon > 0:
            raise ValueError("--epsilon must be positive")
        if not (self.tol_martingale > 0 and self.tol_z > 0):
            raise ValueError("tolerances must be positive")
        if not 0 <= self.k_max_exp <= 1023:
            raise ValueError("--k-max-exp must lie in [0, 1023]")
        return self


def _config(ns) -> RunConfig:
    fields = RunConfig.__dataclass_fields__
    kw = {k: v for k, v in vars(ns).items() if k in fields and v is not None}
    return RunConfig(**kw).validate()


def _read(path):
    if path in (None, "-"):
        return sys.stdin.read()
    return Path(path).read_text()


def _emit(text, path=None, suffix=""):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    target = Path(str(path) + suffix)
    target.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _summary(report: dict) -> str:
    """One-screen digest derived from the JSON report."""
    lines = []
    if "epsilon" in report:
        lines.append(f"epsilon        {report['epsilon']}")
    for key in ("sup_Z", "inf_Z"):
        if key in report:
            lines.append(f"{key:<14} {report[key]:.12g}")
    if "tv" in report:
        lines.append(f"tv (l1, 2pos)  {report['tv']['l1']:.6g} {report['tv']['positive_part']:.6g}")
    for name, ok in report.get("postconditions", {}).items():
        if isinstance(ok, bool):
            lines.append(f"[{'ok' if ok else 'FAIL'}] {name}")
    ma = report.get("martingale_analysis")
    if ma:
        lines.append(f"martingale     {ma['martingale']['is_martingale']}  max drift {ma['martingale']['max_residual']:.3e}")
    return "\n".join(lines) + "\n"


# -- commands -----------------------------------------------------------------

def cmd_validate(ns) -> int:
    try:
        tree, S = loads_tree(_read(ns.input))
    except TreeError as exc:
        _emit(_dump({"valid": False, "error": type(exc).__name__, "node": exc.node,
                     "message": str(exc)}))
        return EXIT_INVALID
    except (ValueError, KeyError) as exc:
        _emit(_dump({"valid": False, "error": type(exc).__name__, "node": None,
                     "message": str(exc)}))
        return EXIT_INVALID
    _emit(_dump({"valid": True, "nodes": len(tree), "horizon": tree.horizon,
                 "dimension": tree.dimension, "has_process": S is not None}))
    return EXIT_OK


def cmd_generate(ns) -> int:
    spec = GeneratorSpec(ns.branching, ns.horizon, ns.dimension, ns.scale, ns.tail, ns.seed)
    tree, S, meta = generate_tree(spec)
    _emit(dumps_tree(tree, S, {"metadata": meta}), ns.output)
    return EXIT_OK


def _load_with_process(ns):
    text = _read(ns.input)
    raw = json.loads(text)
    tree, S = loads_tree(raw)
    if S is None:
        raise TreeError("input carries no process values ('s')")
    return raw, tree, S


def cmd_analyze(ns) -> int:
    cfg = _config(ns)
    try:
        raw, tree, S = _load_with_process(ns)
    except (TreeError, ValueError, KeyError) as exc:
        _emit(_dump({"error": type(exc).__name__, "message": str(exc)}))
        return EXIT_INVALID
    mart = martingale_residuals(tree, S, cfg.tol_martingale)
    gen = generalized_martingale_check(tree, S, cfg.tol_martingale)
    section = {"martingale": mart.to_dict(), "generalized": gen.to_dict()}
    marks = (raw.get("metadata") or {}).get("localization")
    if marks:
        taus = [StoppingTime(frozenset(m)) for m in marks]
        try:
            section["proposition1"] = local_implies_generalized(
                tree, S, taus, cfg.tol_martingale).to_dict()
        except EMMError as exc:
            section["proposition1"] = {"holds": False, "error": str(exc)}
    report = {"martingale_analysis": section}
    _emit(_dump(report), cfg.output)
    if cfg.output:
        sys.stdout.write(_summary(report))
    return EXIT_OK


def _oracle_check(con, cfg) -> dict:
    """Gradient vs net minimum values on the recorded higher-dimensional atoms."""
    worst, count = 0.0, 0
    for st in con.stages:
        eps_f = stage_barrier_parameter(st.eps_tilde)
        for problem, res in st.problems:
            if problem.dimension < 2 or problem.dimension > 3:
                continue
            alpha = np.exp(res.log_alpha)
            R = predictable_range(problem)
            g = minimize_field(problem, R, eps_f, alpha)
            net = minimize_field_net(problem, R, eps_f, alpha, cfg.net_depth)
            bound = net.lipschitz * 2.0 ** (1 - cfg.net_depth) + 1e-10
            worst = max(worst, abs(net.value - g.value) / bound)
            count += 1
    return {"atoms_checked": count, "worst_gap_over_bound": worst, "ok": worst <= 1.0}


def cmd_construct(ns) -> int:
    cfg = _config(ns)
    try:
        _, tree, S = _load_with_process(ns)
    except (TreeError, ValueError, KeyError) as exc:
        _emit(_dump({"error": type(exc).__name__, "message": str(exc)}))
        return EXIT_INVALID
    run = construct_measure if ns.measure else construct_density
    want_oracle = cfg.minimizer in ("net", "both")
    try:
        con = run(tree, S, cfg.epsilon, tol_mart=cfg.tol_martingale, tol_z=cfg.tol_z,
                  k_max_exp=cfg.k_max_exp, p_max=cfg.p_max, check=False,
                  keep_problems=want_oracle)
    except (NoFeasibleK, BoundaryMinimizer, MaxIterations) as exc:
        _emit(_dump({"error": type(exc).__name__, "atom": exc.atom, "message": str(exc)}))
        return EXIT_INFEASIBLE
    except PostconditionFailed as exc:
        _emit(_dump({"error": type(exc).__name__, "message": str(exc)}))
        return EXIT_POSTCONDITION
    except EMMError as exc:
        _emit(_dump({"error": type(exc).__name__, "message": str(exc)}))
        return EXIT_INVALID
    report = con.report
    if want_oracle:
        report["minimizer_oracle"] = _oracle_check(con, cfg)
        report["postconditions"]["minimizer_oracle"] = report["minimizer_oracle"]["ok"]
    ok = all(v for v in report["postconditions"].values() if isinstance(v, bool))
    if cfg.output:
        _emit(dumps_process(tree, con.Z, key="density"), cfg.output, ".density.json")
        _emit(_dump(report), cfg.output, ".report.json")
        if cfg.format == "csv":
            _emit(_leaf_csv(con), cfg.output, ".leaves.csv")
        sys.stdout.write(_summary(report))
    elif cfg.format == "csv":
        _emit(_leaf_csv(con))
    else:
        _emit(_dump({"density": dict(zip(tree.ids, con.Z.tolist())), "report": report}))
    return EXIT_OK if ok else EXIT_POSTCONDITION


def _leaf_csv(con) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["leaf", "P", "Q", "Z"])
    for row in leaf_table(con):
        w.writerow([row[0]] + [repr(v) for v in row[1:]])
    return buf.getvalue()


def _table_csv(rows) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _flatten_oracles(table) -> list:
    rows = []
    for key, val in table.items():
        if isinstance(val, dict):
            rows.append({"quantity": key, **{k: val.get(k) for k in ("value", "limit")}})
    return rows


def cmd_example(ns) -> int:
    cfg = _config(ns)
    spec = ExampleSpec(ns.variant, cfg.grid, min(cfg.epsilon, 1.0))
    try:
        ex = build_example_tree(spec)
    except EMMError as exc:
        _emit(_dump({"error": type(exc).__name__, "message": str(exc)}))
        return EXIT_INVALID
    marks = [sorted(t.marked) for t in localization_suite(spec)]
    tree_text = dumps_tree(ex.tree, ex.S, {"metadata": {
        "example": {"variant": spec.variant, "grid": spec.grid, "eps_hat": spec.eps_hat},
        "localization": marks,
    }})
    oracles = analytic_oracles(spec)
    if cfg.format == "csv":
        table = _table_csv(_flatten_oracles(oracles))
    else:
        table = _dump(oracles)
    if cfg.output:
        _emit(tree_text, cfg.output, ".tree.json")
        _emit(table, cfg.output, ".oracles." + cfg.format)
    else:
        _emit(tree_text)
        _emit(table)
    return EXIT_OK


def cmd_sweep(ns) -> int:
    cfg = _config(ns)
    grids = [int(g) for g in ns.grids.split(",")]
    try:
        rows = divergence_sweep(ns.variant, grids, cfg.epsilon, via_measure=ns.measure,
                                check=False, k_max_exp=cfg.k_max_exp, tol_z=cfg.tol_z)
    except (NoFeasibleK, BoundaryMinimizer, MaxIterations) as exc:
        _emit(_dump({"error": type(exc).__name__, "atom": exc.atom, "message": str(exc)}))
        return EXIT_INFEASIBLE
    except EMMError as exc:
        _emit(_dump({"error": type(exc).__name__, "message": str(exc)}))
        return EXIT_INVALID
    text = _table_csv(rows) if cfg.format == "csv" else _dump({"rows": rows})
    _emit(text, cfg.output)
    return EXIT_OK if all(r["ok"] for r in rows) else EXIT_POSTCONDITION


# -- parser -------------------------------------------------------------------

def _common(p, *, construction=False):
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tol-martingale", dest="tol_martingale", type=float)
    p.add_argument("--output", "-o")
    p.add_argument("--format", choices=("json", "csv"))
    if construction:
        p.add_argument("--tol-z", dest="tol_z", type=float)
        p.add_argument("--k-max-exp", dest="k_max_exp", type=int)
        p.add_argument("--minimizer", choices=("gradient", "net", "both"))
        p.add_argument("--net-depth", dest="net_depth", type=int)
        p.add_argument("--p-max", dest="p_max", type=int)
        p.add_argument("--measure", action="store_true",
                       help="bound total variation by epsilon instead of the density by 1+epsilon")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a tree file")
    p.add_argument("input")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("generate", help="random martingale tree")
    p.add_argument("--branching", type=int, default=3)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--dimension", type=int, default=1)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--tail", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="martingale diagnostics")
    p.add_argument("input")
    _common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("construct", help="build the density and report")
    p.add_argument("input")
    _common(p, construction=True)
    p.set_defaults(func=cmd_construct)

    p = sub.add_parser("example", help="emit the discretized jump example")
    p.add_argument("--variant", choices=("one_jump", "two_jump"), default="two_jump")
    p.add_argument("--grid", type=int)
    _common(p)
    p.set_defaults(func=cmd_example)

    p = sub.add_parser("sweep", help="moments across grid sizes")
    p.add_argument("--variant", choices=("one_jump", "two_jump"), default="two_jump")
    p.add_argument("--grids", default="16,32,64,128,256")
    _common(p, construction=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING)
    try:
        return ns.func(ns)
    except ValueError as exc:
        sys.stderr.write(f"emm: {exc}\n")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
