"""From one-step densities to an equivalent martingale measure.

``stage_density`` runs the backward induction over one stage: for
``t = n, ..., 1`` every time-``t-1`` atom receives a one-step density whose
moment target is the conditional expectation of ``Y`` times the factors
already built further down the tree.

``construct_density`` runs the stages ``n = 0, ..., T`` on successively
reweighted measures with ``Y = exp|S_n|`` and a geometric tolerance
schedule, and returns the product density together with a report whose
every postcondition is re-derived through the filtration and martingale
operations.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EMMError,
    NonPositiveEpsilon,
    NotLocalMartingaleInput,
    PostconditionFailed,
    ProbBoundViolated,
)
from .martingale import TOL_MART, exponential_moment, increment_scale, martingale_residuals
from .onestep import (
    K_MAX_EXP,
    K_MIN_EXP,
    LN2,
    TOL_Z,
    OneStepProblem,
    barrier,
    one_step_density,
    predictable_range,
    stage_barrier_parameter,
)
from .tree import (
    ScenarioTree,
    apply_density,
    check_density,
    cond_expectation,
    total_variation,
)

log = logging.getLogger(__name__)

BOUND_SLACK = 1e-12
P_MAX = 6


def stage_tolerance(eps: float, n: int) -> float:
    """Largest per-step tolerance compatible with ``n + 1`` stacked steps.

    ``min(eps/(n+1), (1+eps)^{1/(n+1)} - 1, 1 - (1-eps)^{1/(n+1)})``; the
    last term is dropped when ``eps >= 1`` (the constraint is void).
    """
    if not eps > 0:
        raise NonPositiveEpsilon(f"epsilon must be positive, got {eps}")
    if n < 0:
        raise ValueError("n must be >= 0")
    k = n + 1
    terms = [eps / k, math.expm1(math.log1p(eps) / k)]
    if eps < 1.0:
        terms.append(-math.expm1(math.log1p(-eps) / k))
    return min(terms)


def stage_tolerance_holds(eps: float, n: int, eps_tilde: float, slack: float = 1e-15) -> bool:
    """Re-check the three stacking inequalities for ``eps_tilde``."""
    k = n + 1
    ok = k * eps_tilde <= eps * (1 + slack)
    ok &= k * math.log1p(eps_tilde) <= math.log1p(eps) + slack
    if eps < 1.0:
        ok &= k * math.log1p(-eps_tilde) >= math.log1p(-eps) - slack
    return bool(ok)


def likelihood_ratio_bound(Q: ScenarioTree, P: ScenarioTree) -> float:
    """``max_leaf dP/dQ``."""
    lv = P.leaves
    return float(np.max(P.abs_prob[lv] / Q.abs_prob[lv]))


def schedule_step(eps: float, history, Q: ScenarioTree, P: ScenarioTree) -> tuple:
    """Next stage tolerance ``eps_n`` and the ratio bound ``M_n`` it was sized for.

    ``eps_n = min(exp(2^-(n+1) * headroom) - 1, 2^-(n+1) / M_n)`` where
    ``headroom = log(1+eps) - sum_{m<n} log(1+eps_m)``.
    """
    n = len(history)
    M = likelihood_ratio_bound(Q, P)
    headroom = math.log1p(eps) - math.fsum(math.log1p(e) for e in history)
    budget = math.expm1(2.0 ** -(n + 1) * headroom)
    return min(budget, 2.0 ** -(n + 1) / M), M


def _grouped_logsumexp(values, groups, n_groups):
    top = np.full(n_groups, -np.inf)
    np.maximum.at(top, groups, values)
    safe = np.where(np.isfinite(top), top, 0.0)
    acc = np.zeros(n_groups)
    np.add.at(acc, groups, np.exp(values - safe[groups]))
    with np.errstate(divide="ignore"):
        return safe + np.log(acc)


def log_backward(tree: ScenarioTree, log_leaf, stop: int, log_factor=None) -> np.ndarray:
    """Node array of ``log E[X prod factor | F_t]`` for ``t >= stop``.

    ``log_leaf`` holds ``log X`` on the leaves; ``log_factor`` (node
    indexed) multiplies in per-node factors below time ``stop``.
    """
    out = np.full(len(tree), np.nan)
    out[tree.leaves] = log_leaf
    lp = np.log(tree.prob)
    for t in range(tree.horizon - 1, stop - 1, -1):
        idx = tree.levels[t + 1]
        v = lp[idx] + out[idx]
        if log_factor is not None:
            v = v + log_factor[idx]
        agg = _grouped_logsumexp(v, tree.parent[idx], len(tree))
        out[tree.levels[t]] = agg[tree.levels[t]]
    return out


def path_product(tree: ScenarioTree, factors) -> np.ndarray:
    """Node array of products of ``factors`` along the root path."""
    out = np.empty(len(tree))
    out[0] = factors[0]
    for t in range(1, tree.horizon + 1):
        idx = tree.levels[t]
        out[idx] = out[tree.parent[idx]] * factors[idx]
    return out


def _undamped_level(Q, S, atoms, logG, eps, solver):
    """Vectorized one-step densities for atoms whose only candidate is undamped.

    An atom qualifies when every damping pattern on the grid carries
    conditional mass ``>= eps``, so the smallest feasible ``k`` (if any)
    leaves ``alpha = 1``. The result then reduces to a closed form: the
    ratio weights in d = 1, and ``V = f'(0)`` in d > 1 provided the
    gradient at the origin is already below tolerance. Atoms that do not
    qualify, or whose checks fail, are left to :func:`one_step_density`.

    Returns ``(done, kids, z, summaries)``: ``done`` masks ``atoms``,
    ``kids`` and ``z`` are the settled children and their weights, and
    ``summaries`` is keyed by atom position.
    """
    kmin, kmax = solver["k_min_exp"], solver["k_max_exp"]
    idx = np.concatenate([Q.children[g] for g in atoms])
    gid = np.repeat(np.arange(len(atoms)), [len(Q.children[g]) for g in atoms])
    na = len(atoms)
    par = Q.parent[idx]
    raw = Q.prob[idx]
    q = raw / np.bincount(gid, raw, na)[gid]
    w = S[idx] - S[par]
    norms = np.linalg.norm(w, axis=1)
    scale = np.zeros(na)
    np.maximum.at(scale, gid, norms)
    ly = logG[idx]
    cuts = np.full(len(idx), -np.inf)
    fin = np.isfinite(ly)
    cuts[fin] = np.ceil(ly[fin] / LN2)
    top = np.full(na, -np.inf)
    np.maximum.at(top, gid, cuts)
    at_top = (cuts == top[gid]) & (top[gid] > kmin)
    m1 = np.bincount(gid, np.where(at_top, q, 0.0), na)
    # lower candidates damp a superset of the top children
    ok = (top <= kmin) | ((top <= kmax) & (m1 >= eps * (1.0 + 1e-12)))
    e_top = np.maximum(top, kmin)
    eps_f = stage_barrier_parameter(eps)
    d = S.shape[1]
    if d == 1:
        W = w[:, 0]
        num = np.bincount(gid, q * np.maximum(W, 0.0), na)
        den = np.bincount(gid, q * np.maximum(-W, 0.0), na)
        both = (num == 0) & (den == 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_c = np.where(both, 0.0, np.log(num) - np.log(den))
        floor = math.log1p(-eps_f)
        ok &= (log_c >= floor) & (log_c <= -floor)
        lc = np.where(ok, log_c, 0.0)[gid]
        V = np.where(W >= 0, np.exp(np.minimum(0.0, -lc)), np.exp(np.minimum(0.0, lc)))
        V = np.maximum(1.0 - eps_f, V)
        method = "ratio"
    else:
        tol_grad = solver["tol_grad"]
        tg = 1e-11 * (1.0 + scale) if tol_grad is None else np.full(na, tol_grad)
        _, f1, _ = barrier(eps_f, 0.0)
        drift = np.zeros((na, d))
        np.add.at(drift, gid, q[:, None] * w)
        ok &= float(f1) * np.linalg.norm(drift, axis=1) <= tg
        V = np.full(len(idx), float(f1))
        method = "barrier"
    s = np.bincount(gid, q * V, na)
    ok &= np.log(s) > -math.log1p(eps)
    z = V / s[gid]
    z = z / np.bincount(gid, q * z, na)[gid]
    res = np.zeros((na, d))
    np.add.at(res, gid, (q * z)[:, None] * w)
    residual = np.linalg.norm(res, axis=1)
    if d > 1:
        ok &= residual <= solver["tol_z"] * (1.0 + scale)
    zmin = np.full(na, np.inf)
    zmax = np.full(na, -np.inf)
    np.minimum.at(zmin, gid, z)
    np.maximum.at(zmax, gid, z)
    summaries = {}
    for j in np.flatnonzero(ok).tolist():
        summaries[int(atoms[j])] = {
            "k_exp": int(e_top[j]), "method": method, "damped_children": 0,
            "damped_mass": 0.0, "residual": float(residual[j]),
            "z_min": float(zmin[j]), "z_max": float(zmax[j]),
        }
    keep = ok[gid]
    return ok, idx[keep], z[keep], summaries


@dataclass
class StageResult:
    n: int
    eps: float
    eps_tilde: float
    Z: np.ndarray
    z: np.ndarray
    log_target: float          # log E_{Q'}[Y]
    atoms: dict
    checks: dict = field(default_factory=dict)
    problems: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "eps": self.eps,
            "eps_tilde": self.eps_tilde,
            "sup_Z": float(np.max(self.Z)),
            "inf_Z": float(np.min(self.Z)),
            "log_target": self.log_target,
            "checks": self.checks,
        }


def _options(opts):
    return {
        "k_min_exp": opts.get("k_min_exp", K_MIN_EXP),
        "k_max_exp": opts.get("k_max_exp", K_MAX_EXP),
        "tol_z": opts.get("tol_z", TOL_Z),
        "tol_grad": opts.get("tol_grad"),
    }


def stage_density(Q: ScenarioTree, S, eps: float, n: int, log_Y, *,
                  tol_mart: float = TOL_MART, check: bool = True,
                  keep_problems: bool = False, **opts) -> StageResult:
    """Density ``Z^(n)`` on ``Q`` that keeps ``S`` a martingale and makes ``E[Y]`` finite.

    Parameters
    ----------
    Q : ScenarioTree
        Current measure.
    S : (n_nodes, d) array
        Process with zero conditional drift under ``Q``.
    eps : float
        Stage tolerance; each one-step density gets ``stage_tolerance(eps, n)``.
    n : int
        Last time touched; factors beyond ``n`` are one.
    log_Y : array
        ``log Y`` on the leaves (leaf aligned or node indexed).
    opts
        ``k_min_exp``, ``k_max_exp``, ``tol_z``, ``tol_grad`` for the one-step solver;
        ``ranges`` is an optional dict (atom position -> projection) reused across stages;
        ``batch=False`` sends every atom through the per-atom solver.
    keep_problems : bool
        Store every ``(problem, one-step density)`` pair on the result.

    Raises
    ------
    NoFeasibleK, BoundaryMinimizer
        From the one-step solver, tagged with the atom id.
    ProbBoundViolated, PostconditionFailed
        When ``check`` is set and a verified property fails.
    """
    S = np.asarray(S, dtype=float).reshape(len(Q), -1)
    n = min(n, Q.horizon)
    log_Y = np.asarray(log_Y, dtype=float)
    if log_Y.shape == (len(Q),):
        log_Y = log_Y[Q.leaves]
    et = stage_tolerance(eps, n)
    solver = _options(opts)
    ranges = opts.get("ranges")
    logG = log_backward(Q, log_Y, n)
    z = np.ones(len(Q))
    atoms, kept = {}, []
    batch = opts.get("batch", True) and not keep_problems
    for t in range(n, 0, -1):
        level = Q.levels[t - 1]
        pending = level
        if batch and len(level):
            done, kids, zb, summ = _undamped_level(Q, S, level, logG, et, solver)
            z[kids] = zb
            atoms.update(summ)
            pending = level[~done]
        for g in pending:
            kids = Q.children[g]
            prob = Q.prob[kids]
            prob = prob / math.fsum(prob)
            problem = OneStepProblem(
                Q.ids[g], prob, S[kids] - S[g], logG[kids],
                tuple(Q.ids[k] for k in kids),
            )
            R = None
            if problem.dimension > 1 and ranges is not None:
                R = ranges.get(g)
                if R is None:
                    R = ranges[g] = predictable_range(problem)
            res = one_step_density(problem, et, R=R, **solver)
            z[kids] = res.z
            atoms[int(g)] = res.summary()
            if keep_problems:
                kept.append((problem, res))
        idx = Q.levels[t]
        v = np.log(Q.prob[idx]) + np.log(z[idx]) + logG[idx]
        agg = _grouped_logsumexp(v, Q.parent[idx], len(Q))
        logG[Q.levels[t - 1]] = agg[Q.levels[t - 1]]
    Z = path_product(Q, z)
    atoms = {Q.ids[g]: atoms[g] for g in sorted(atoms)}
    result = StageResult(n, eps, et, Z, z, float(logG[0]), atoms, problems=kept)
    if check:
        result.checks = verify_stage(Q, S, result, log_Y, tol_mart)
        failed = [k for k, v in result.checks.items() if v is False]
        if "prob_bound" in failed:
            raise ProbBoundViolated(f"stage {n}: Q[Z < 1 - eps] >= eps")
        if failed:
            raise PostconditionFailed(f"stage {n}: failed {failed}")
    return result


def verify_stage(Q, S, result: StageResult, log_Y, tol_mart=TOL_MART) -> dict:
    """Independent re-check of a stage density through tree operations."""
    eps, Z = result.eps, result.Z
    lv = Q.leaves
    out = {}
    out["positive"] = bool(np.all(Z > 0))
    out["upper_bound"] = bool(np.max(Z) <= 1.0 + eps + BOUND_SLACK)
    low_mass = math.fsum(Q.abs_prob[lv][Z[lv] < 1.0 - eps])
    out["low_mass"] = low_mass
    out["prob_bound"] = bool(low_mass < eps)
    try:
        Q2 = apply_density(Q, Z)
    except EMMError:
        out["density"] = False
        return out
    out["density"] = True
    rep = martingale_residuals(Q2, S, tol_mart)
    out["max_residual"] = rep.max_residual
    out["martingale"] = rep.is_martingale
    lt = float(np.log(np.sum(Q2.abs_prob[lv] * np.exp(log_Y - np.max(log_Y)))) + np.max(log_Y))
    out["log_target"] = lt
    out["target_finite"] = bool(math.isfinite(lt))
    return out


@dataclass
class Construction:
    """Outcome of :func:`construct_density`."""

    P: ScenarioTree
    Q: ScenarioTree
    S: np.ndarray
    Z: np.ndarray
    eps: float
    stages: list
    schedule: list
    report: dict

    @property
    def ok(self) -> bool:
        return all(v for v in self.report["postconditions"].values() if isinstance(v, bool))


def _abs_at_leaves(tree, S, n):
    anc = tree.ancestor_at(n)[tree.leaves]
    return np.linalg.norm(S[anc], axis=1)


def construct_density(tree: ScenarioTree, S, eps: float, *, tol_mart: float = TOL_MART,
                      p_max: int = P_MAX, check: bool = True, keep_problems: bool = False,
                      **opts) -> Construction:
    """Density ``Z`` with ``0 < Z <= 1 + eps`` under which ``S`` is a martingale with exponential moments.

    Stage ``n`` reweights the current measure by ``stage_density`` with
    ``Y = exp|S_n|`` (Euclidean norm) and tolerance ``eps_n`` from
    :func:`schedule_step`. The horizon is finite, so the product of the
    stage densities is the terminal density exactly.

    Raises
    ------
    NotLocalMartingaleInput
        When ``S`` drifts under the input measure.
    PostconditionFailed
        When ``check`` is set and any verified property fails.
    """
    if not eps > 0:
        raise NonPositiveEpsilon(f"epsilon must be positive, got {eps}")
    started = time.perf_counter()
    S = np.asarray(S, dtype=float).reshape(len(tree), -1)
    before = martingale_residuals(tree, S, tol_mart)
    if not before.is_martingale:
        raise NotLocalMartingaleInput(
            f"S drifts by {before.max_residual:.3e} at {before.worst_atom}"
        )
    P = Q = tree
    history, schedule, stages = [], [], []
    Z = np.ones(len(tree))
    # increments do not change across stages, so neither does R
    opts.setdefault("ranges", {})
    for n in range(tree.horizon + 1):
        e_n, M = schedule_step(eps, history, Q, P)
        log_Y = _abs_at_leaves(tree, S, n)
        st = stage_density(Q, S, e_n, n, log_Y, tol_mart=tol_mart, check=check,
                           keep_problems=keep_problems, **opts)
        Q = apply_density(Q, st.Z)
        Z = Z * st.Z
        history.append(e_n)
        stages.append(st)
        schedule.append({
            "n": n, "eps_n": e_n, "eps_tilde": st.eps_tilde, "M_n": M,
            "sup_stage": float(np.max(st.Z)), "inf_stage": float(np.min(st.Z)),
        })
        log.debug("stage %d: eps_n=%.3g sup=%.6f", n, e_n, schedule[-1]["sup_stage"])
    elapsed = time.perf_counter() - started
    report = construction_report(tree, Q, S, Z, eps, stages, schedule, tol_mart, p_max)
    report["runtime_s"] = elapsed
    report["residuals"]["before"] = {
        "max": before.max_residual, "is_martingale": before.is_martingale,
    }
    out = Construction(tree, Q, S, Z, eps, stages, schedule, report)
    if check and not out.ok:
        failed = [k for k, v in report["postconditions"].items() if v is False]
        raise PostconditionFailed(f"construction failed {failed}")
    return out


def construction_report(P, Q, S, Z, eps, stages, schedule, tol_mart=TOL_MART, p_max=P_MAX) -> dict:
    """Every advertised property of a construction, recomputed from ``P``, ``S`` and ``Z``."""
    S = np.asarray(S, dtype=float).reshape(len(P), -1)
    post = {}
    post["positive"] = bool(np.all(Z > 0))
    post["upper_bound"] = bool(np.max(Z) <= 1.0 + eps + BOUND_SLACK)
    try:
        check_density(P, Z)
        post["p_martingale_density"] = True
    except EMMError:
        post["p_martingale_density"] = False
    Qz = apply_density(P, Z) if post["p_martingale_density"] else Q
    after = martingale_residuals(Qz, S, tol_mart)
    post["q_martingale"] = after.is_martingale

    # E_P[S_t Z_t | F_{t-1}] = S_{t-1} Z_{t-1}
    scale = increment_scale(P, S)
    ZS = S * Z[:, None]
    gap = 0.0
    for t in range(P.horizon):
        r = cond_expectation(P, ZS, t) - ZS[P.levels[t]]
        if r.size:
            gap = max(gap, float(np.max(np.abs(r))))
    post["product_martingale"] = gap <= tol_mart * (1.0 + scale) * (1.0 + eps)

    lv = P.leaves
    composed = P.abs_prob[lv] * Z[lv]
    comp_gap = float(np.max(np.abs(Qz.abs_prob[lv] - composed)))
    stage_gap = float(np.max(np.abs(Q.abs_prob[lv] - composed)))
    post["composition"] = max(comp_gap, stage_gap) <= 1e-12

    log_sched = math.fsum(math.log1p(s["eps_n"]) for s in schedule)
    post["schedule_product"] = log_sched < math.log1p(eps)
    post["sup_below_product"] = math.log(float(np.max(Z))) <= log_sched + 1e-12
    post["schedule_mass"] = all(
        math.log(s["eps_n"]) + math.log(s["M_n"]) < -s["n"] * math.log(2.0) + 1e-12
        for s in schedule
    )
    post["stage_tolerances"] = all(
        stage_tolerance_holds(s["eps_n"], s["n"], s["eps_tilde"]) for s in schedule
    )

    lem_q = [exponential_moment(Qz, S, t) for t in range(P.horizon + 1)]
    lem_p = [exponential_moment(P, S, t) for t in range(P.horizon + 1)]
    post["exp_moments_finite"] = all(math.isfinite(v) for v in lem_q)
    norms = np.linalg.norm(S, axis=1)
    moments = {}
    for t, idx in enumerate(P.levels):
        moments[str(t)] = {
            str(p): math.fsum(Qz.abs_prob[idx] * norms[idx] ** p) for p in range(1, p_max + 1)
        }

    tv = total_variation(P, Z[lv])
    post["tv_agree"] = abs(tv.l1 - tv.positive_part) <= 1e-10

    series = np.zeros(len(lv))
    for st in stages:
        series += np.abs(1.0 - st.Z[lv])
    atoms = {str(st.n): st.atoms for st in stages}
    return {
        "epsilon": eps,
        "schedule": schedule,
        "log_schedule_product": log_sched,
        "sup_Z": float(np.max(Z)),
        "inf_Z": float(np.min(Z)),
        "tv": {"l1": tv.l1, "positive_part": tv.positive_part},
        "residuals": {
            "after": {"max": after.max_residual, "is_martingale": after.is_martingale,
                      "scale": after.scale},
            "product_gap": gap,
            "composition_gap": max(comp_gap, stage_gap),
        },
        "moments": {
            "abs_q": moments,
            "log_exp_q": lem_q,
            "log_exp_p": lem_p,
        },
        "borel_cantelli": {"max": float(np.max(series)), "mean": float(np.mean(series))},
        "atoms": atoms,
        "stages": [st.to_dict() for st in stages],
        "postconditions": post,
    }


def construct_measure(tree: ScenarioTree, S, eps: float, **kwargs) -> Construction:
    """Equivalent measure within total variation ``eps`` making ``S`` a martingale.

    Runs :func:`construct_density` with ``eps/2``; the density bound
    ``1 + eps/2`` caps ``E_P|Z - 1| = 2 E_P[(Z - 1)^+]`` at ``eps``.
    """
    if not eps > 0:
        raise NonPositiveEpsilon(f"epsilon must be positive, got {eps}")
    out = construct_density(tree, S, eps / 2.0, **kwargs)
    tv = out.report["tv"]
    post = out.report["postconditions"]
    post["tv_bound"] = bool(max(tv["l1"], tv["positive_part"]) <= eps)
    out.report["tv_target"] = eps
    if kwargs.get("check", True) and not post["tv_bound"]:
        raise PostconditionFailed(f"total variation {tv['l1']:.3g} exceeds {eps}")
    return out


def leaf_table(con: Construction) -> list:
    """Rows ``(leaf_id, P, Q, Z)`` for CSV export."""
    lv = con.P.leaves
    return [
        (con.P.ids[i], float(con.P.abs_prob[i]), float(con.Q.abs_prob[i]), float(con.Z[i]))
        for i in lv
    ]
