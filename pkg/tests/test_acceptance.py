"""Acceptance criteria 1-12, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line. Quantities
are recomputed here through tree and martingale operations rather than
read back from the construction report.
"""

import math
import time

import numpy as np
import pytest
from scipy.linalg import qr

from emm import (
    ExampleSpec,
    GeneratorSpec,
    OneStepProblem,
    apply_density,
    barrier,
    build_example_tree,
    cond_expectation,
    construct_density,
    construct_measure,
    divergence_sweep,
    expectation,
    generate_tree,
    localization_suite,
    martingale_residuals,
    minimize_field,
    minimize_field_net,
    predictable_range,
    stage_barrier_parameter,
    total_variation,
    verify_localization,
)
from emm.martingale import increment_scale

EPSILONS = (0.05, 0.2, 1.0)


def line(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def suite_trees():
    rng = np.random.default_rng(2024)
    out = []
    for i in range(100):
        spec = GeneratorSpec(
            branching=int(rng.integers(2, 5)), horizon=int(rng.integers(1, 6)),
            dimension=int(rng.integers(1, 4)), scale=float(rng.choice([0.5, 1.0, 2.0, 5.0, 20.0])),
            seed=1000 + i,
        )
        tree, S, _ = generate_tree(spec)
        out.append((tree, S))
    return out


@pytest.fixture(scope="module")
def suite():
    trees = suite_trees()
    runs = []
    t0 = time.perf_counter()
    for tree, S in trees:
        for eps in EPSILONS:
            runs.append((tree, S, eps, construct_density(tree, S, eps, check=False)))
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def measure_suite():
    runs = []
    for tree, S in suite_trees():
        for eps in EPSILONS:
            runs.append((tree, S, eps, construct_measure(tree, S, eps, check=False)))
    return runs


def test_criterion_01_density_bound(suite, capsys):
    runs, elapsed = suite
    worst_bound, worst_res, bad, damped = -math.inf, 0.0, 0, 0
    for tree, S, eps, con in runs:
        Z = con.Z
        damped += bool(np.any(np.abs(Z - 1.0) > 1e-9))
        gap = float(np.max(Z)) - (1 + eps)
        worst_bound = max(worst_bound, gap)
        res = 0.0
        for t in range(tree.horizon):
            r = cond_expectation(tree, Z, t) - Z[tree.levels[t]]
            res = max(res, float(np.max(np.abs(r))))
        worst_res = max(worst_res, res)
        if not (np.all(Z > 0) and gap <= 1e-12 and res <= 1e-10):
            bad += 1
    ok = bad == 0 and elapsed < 10.0
    line(capsys, 1, ok, f"{len(runs)} runs ({damped} with |Z-1| > 1e-9), max(Z)-(1+eps)={worst_bound:.2e}, "
                        f"P-residual {worst_res:.1e}, {elapsed:.2f}s, failures {bad}")
    assert ok


def test_criterion_02_martingale_restoration(suite, capsys):
    runs, _ = suite
    worst, worst_1d, bad = 0.0, 0.0, 0
    for tree, S, eps, con in runs:
        Q = apply_density(tree, con.Z)
        rep = martingale_residuals(Q, S)
        scale = increment_scale(tree, S)
        ratio = rep.max_residual / (1 + scale)
        worst = max(worst, ratio)
        ok = ratio <= 1e-9
        if tree.dimension == 1:
            r1 = rep.max_residual / scale if scale else 0.0
            worst_1d = max(worst_1d, r1)
            ok &= r1 <= 1e-13
        bad += not ok
    line(capsys, 2, bad == 0, f"max residual/(1+scale)={worst:.1e}, "
                              f"d=1 residual/scale={worst_1d:.1e}, failures {bad}")
    assert bad == 0


def test_criterion_03_total_variation(measure_suite, capsys):
    worst, agree, bad = 0.0, 0.0, 0
    for tree, S, eps, con in measure_suite:
        tv = total_variation(tree, con.Z[tree.leaves])
        agree = max(agree, abs(tv.l1 - tv.positive_part))
        worst = max(worst, tv.l1 / eps)
        bad += not (abs(tv.l1 - tv.positive_part) <= 1e-10 and max(tv.l1, tv.positive_part) <= eps)
    line(capsys, 3, bad == 0, f"max TV/eps={worst:.1e}, formula gap {agree:.1e}, failures {bad}")
    assert bad == 0


def test_criterion_04_product_expectation(capsys):
    vals, ok = {}, True
    for N in (16, 64, 256):
        ex = build_example_tree(ExampleSpec("two_jump", N))
        v = float(expectation(ex.tree, ex.Z_paper * ex.S[:, 0], 1))
        vals[N] = v
        ok &= abs(v - 0.5) <= 2 / N
    ok &= abs(vals[256] - 0.5) <= 0.008
    line(capsys, 4, ok, "E[Z1 S'1] " + ", ".join(f"N={N}: {v:.6f}" for N, v in vals.items()))
    assert ok


def test_criterion_05_weighted_abs_moment(capsys):
    worst = 0.0
    for N in range(2, 258, 2):
        ex = build_example_tree(ExampleSpec("one_jump", N))
        v = float(expectation(ex.tree, ex.Z_paper * np.abs(ex.S[:, 0]), 2))
        worst = max(worst, abs(v - 2.0))
    ok = worst <= 1e-12
    line(capsys, 5, ok, f"|E[Z2 |S2|] - 2| <= {worst:.1e} over even N in 2..256")
    assert ok


def test_criterion_06_moment_control(capsys):
    t0 = time.perf_counter()
    rows = divergence_sweep("two_jump", [16, 32, 64, 128, 256], 0.5)
    elapsed = time.perf_counter() - t0
    p = [r["log_EP_exp_S2"] for r in rows]
    q = [r["log_EQ_exp_S2"] for r in rows]
    increasing = all(b > a for a, b in zip(p, p[1:]))
    # log-domain form of max_N E_Q <= 2 E_Q(N=16)
    bounded = max(q) <= q[0] + math.log(2.0)
    ok = increasing and bounded and elapsed < 60.0
    line(capsys, 6, ok, f"log E_P {[round(v, 2) for v in p]}, log E_Q {[round(v, 2) for v in q]}, "
                        f"{elapsed:.1f}s")
    assert ok


def test_criterion_07_barrier(capsys):
    a = np.round(np.arange(-10000, 10001) * 0.01, 10)
    h = 1e-4
    worst_fd, bad = 0.0, 0
    params = sorted({0.05, 0.5, 0.95} | {stage_barrier_parameter(e) for e in EPSILONS})
    for ef in params:
        _, f1, f2 = barrier(ef, a)
        fp, _, _ = barrier(ef, a + h)
        fm, _, _ = barrier(ef, a - h)
        fd = np.max(np.abs(f1 - (fp - fm) / (2 * h)))
        worst_fd = max(worst_fd, float(fd))
        bad += not (np.all(f1 > 1 - ef) and np.all(f1 <= 1) and np.all(f2 > 0) and fd <= 1e-6)
    line(capsys, 7, bad == 0, f"{len(a)} grid points x {len(params)} parameters, "
                              f"max |f' - central diff| {worst_fd:.1e}")
    assert bad == 0


def one_step_problem(rng):
    d = int(rng.integers(1, 4))
    m = int(rng.integers(2, 6))
    q = rng.dirichlet(np.ones(m)) + 0.02
    q /= q.sum()
    r = int(rng.integers(1, d + 1))
    w = rng.normal(size=(m, r)) @ rng.normal(size=(r, d)) * rng.uniform(0.2, 3)
    w -= q @ w
    w -= q @ w
    alpha = np.where(rng.random(m) < 0.3, rng.uniform(0.01, 1, m), 1.0)
    return OneStepProblem.make(q, w), alpha, float(rng.uniform(0.05, 0.95))


def test_criterion_08_minimizer_cross_oracle(capsys):
    rng = np.random.default_rng(8)
    worst, bad, boundary = 0.0, 0, 0
    for _ in range(200):
        p, alpha, ef = one_step_problem(rng)
        R = predictable_range(p)
        g = minimize_field(p, R, ef, alpha)
        net = minimize_field_net(p, R, ef, alpha, 8)
        bound = net.lipschitz * 2.0 ** -7 + 1e-10
        gap = abs(net.value - g.value)
        worst = max(worst, gap / bound)
        bad += gap > bound
        boundary += g.on_boundary
    line(capsys, 8, bad == 0, f"200 problems ({boundary} on the sphere), "
                              f"max gap/bound {worst:.3f}")
    assert bad == 0


def independent_span_rank(w):
    _, r, _ = qr(w, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if not diag.size or diag[0] == 0:
        return 0
    return int(np.sum(diag > 1e-10 * diag[0]))


def test_criterion_09_projection(capsys):
    rng = np.random.default_rng(9)
    bad, worst = 0, [0.0, 0.0, 0.0]
    for d in (1, 2, 3, 5):
        for _ in range(1000):
            m = int(rng.integers(1, 8))
            r = int(rng.integers(0, min(d, m) + 1))
            w = rng.normal(size=(m, r)) @ rng.normal(size=(r, d)) if r else np.zeros((m, d))
            w *= 10.0 ** rng.uniform(-3, 3)
            q = np.full(m, 1 / m)
            p = OneStepProblem.make(q, w)
            P = predictable_range(p)
            R = P.matrix
            e1 = float(np.max(np.abs(R @ R - R)))
            e2 = float(np.max(np.abs(R - R.T)))
            e3 = float(np.max(np.linalg.norm(w @ R.T, axis=1)))
            sw = float(np.max(np.linalg.norm(w, axis=1)))
            worst = [max(worst[0], e1), max(worst[1], e2), max(worst[2], e3 / sw if sw else 0.0)]
            ok = e1 <= 1e-10 and e2 <= 1e-12 and e3 <= 1e-10 * sw
            ok &= P.rank == d - independent_span_rank(w)
            bad += not ok
    line(capsys, 9, bad == 0, f"4000 problems, |R^2-R| {worst[0]:.1e}, |R-R^T| {worst[1]:.1e}, "
                              f"|Rw|/|w| {worst[2]:.1e}, failures {bad}")
    assert bad == 0


def stacking_ok(eps, n, et):
    k = n + 1
    ok = k * et <= eps * (1 + 1e-12)
    ok &= k * math.log1p(et) <= math.log1p(eps) + 1e-12
    if eps < 1:
        ok &= k * math.log1p(-et) >= math.log1p(-eps) - 1e-12
    return ok


def test_criterion_10_schedule(suite, measure_suite, capsys):
    runs, _ = suite
    bad, count = 0, 0
    for tree, S, eps, con in runs + measure_suite:
        target = con.eps
        sched = con.schedule
        logs = [math.log1p(s["eps_n"]) for s in sched]
        ok = math.fsum(logs) < math.log1p(target)
        for s in sched:
            ok &= math.log(s["eps_n"]) + math.log(s["M_n"]) < -s["n"] * math.log(2.0) + 1e-12
            ok &= stacking_ok(s["eps_n"], s["n"], s["eps_tilde"])
        # the bound on the product density follows from the schedule
        ok &= math.log(float(np.max(con.Z))) <= math.fsum(logs) + 1e-12
        bad += not ok
        count += 1
    line(capsys, 10, bad == 0, f"{count} reports checked, failures {bad}")
    assert bad == 0


def test_criterion_11_fixed_point(capsys):
    worst, count = 0.0, 0
    rng = np.random.default_rng(11)
    while count < 60:
        spec = GeneratorSpec(int(rng.integers(2, 5)), int(rng.integers(1, 5)),
                             int(rng.integers(1, 4)), 0.02, seed=int(rng.integers(1 << 30)))
        tree, S, _ = generate_tree(spec)
        # |S| < log 2 puts every moment E[exp|S_n| | child] below K = 2^1
        if np.max(np.linalg.norm(S, axis=1)) >= math.log(2.0):
            continue
        for eps in EPSILONS:
            # grid starting at 2^1, and the default grid starting at 2^0
            for kmin in (1, 0):
                con = construct_density(tree, S, eps, check=False, k_min_exp=kmin)
                worst = max(worst, float(np.max(np.abs(con.Z - 1.0))))
        count += 1
    zero = construct_density(tree, np.zeros_like(S), 0.2, check=False)
    worst = max(worst, float(np.max(np.abs(zero.Z - 1.0))))
    ok = worst <= 1e-10
    line(capsys, 11, ok, f"{count} small-moment trees x {len(EPSILONS)} eps, max |Z-1| {worst:.1e}")
    assert ok


def test_criterion_12_localization(capsys):
    ok, info = True, []
    for variant in ("one_jump", "two_jump"):
        spec = ExampleSpec(variant, 64)
        ex = build_example_tree(spec)
        rep = verify_localization(ex.tree, ex.S, localization_suite(spec))
        mass = rep.exhaustion_mass
        mono = all(b <= a for a, b in zip(mass, mass[1:]))
        ok &= rep.passed and mono and mass[-1] == 0.0
        info.append(f"{variant}: mass {[round(m, 4) for m in mass]}")
    line(capsys, 12, ok, "; ".join(info))
    assert ok
