"""Discretized jump example: ``S_t = (theta / U) 1{t >= 2}``.

``U`` is uniform on ``[0, 1]``, replaced by the ``N`` midpoints
``(i - 1/2)/N``; ``theta = ±1`` is a fair coin revealed at time 2. The
two-jump variant adds ``sign(U - 1/2) 1{t >= 1}``. Both processes are
local martingales whose first absolute moment at time 2 diverges as
``N -> infinity``.

Densities that come with the example:

* ``Z_t = 1{t = 0} + 2U 1{t >= 1}`` makes ``Z S`` a martingale but not
  ``Z S'`` (``E[Z_1 S'_1] = 1/2``);
* ``Zhat_t = 1{t = 0} + (U ∧ eps)/(eps - eps^2/2) 1{t >= 1}`` is the same
  idea capped near ``1 + eps``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidGrid
from .martingale import exponential_moment
from .pipeline import construct_density, construct_measure
from .tree import ScenarioTree, StoppingTime, expectation, validate_tree

VARIANTS = ("one_jump", "two_jump")


@dataclass(frozen=True)
class ExampleSpec:
    variant: str = "two_jump"
    grid: int = 64
    eps_hat: float = 0.5

    def validate(self) -> "ExampleSpec":
        if self.variant not in VARIANTS:
            raise InvalidGrid(f"unknown variant {self.variant!r}")
        if self.grid < 2 or self.grid % 2:
            raise InvalidGrid(f"grid size must be even and >= 2, got {self.grid}")
        if not 0 < self.eps_hat <= 1:
            raise InvalidGrid(f"eps_hat must lie in (0, 1], got {self.eps_hat}")
        return self

    @property
    def u(self) -> np.ndarray:
        N = self.grid
        return (np.arange(1, N + 1) - 0.5) / N


@dataclass
class ExampleTree:
    spec: ExampleSpec
    tree: ScenarioTree
    S: np.ndarray          # the chosen variant
    S_one: np.ndarray      # the one-jump process, always
    Z_paper: np.ndarray
    Z_hat: np.ndarray
    u_of_node: np.ndarray  # U value per node (nan at the root)


def build_example_tree(spec: ExampleSpec) -> ExampleTree:
    """Depth-2 tree: ``N`` U-atoms at time 1, two coin children each at time 2."""
    spec.validate()
    N = spec.grid
    u = spec.u
    nodes = [{"id": "r", "parent": None, "p": 1.0}]
    for i in range(N):
        nodes.append({"id": f"u{i}", "parent": "r", "p": 1.0 / N})
    for i in range(N):
        nodes.append({"id": f"u{i}+", "parent": f"u{i}", "p": 0.5})
        nodes.append({"id": f"u{i}-", "parent": f"u{i}", "p": 0.5})
    tree = validate_tree({"dimension": 1, "horizon": 2, "nodes": nodes})

    n = len(tree)
    un = np.full(n, np.nan)
    theta = np.zeros(n)
    un[1:N + 1] = u
    un[N + 1::2] = u
    un[N + 2::2] = u
    theta[N + 1::2] = 1.0
    theta[N + 2::2] = -1.0
    t = tree.time
    with np.errstate(invalid="ignore"):
        jump = np.where(t >= 2, theta / un, 0.0)
        sign = np.where(t >= 1, np.sign(un - 0.5), 0.0)
    S_one = jump
    S = S_one + sign if spec.variant == "two_jump" else S_one
    e = spec.eps_hat
    Z = np.where(t >= 1, 2.0 * un, 1.0)
    Zh = np.where(t >= 1, np.minimum(un, e) / (e - 0.5 * e * e), 1.0)
    return ExampleTree(spec, tree, S[:, None], S_one[:, None], Z, Zh, un)


def analytic_oracles(spec: ExampleSpec) -> dict:
    """Discretized example quantities next to their continuum limits.

    ``a``: ``E[Z_2 |S_2|]`` for the one-jump process, exactly 2.
    ``b``: ``E[Z_1 S'_1]``, limit 1/2.
    ``c``: ``E[|S_2|] = mean(1/u)``, grows like ``log N``.
    ``d``: ``E[Z_2 S_2]``, exactly 0.
    """
    ex = build_example_tree(spec)
    tree, Z = ex.tree, ex.Z_paper
    S1 = ex.S_one[:, 0]
    u = spec.u
    two = S1 + np.where(tree.time >= 1, np.sign(ex.u_of_node - 0.5), 0.0)
    a = float(expectation(tree, Z * np.abs(S1), 2))
    b = float(expectation(tree, Z * two, 1))
    c = float(expectation(tree, np.abs(S1), 2))
    d = float(expectation(tree, Z * S1, 2))
    zhat_mean = float(expectation(tree, ex.Z_hat, 1))
    N = spec.grid
    return {
        "N": N,
        "a_EZ2_absS2": {"value": a, "limit": 2.0},
        "b_EZ1_S1prime": {"value": b, "limit": 0.5, "bound": 2.0 / N},
        "c_E_absS2": {"value": c, "log_growth": math.log(N), "mean_inverse_u": float(np.mean(1 / u))},
        "d_EZ2_S2": {"value": d, "limit": 0.0},
        "zhat_mean": {"value": zhat_mean, "limit": 1.0},
    }


def localization_sequence(spec: ExampleSpec, n: float) -> StoppingTime:
    """``tau_n = 1`` on ``{1/U > n}``, infinity elsewhere."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    marked = frozenset(f"u{i}" for i, u in enumerate(spec.u) if 1.0 / u > n)
    return StoppingTime(marked)


def localization_suite(spec: ExampleSpec) -> list:
    """``tau_n`` for ``n = 1, 2, 4, ...`` up to the first that marks nothing."""
    out, n = [], 1
    while True:
        tau = localization_sequence(spec, n)
        out.append(tau)
        if not tau.marked:
            return out
        n *= 2


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("EMM_THREADS", "1")))
    except ValueError:
        return 1


def sweep_row(variant: str, N: int, eps: float, via_measure: bool = False, **opts) -> dict:
    ex = build_example_tree(ExampleSpec(variant, N))
    run = construct_measure if via_measure else construct_density
    con = run(ex.tree, ex.S, eps, **opts)
    abs2 = np.abs(ex.S[:, 0])
    return {
        "N": N,
        "log_EP_exp_S2": exponential_moment(ex.tree, ex.S, 2),
        "log_EQ_exp_S2": exponential_moment(con.Q, ex.S, 2),
        "EQ_abs_S2": float(expectation(con.Q, abs2, 2)),
        "tv": con.report["tv"]["l1"],
        "sup_Z": con.report["sup_Z"],
        "ok": con.ok,
    }


def divergence_sweep(variant: str, grids, eps: float, via_measure: bool = False, **opts) -> list:
    """One construction per grid size; rows of moments under ``P`` and ``Q``.

    Rows run in parallel up to ``EMM_THREADS`` workers and are returned in
    the order of ``grids``.
    """
    grids = list(grids)
    if any(b <= a for a, b in zip(grids, grids[1:])):
        raise InvalidGrid("grid sizes must be increasing")
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        futures = [pool.submit(sweep_row, variant, N, eps, via_measure, **opts) for N in grids]
        return [f.result() for f in futures]
