"""Martingale diagnostics on scenario trees.

Classifies an adapted process as martingale, generalized martingale, or
local martingale along a supplied localization sequence. On finite trees
the first two notions coincide; both routes are computed anyway so the
equivalence itself is checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NotLocalizing
from .tree import (
    ScenarioTree,
    StoppingTime,
    cond_expectation,
    cond_expectation_truncated,
    stopped_mass,
    stopped_process,
)

TOL_MART = 1e-10
EXHAUSTION_DELTA = 1e-3


def _as_matrix(tree, S):
    S = np.asarray(S, dtype=float)
    return S.reshape(len(tree), -1)


def increment_scale(tree: ScenarioTree, S) -> float:
    """max |S(node) - S(parent)| (Euclidean), zero on a root-only tree."""
    S = _as_matrix(tree, S)
    if len(tree) == 1:
        return 0.0
    dS = S[1:] - S[tree.parent[1:]]
    return float(np.max(np.linalg.norm(dS, axis=1)))


@dataclass
class MartingaleReport:
    """Per-atom conditional drift plus summary moments."""

    residuals: dict               # t -> (n_atoms_t, d) array
    atoms: dict                   # t -> tuple of atom ids
    l1_norms: list                # E|S_t|, t = 0..T
    log_exp_moments: list         # log E e^{|S_t|}
    max_residual: float
    scale: float
    tol: float
    is_martingale: bool
    conditional_abs: dict = field(default_factory=dict)   # t -> E[|S_{t+1}| | F_t]
    truncation_gap: float | None = None
    is_generalized: bool | None = None

    @property
    def worst_atom(self):
        """``(t, atom_id)`` with the largest drift, or ``None``."""
        best, where = -1.0, None
        for t, r in self.residuals.items():
            if len(r):
                n = np.max(np.abs(r), axis=1)
                j = int(np.argmax(n))
                if n[j] > best:
                    best, where = float(n[j]), (t, self.atoms[t][j])
        return where

    def to_dict(self) -> dict:
        out = {
            "max_residual": self.max_residual,
            "scale": self.scale,
            "tol": self.tol,
            "is_martingale": self.is_martingale,
            "worst_atom": self.worst_atom,
            "l1_norms": self.l1_norms,
            "log_exp_moments": self.log_exp_moments,
            "residuals": {
                str(t): {a: [float(x) for x in r[j]] for j, a in enumerate(self.atoms[t])}
                for t, r in self.residuals.items()
            },
        }
        if self.is_generalized is not None:
            out["is_generalized"] = self.is_generalized
            out["truncation_gap"] = self.truncation_gap
            out["max_conditional_abs"] = max(
                (float(np.max(v)) for v in self.conditional_abs.values() if len(v)),
                default=0.0,
            )
        return out


def exponential_moment(tree: ScenarioTree, S, t: int) -> float:
    """log E[exp|S_t|] under the tree's measure, via log-sum-exp."""
    S = _as_matrix(tree, S)
    idx = tree.levels[t]
    a = np.linalg.norm(S[idx], axis=1)
    top = float(np.max(a))
    return top + math.log(float(tree.abs_prob[idx] @ np.exp(a - top)))


def martingale_residuals(tree: ScenarioTree, S, tol: float = TOL_MART) -> MartingaleReport:
    """E[S_{t+1} | F_t] - S_t on every atom.

    The verdict compares the largest sup-norm drift against
    ``tol * (1 + max|dS|)``.
    """
    S = _as_matrix(tree, S)
    residuals, atoms = {}, {}
    worst = 0.0
    for t in range(tree.horizon):
        idx = tree.levels[t]
        r = cond_expectation(tree, S, t) - S[idx]
        residuals[t] = r
        atoms[t] = tuple(tree.ids[i] for i in idx)
        if r.size:
            worst = max(worst, float(np.max(np.abs(r))))
    scale = increment_scale(tree, S)
    norms = np.linalg.norm(S, axis=1)
    l1 = [math.fsum(tree.abs_prob[lv] * norms[lv]) for lv in tree.levels]
    lem = [exponential_moment(tree, S, t) for t in range(tree.horizon + 1)]
    return MartingaleReport(
        residuals=residuals,
        atoms=atoms,
        l1_norms=l1,
        log_exp_moments=lem,
        max_residual=worst,
        scale=scale,
        tol=tol,
        is_martingale=worst <= tol * (1.0 + scale),
    )


def generalized_martingale_check(tree: ScenarioTree, S, tol: float = TOL_MART) -> MartingaleReport:
    """Martingale test through truncated conditional expectations.

    Computes ``E[S^+ ∧ k | F_t] - E[S^- ∧ k | F_t]`` per coordinate at
    ``k = max|S|`` and checks that it reproduces the plain conditional mean
    to ``1e-12`` relative; also reports ``E[|S_{t+1}| | F_t]``.
    """
    S = _as_matrix(tree, S)
    rep = martingale_residuals(tree, S, tol)
    k = float(np.max(np.abs(S))) if S.size else 0.0
    norms = np.linalg.norm(S, axis=1)
    gap = 0.0
    for t in range(tree.horizon):
        idx = tree.levels[t]
        rep.conditional_abs[t] = cond_expectation_truncated(tree, norms, t, k)
        pos = np.column_stack([
            cond_expectation_truncated(tree, np.maximum(S[:, c], 0.0), t, k)
            for c in range(S.shape[1])
        ])
        neg = np.column_stack([
            cond_expectation_truncated(tree, np.maximum(-S[:, c], 0.0), t, k)
            for c in range(S.shape[1])
        ])
        via_trunc = pos - neg - S[idx]
        if via_trunc.size:
            gap = max(gap, float(np.max(np.abs(via_trunc - rep.residuals[t]))))
    rep.truncation_gap = gap
    finite = all(np.all(np.isfinite(v)) for v in rep.conditional_abs.values())
    consistent = gap <= 1e-12 * (1.0 + k)
    rep.is_generalized = bool(finite and consistent and rep.is_martingale)
    return rep


@dataclass
class LocalizationReport:
    stopped_residuals: list       # max drift of S^{tau_n} 1{tau_n > 0}, per n
    exhaustion_mass: list         # P[tau_n <= T], per n
    monotone: bool
    delta: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "stopped_residuals": self.stopped_residuals,
            "exhaustion_mass": self.exhaustion_mass,
            "monotone": self.monotone,
            "delta": self.delta,
            "passed": self.passed,
        }


def verify_localization(tree: ScenarioTree, S, taus, tol: float = TOL_MART,
                        delta: float = EXHAUSTION_DELTA) -> LocalizationReport:
    """Check that ``taus`` localizes ``S``.

    Every ``S^{tau_n} 1{tau_n > 0}`` must have zero drift, and the mass of
    ``{tau_n <= T}`` for the last element must fall below ``delta`` (finite
    horizon stand-in for ``tau_n -> infinity``).

    Raises
    ------
    NotLocalizing
        With ``location = (n, t, atom)`` for a drifting stopped process, or
        ``(n, None, None)`` when exhaustion fails.
    """
    S = _as_matrix(tree, S)
    taus = list(taus)
    if not taus:
        raise NotLocalizing("empty localization sequence", (None, None, None))
    res, mass = [], []
    for n, tau in enumerate(taus):
        X = stopped_process(tree, S, tau)
        if tree.ids[0] in tau.marked:
            X = np.zeros_like(X)
        rep = martingale_residuals(tree, X, tol)
        if not rep.is_martingale:
            t, atom = rep.worst_atom
            raise NotLocalizing(
                f"stopped process {n} drifts at time {t}, atom {atom!r}",
                (n, t, atom),
            )
        res.append(rep.max_residual)
        mass.append(stopped_mass(tree, tau))
    monotone = all(b <= a + 1e-15 for a, b in zip(mass, mass[1:]))
    if not mass[-1] < delta:
        raise NotLocalizing(
            f"P[tau_n <= T] = {mass[-1]:.3g} does not fall below {delta:g}",
            (len(taus) - 1, None, None),
        )
    return LocalizationReport(res, mass, monotone, delta, True)


@dataclass
class Proposition1Report:
    localization: LocalizationReport
    generalized: MartingaleReport
    holds: bool

    def to_dict(self) -> dict:
        return {
            "localization": self.localization.to_dict(),
            "generalized": self.generalized.to_dict(),
            "holds": self.holds,
        }


def local_implies_generalized(tree: ScenarioTree, S, taus, tol: float = TOL_MART,
                              delta: float = EXHAUSTION_DELTA) -> Proposition1Report:
    """A localized process must pass the generalized martingale test.

    Propagates :class:`NotLocalizing` when ``taus`` does not localize ``S``.
    """
    loc = verify_localization(tree, S, taus, tol, delta)
    gen = generalized_martingale_check(tree, S, tol)
    return Proposition1Report(loc, gen, bool(gen.is_generalized))


def never_stop() -> StoppingTime:
    return StoppingTime(frozenset())
