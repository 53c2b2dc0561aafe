"""Seeded random martingale trees."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tree import ScenarioTree, validate_tree

PRNG = "numpy.random.PCG64"


@dataclass(frozen=True)
class GeneratorSpec:
    branching: int = 3
    horizon: int = 3
    dimension: int = 1
    scale: float = 1.0
    tail: float | None = None   # Pareto exponent for heavy-tailed magnitudes
    seed: int = 0

    def validate(self) -> "GeneratorSpec":
        if self.branching < 2 or self.horizon < 1 or self.dimension < 1:
            raise ValueError("need branching >= 2, horizon >= 1, dimension >= 1")
        if self.tail is not None and not self.tail > 0:
            raise ValueError("tail exponent must be positive")
        return self


def generate_tree(spec: GeneratorSpec) -> tuple:
    """Random tree plus a process with zero conditional drift on every atom.

    Children probabilities are Dirichlet(1) draws; increments are Gaussian
    (optionally scaled by Pareto magnitudes) and recentred per atom.
    Returns ``(tree, S, metadata)``.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    b, T, d = spec.branching, spec.horizon, spec.dimension
    nodes = [{"id": "0", "parent": None, "p": 1.0}]
    values = [np.zeros(d)]
    frontier = [0]
    max_inc, all_inc = 0.0, []
    for _ in range(T):
        nxt = []
        for pos in frontier:
            q = rng.dirichlet(np.ones(b))
            q = np.maximum(q, 1e-3)
            q = q / q.sum()
            w = spec.scale * rng.standard_normal((b, d))
            if spec.tail is not None:
                w *= (rng.pareto(spec.tail, size=b) + 1.0)[:, None]
            w = w - q @ w
            w = w - q @ w
            parent_id = nodes[pos]["id"]
            for j in range(b):
                nodes.append({"id": f"{parent_id}.{j}", "parent": parent_id, "p": float(q[j])})
                values.append(values[pos] + w[j])
                nxt.append(len(nodes) - 1)
            norms = np.linalg.norm(w, axis=1)
            all_inc.extend(norms.tolist())
            max_inc = max(max_inc, float(norms.max()))
        frontier = nxt
    tree = validate_tree({"dimension": d, "horizon": T, "nodes": nodes})
    S = np.asarray(values)
    med = float(np.median(all_inc)) if all_inc else 0.0
    meta = {
        "generator": {**asdict(spec), "prng": PRNG},
        "max_over_median_increment": max_inc / med if med > 0 else None,
    }
    meta["heavy_tailed"] = bool(
        meta["max_over_median_increment"] is not None and meta["max_over_median_increment"] > 100
    )
    # the tree stores renormalized probabilities; recentre against those
    S = recentre(tree, S)
    return tree, S, meta


def recentre(tree: ScenarioTree, S) -> np.ndarray:
    """Shift children values so each atom's conditional mean equals its value."""
    S = np.array(S, dtype=float, copy=True)
    for t in range(tree.horizon):
        for g in tree.levels[t]:
            kids = tree.children[g]
            q = tree.prob[kids]
            w = S[kids] - S[g]
            w = w - q @ w
            w = w - q @ w
            S[kids] = S[g] + w
    return S
