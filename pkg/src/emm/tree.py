"""Finite filtered probability spaces encoded as scenario trees.

A tree stores *conditional* (transition) probabilities. The atoms of the
time-``t`` sigma algebra are the depth-``t`` nodes, so every conditional
expectation is a local weighted sum over children.

Processes are plain numpy arrays indexed by node position: shape
``(n_nodes,)`` for scalar processes and densities, ``(n_nodes, d)`` for
vector processes. Node position 0 is always the root.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import (
    ChildrenSumNotOne,
    InvalidDensity,
    InvalidStoppingTime,
    MeanNotOne,
    NegativeInput,
    NonPositiveProbability,
    OrphanNode,
    RaggedLeaves,
    RootError,
    TimeOutOfRange,
    TreeError,
)

PROB_TOL = 1e-12
DENSITY_TOL = 1e-10


_SHAPE_CACHES = ("index", "levels", "children", "leaves")


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Immutable rooted tree with conditional transition probabilities.

    Use :func:`validate_tree` to build one from a raw description; the
    constructor itself performs no checks.
    """

    ids: tuple
    parent: np.ndarray
    prob: np.ndarray
    time: np.ndarray
    dimension: int
    horizon: int

    def __post_init__(self):
        for arr in (self.parent, self.prob, self.time):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.ids)

    @cached_property
    def index(self) -> dict:
        return {node_id: i for i, node_id in enumerate(self.ids)}

    @cached_property
    def levels(self) -> tuple:
        """Node positions per time, in input order."""
        return tuple(
            np.flatnonzero(self.time == t) for t in range(self.horizon + 1)
        )

    @cached_property
    def children(self) -> tuple:
        kids = [[] for _ in self.ids]
        for i in range(1, len(self.ids)):
            kids[self.parent[i]].append(i)
        return tuple(np.asarray(k, dtype=int) for k in kids)

    @cached_property
    def leaves(self) -> np.ndarray:
        return self.levels[self.horizon]

    @cached_property
    def abs_prob(self) -> np.ndarray:
        """Absolute probability of every node (product along its path)."""
        out = np.empty(len(self.ids))
        out[0] = 1.0
        for t in range(1, self.horizon + 1):
            idx = self.levels[t]
            out[idx] = out[self.parent[idx]] * self.prob[idx]
        out.setflags(write=False)
        return out

    def with_prob(self, prob) -> "ScenarioTree":
        """Same shape, new transition probabilities (no validation)."""
        out = ScenarioTree(
            self.ids, self.parent, np.asarray(prob, dtype=float),
            self.time, self.dimension, self.horizon,
        )
        # shape-only caches carry over
        for key in _SHAPE_CACHES:
            if key in self.__dict__:
                out.__dict__[key] = self.__dict__[key]
        return out

    def ancestor_at(self, t: int) -> np.ndarray:
        """Position of each node's ancestor at time ``t`` (itself if its time <= t)."""
        anc = np.arange(len(self.ids))
        for _ in range(self.horizon - t):
            deeper = self.time[anc] > t
            anc = np.where(deeper, self.parent[anc], anc)
        return anc


def validate_tree(raw: dict) -> ScenarioTree:
    """Build a :class:`ScenarioTree` from its JSON-style description.

    ``raw`` has keys ``dimension``, ``horizon`` (optional; defaults to the
    deepest node) and ``nodes``, a parent-before-child list of mappings with
    ``id``, ``parent`` (``None`` for the root) and ``p``.

    Sibling probabilities must sum to one within ``1e-12``. After checking,
    the last child of every node absorbs the rounding slack
    (``p_last = 1 - sum(others)``) so the stored probabilities sum to one
    and re-saving a loaded tree is byte-stable.
    """
    nodes = raw.get("nodes")
    if not nodes:
        raise TreeError("tree has no nodes")
    dimension = int(raw.get("dimension", 1))
    if dimension < 1:
        raise TreeError(f"dimension must be >= 1, got {dimension}")

    index: dict = {}
    ids, parents, probs, times = [], [], [], []
    for pos, node in enumerate(nodes):
        node_id = str(node["id"])
        if node_id in index:
            raise TreeError(f"duplicate node id {node_id!r}", node_id)
        par = node.get("parent")
        if par is None:
            if pos != 0:
                raise RootError(f"second root {node_id!r}", node_id)
            p = float(node.get("p", 1.0))
            if abs(p - 1.0) > PROB_TOL:
                raise RootError(f"root probability must be 1, got {p}", node_id)
            parents.append(-1)
            probs.append(1.0)
            times.append(0)
        else:
            par = str(par)
            if par not in index:
                raise OrphanNode(
                    f"node {node_id!r} refers to unknown or later parent {par!r}",
                    node_id,
                )
            p = float(node["p"])
            if not (p > 0.0) or not math.isfinite(p):
                raise NonPositiveProbability(
                    f"node {node_id!r} has probability {p}", node_id
                )
            parents.append(index[par])
            probs.append(p)
            times.append(times[index[par]] + 1)
        index[node_id] = pos
        ids.append(node_id)

    horizon = int(raw["horizon"]) if raw.get("horizon") is not None else max(times)
    kids = [[] for _ in ids]
    for i, par in enumerate(parents):
        if par >= 0:
            kids[par].append(i)
    for i, ks in enumerate(kids):
        if not ks:
            if times[i] != horizon:
                raise RaggedLeaves(
                    f"leaf {ids[i]!r} at time {times[i]}, horizon is {horizon}",
                    ids[i],
                )
            continue
        total = math.fsum(probs[k] for k in ks)
        if abs(total - 1.0) > PROB_TOL:
            raise ChildrenSumNotOne(
                f"children of {ids[i]!r} sum to {total!r}", ids[i]
            )
        last = ks[-1]
        rest = 0.0
        for k in ks[:-1]:
            rest += probs[k]
        probs[last] = 1.0 - rest
        if not probs[last] > 0.0:
            raise NonPositiveProbability(
                f"node {ids[last]!r} has probability {probs[last]}", ids[last]
            )

    return ScenarioTree(
        tuple(ids),
        np.asarray(parents, dtype=int),
        np.asarray(probs, dtype=float),
        np.asarray(times, dtype=int),
        dimension,
        horizon,
    )


def leaf_measure(tree: ScenarioTree) -> dict:
    """Map leaf id -> absolute probability."""
    ap = tree.abs_prob
    return {tree.ids[i]: float(ap[i]) for i in tree.leaves}


def _check_time(tree, t, *, need_next=True):
    top = tree.horizon - 1 if need_next else tree.horizon
    if not 0 <= t <= top:
        raise TimeOutOfRange(f"time {t} outside [0, {top}]")


def cond_expectation(tree: ScenarioTree, X, t: int) -> np.ndarray:
    """E[X_{t+1} | F_t] on the time-``t`` atoms.

    ``X`` is a node-indexed array; only its time-``t+1`` entries are read.
    The result is aligned with ``tree.levels[t]``.
    """
    _check_time(tree, t)
    X = np.asarray(X, dtype=float)
    idx = tree.levels[t + 1]
    if not np.all(np.isfinite(X[idx])):
        raise ValueError(f"non-finite values at time {t + 1}")
    acc = np.zeros((len(tree),) + X.shape[1:])
    weights = tree.prob[idx].reshape((-1,) + (1,) * (X.ndim - 1))
    np.add.at(acc, tree.parent[idx], weights * X[idx])
    return acc[tree.levels[t]]


def cond_expectation_truncated(tree: ScenarioTree, X, t: int, k: float) -> np.ndarray:
    """E[X_{t+1} ∧ k | F_t] for nonnegative ``X``."""
    X = np.asarray(X, dtype=float)
    _check_time(tree, t)
    if k < 0:
        raise NegativeInput(f"truncation level {k} < 0")
    if np.any(X[tree.levels[t + 1]] < 0):
        raise NegativeInput("X must be nonnegative")
    return cond_expectation(tree, np.minimum(X, k), t)


def expectation(tree: ScenarioTree, X, t: int):
    """Unconditional E[X_t] under the tree's measure."""
    _check_time(tree, t, need_next=False)
    X = np.asarray(X, dtype=float)
    idx = tree.levels[t]
    return np.tensordot(tree.abs_prob[idx], X[idx], axes=1)


def check_density(tree: ScenarioTree, Z, tol: float = DENSITY_TOL) -> np.ndarray:
    """Validate a node-indexed density process; return it as a float array."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape != (len(tree),):
        raise InvalidDensity(f"density has shape {Z.shape}, expected ({len(tree)},)")
    if not np.all(np.isfinite(Z)) or np.any(Z <= 0):
        bad = int(np.flatnonzero(~(np.isfinite(Z) & (Z > 0)))[0])
        raise InvalidDensity(f"density not positive at {tree.ids[bad]!r}")
    if abs(Z[0] - 1.0) > tol:
        raise InvalidDensity(f"density at root is {Z[0]!r}, not 1")
    for t in range(tree.horizon):
        gap = cond_expectation(tree, Z, t) - Z[tree.levels[t]]
        j = int(np.argmax(np.abs(gap)))
        if abs(gap[j]) > tol:
            atom = tree.ids[tree.levels[t][j]]
            raise InvalidDensity(
                f"density is not a martingale at {atom!r} (gap {gap[j]:.3e})"
            )
    return Z


def apply_density(tree: ScenarioTree, Z) -> ScenarioTree:
    """Change of measure by a density process (Bayes rule per transition).

    Returns a tree of the same shape with ``p'(c) = p(c) Z(c) / Z(parent)``,
    renormalized per sibling group.
    """
    Z = check_density(tree, Z)
    par = tree.parent[1:]
    raw = tree.prob[1:] * Z[1:] / Z[par]
    sums = np.zeros(len(tree))
    np.add.at(sums, par, raw)
    prob = np.empty(len(tree))
    prob[0] = 1.0
    prob[1:] = raw / sums[par]
    return tree.with_prob(prob)


class TotalVariation(NamedTuple):
    l1: float
    positive_part: float


def _leaf_values(tree, values):
    values = np.asarray(values, dtype=float)
    if values.shape == (len(tree),):
        return values[tree.leaves]
    if values.shape == (len(tree.leaves),):
        return values
    raise ValueError(f"expected leaf or node values, got shape {values.shape}")


def total_variation(tree: ScenarioTree, z_leaf, tol: float = DENSITY_TOL) -> TotalVariation:
    """``E_P|Z - 1|`` and ``2 E_P[(Z - 1)^+]`` for a terminal density.

    ``z_leaf`` may be leaf-aligned or node-indexed.
    """
    z = _leaf_values(tree, z_leaf)
    p = tree.abs_prob[tree.leaves]
    if np.any(z <= 0) or not np.all(np.isfinite(z)):
        raise InvalidDensity("terminal density must be positive and finite")
    mean = math.fsum(p * z)
    if abs(mean - 1.0) > tol:
        raise MeanNotOne(f"terminal density has mean {mean!r}")
    dev = z - 1.0
    l1 = math.fsum(p * np.abs(dev))
    pos = 2.0 * math.fsum(p * np.maximum(dev, 0.0))
    return TotalVariation(l1, pos)


@dataclass(frozen=True)
class StoppingTime:
    """First-hit stopping time: stop at a marked node, infinity on unmarked paths."""

    marked: frozenset = frozenset()

    def positions(self, tree: ScenarioTree) -> np.ndarray:
        try:
            return np.asarray(sorted(tree.index[m] for m in self.marked), dtype=int)
        except KeyError as exc:
            raise InvalidStoppingTime(f"unknown node {exc.args[0]!r}") from None

    def validate(self, tree: ScenarioTree) -> "StoppingTime":
        mark = np.zeros(len(tree), dtype=bool)
        mark[self.positions(tree)] = True
        above = np.zeros(len(tree), dtype=bool)
        for t in range(1, tree.horizon + 1):
            idx = tree.levels[t]
            par = tree.parent[idx]
            above[idx] = above[par] | mark[par]
        clash = np.flatnonzero(mark & above)
        if clash.size:
            raise InvalidStoppingTime(
                f"marked node {tree.ids[clash[0]]!r} lies below another mark"
            )
        return self


def stop_anchor(tree: ScenarioTree, tau: StoppingTime) -> np.ndarray:
    """Position whose value the stopped process shows at each node."""
    tau.validate(tree)
    mark = np.zeros(len(tree), dtype=bool)
    mark[tau.positions(tree)] = True
    anchor = np.arange(len(tree))
    for t in range(1, tree.horizon + 1):
        idx = tree.levels[t]
        par = tree.parent[idx]
        frozen = mark[anchor[par]]
        anchor[idx] = np.where(frozen, anchor[par], idx)
    return anchor


def stopped_process(tree: ScenarioTree, S, tau: StoppingTime) -> np.ndarray:
    """``S^tau``: the value at the marked ancestor if one exists, else ``S``."""
    S = np.asarray(S, dtype=float)
    return S[stop_anchor(tree, tau)]


def stopped_mass(tree: ScenarioTree, tau: StoppingTime) -> float:
    """Probability that ``tau <= T`` (mass of the marked nodes)."""
    pos = tau.validate(tree).positions(tree)
    return math.fsum(tree.abs_prob[pos]) if pos.size else 0.0


# -- JSON ---------------------------------------------------------------------

def _node_record(tree, i, S):
    rec = {
        "id": tree.ids[i],
        "parent": None if tree.parent[i] < 0 else tree.ids[tree.parent[i]],
        "p": float(tree.prob[i]),
    }
    if S is not None:
        rec["s"] = [float(v) for v in np.atleast_1d(S[i])]
    return rec


def dumps_tree(tree: ScenarioTree, S=None, extra: dict | None = None) -> str:
    """Canonical JSON text: fixed key order, one node per line."""
    if S is not None:
        S = np.asarray(S, dtype=float).reshape(len(tree), -1)
    head = {"dimension": tree.dimension, "horizon": tree.horizon}
    if extra:
        head.update(extra)
    lines = ["{"]
    for key, val in head.items():
        lines.append(f" {json.dumps(key)}: {json.dumps(val, sort_keys=True)},")
    lines.append(' "nodes": [')
    recs = [json.dumps(_node_record(tree, i, S)) for i in range(len(tree))]
    lines.append(",\n".join("  " + r for r in recs))
    lines.append(" ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def loads_tree(text_or_raw) -> tuple:
    """Parse a tree description; return ``(tree, S)`` where ``S`` may be ``None``."""
    raw = json.loads(text_or_raw) if isinstance(text_or_raw, str) else text_or_raw
    tree = validate_tree(raw)
    nodes = raw["nodes"]
    if all("s" in n for n in nodes):
        S = np.asarray([n["s"] for n in nodes], dtype=float).reshape(len(tree), -1)
        if S.shape[1] != tree.dimension:
            raise TreeError(
                f"process has dimension {S.shape[1]}, tree declares {tree.dimension}"
            )
        return tree, S
    return tree, None


def load_tree(path) -> tuple:
    with open(path) as fh:
        return loads_tree(fh.read())


def save_tree(path, tree: ScenarioTree, S=None, extra=None) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_tree(tree, S, extra))


def dumps_process(tree: ScenarioTree, values, key: str = "values") -> str:
    """Sibling-file format: ``{key: {node_id: value}}`` in node order."""
    values = np.asarray(values, dtype=float)
    body = {}
    for i, node_id in enumerate(tree.ids):
        v = values[i]
        body[node_id] = float(v) if v.ndim == 0 else [float(x) for x in v]
    return json.dumps({key: body}, indent=1) + "\n"


def loads_process(tree: ScenarioTree, text: str, key: str = "values") -> np.ndarray:
    body = json.loads(text)[key]
    missing = [i for i in tree.ids if i not in body]
    if missing:
        raise TreeError(f"process missing node {missing[0]!r}", missing[0])
    return np.asarray([body[i] for i in tree.ids], dtype=float)
