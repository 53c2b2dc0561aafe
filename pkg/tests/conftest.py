import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from emm import GeneratorSpec, generate_tree, validate_tree

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def coin_tree():
    return validate_tree({"nodes": [
        {"id": "r", "parent": None, "p": 1.0},
        {"id": "h", "parent": "r", "p": 0.5},
        {"id": "t", "parent": "r", "p": 0.5},
    ]})


def third_tree():
    """One period, p = (1/3, 2/3)."""
    return validate_tree({"nodes": [
        {"id": "r", "parent": None, "p": 1.0},
        {"id": "a", "parent": "r", "p": 1 / 3},
        {"id": "b", "parent": "r", "p": 2 / 3},
    ]})


def two_period_tree():
    """(0.5, 0.5) then (1/3, 2/3) below each node."""
    nodes = [{"id": "r", "parent": None, "p": 1.0}]
    for a in "ab":
        nodes.append({"id": a, "parent": "r", "p": 0.5})
    for a in "ab":
        nodes.append({"id": a + "1", "parent": a, "p": 1 / 3})
        nodes.append({"id": a + "2", "parent": a, "p": 2 / 3})
    return validate_tree({"nodes": nodes})


@pytest.fixture
def coin():
    return coin_tree()


@pytest.fixture
def third():
    return third_tree()


@pytest.fixture
def two_period():
    return two_period_tree()


# -- hypothesis strategies ----------------------------------------------------

@st.composite
def random_trees(draw, max_branching=3, max_horizon=3):
    """Random (not necessarily balanced) tree with uniform leaf depth."""
    T = draw(st.integers(1, max_horizon))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    nodes = [{"id": "n0", "parent": None, "p": 1.0}]
    frontier = ["n0"]
    count = 1
    for _ in range(T):
        nxt = []
        for pid in frontier:
            b = int(rng.integers(1, max_branching + 1))
            q = rng.dirichlet(np.ones(b)) + 0.01
            q = q / q.sum()
            for j in range(b):
                cid = f"n{count}"
                count += 1
                nodes.append({"id": cid, "parent": pid, "p": float(q[j])})
                nxt.append(cid)
        frontier = nxt
    return validate_tree({"nodes": nodes})


@st.composite
def martingale_instances(draw, max_dim=3, max_horizon=3):
    """Seeded generator output ``(tree, S)``."""
    spec = GeneratorSpec(
        branching=draw(st.integers(2, 3)),
        horizon=draw(st.integers(1, max_horizon)),
        dimension=draw(st.integers(1, max_dim)),
        scale=draw(st.sampled_from([0.3, 1.0, 2.0])),
        seed=draw(st.integers(0, 10_000)),
    )
    tree, S, _ = generate_tree(spec)
    return tree, S


def random_density(tree, rng, spread=0.5):
    """Positive martingale density built from random normalized one-step factors."""
    z = np.ones(len(tree))
    for g in range(len(tree)):
        kids = tree.children[g]
        if len(kids):
            f = rng.uniform(1 - spread, 1 + spread, len(kids))
            z[kids] = f / float(tree.prob[kids] @ f)
    Z = np.empty(len(tree))
    Z[0] = 1.0
    for t in range(1, tree.horizon + 1):
        idx = tree.levels[t]
        Z[idx] = Z[tree.parent[idx]] * z[idx]
    return Z
