"""Shared fixtures and small helpers for the test suite."""

import numpy as np
import pytest

from hierpath import bundled_tree_path
from hierpath.tree import ClassTree, TreeNode, load_tree


def random_tree(rng, max_nodes: int = 50) -> ClassTree:
    """A random rooted tree with ids in file order (root = 0)."""
    n = int(rng.integers(1, max_nodes))
    nodes = [TreeNode(0, "root", None)]
    for i in range(1, n + 1):
        parent = int(rng.integers(0, i))
        nodes.append(TreeNode(i, f"n{i}", parent))
    return ClassTree(nodes)


def chain_tree(depth: int) -> ClassTree:
    nodes = [TreeNode(0, "root", None)]
    for i in range(1, depth + 1):
        nodes.append(TreeNode(i, f"c{i}", i - 1))
    return ClassTree(nodes)


@pytest.fixture(scope="session")
def mall_tree():
    return load_tree(bundled_tree_path("mall"))


@pytest.fixture(scope="session")
def fixed12_tree():
    return load_tree(bundled_tree_path("fixed12"))


@pytest.fixture(scope="session")
def var9_tree():
    return load_tree(bundled_tree_path("var9"))


@pytest.fixture(scope="session")
def general30_tree():
    return load_tree(bundled_tree_path("general30"))


TOY_CONFIG = {
    "backbone": {"channels": [2, 3, 4, 4], "kernel": 3, "pool": 2,
                 "input_channels": 3, "input_size": 16},
    "conversion": {"kind": "linear", "p": 6},
    "head": {"hidden": 4, "layers": 1},
}


def toy_config(**head) -> dict:
    cfg = {k: dict(v) for k, v in TOY_CONFIG.items()}
    cfg["head"].update(head)
    return cfg


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))
