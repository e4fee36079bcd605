"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import json

import numpy as np
import pytest

from treeseg.hierarchy import parse_tree, random_tree

THREE_LEAF_DOC = json.dumps(
    {
        "name": "root",
        "children": [
            {"name": "A", "children": [{"name": "a1"}, {"name": "a2"}]},
            {"name": "B", "children": [{"name": "b1"}]},
        ],
    }
)


@pytest.fixture
def three_leaf_tree():
    return parse_tree(THREE_LEAF_DOC)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_random_tree(seed: int, depth: int = 3, branching=(2, 3), ragged: bool = False):
    return random_tree(np.random.default_rng(seed), depth=depth, branching=branching, ragged=ragged)


def random_probs(rng: np.random.Generator, n: int, c: int) -> np.ndarray:
    return rng.dirichlet(np.ones(c), size=n)


def finite_difference_grad(fn, logits: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar loss over every logit."""
    num = np.zeros_like(logits, dtype=float)
    it = np.nditer(logits, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        up = logits.copy()
        up[i] += eps
        down = logits.copy()
        down[i] -= eps
        num[i] = (fn(up) - fn(down)) / (2.0 * eps)
    return num


def relative_grad_error(fn, logits: np.ndarray, eps: float = 1e-6) -> float:
    """Max |analytic - numeric| scaled by the numeric gradient magnitude."""
    _, grad = fn(logits)
    num = finite_difference_grad(lambda z: fn(z)[0], logits, eps)
    scale = max(float(np.abs(num).max()), 1e-8)
    return float(np.abs(grad - num).max()) / scale
