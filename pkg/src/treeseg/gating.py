"""Background detection from positive-only models via hierarchy-level confidence.

A pixel is declared background when its maximum aggregated probability at
the chosen tree level does not exceed the threshold; otherwise the pixel
gets the argmax level class and, below it, the most probable leaf of that
subtree. ``sweep_tau`` picks the threshold maximizing mean one-vs-rest F1
over the positive classes on a validation set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .evaluation import ovr_scores
from .hierarchy import LabelTree, leaf_level_map, level_nodes
from .losses import aggregate


@dataclass(frozen=True)
class ThresholdPolicy:
    """Gating threshold tau applied at a hierarchy level (None = topmost)."""

    tau: float
    level: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")

    def resolve_level(self, tree: LabelTree) -> int:
        return tree.levels - 1 if self.level is None else self.level


@dataclass
class PredictionField:
    """Gated per-pixel labels (leaf codes, 0 = background) plus the level-k
    argmax node id for every pixel, gated or not."""

    labels: np.ndarray
    level_class: np.ndarray
    level: int


def score_at_level(tree: LabelTree, probs: np.ndarray, k: int) -> tuple[np.ndarray, list[int]]:
    """Aggregated probabilities restricted to the level-k nodes.

    Returns ``(scores, node_ids)`` with score columns in ascending node-id
    order. For k = 0 the scores are the raw leaf probabilities.
    """
    node_ids = sorted(level_nodes(tree, k))
    node_probs = aggregate(tree, probs)
    return node_probs[..., node_ids], node_ids


def gate(tree: LabelTree, probs: np.ndarray, policy: ThresholdPolicy) -> PredictionField:
    """Apply the background threshold and pick leaf labels inside the
    winning level-k subtree."""
    probs = np.asarray(probs, dtype=float)
    lead = probs.shape[:-1]
    flat = probs.reshape(-1, probs.shape[-1])
    k = policy.resolve_level(tree)
    scores, node_ids = score_at_level(tree, flat, k)
    best = np.argmax(scores, axis=1)
    keep = scores[np.arange(len(best)), best] > policy.tau
    level_class = np.asarray(node_ids, dtype=np.int64)[best]

    labels = np.zeros(flat.shape[0], dtype=np.int64)
    for slot, node in enumerate(node_ids):
        rows = keep & (best == slot)
        if not rows.any():
            continue
        leaves = tree.leaves_under(node)
        sub = flat[np.ix_(rows, leaves)]
        labels[rows] = np.asarray(leaves)[np.argmax(sub, axis=1)] + 1
    return PredictionField(labels=labels.reshape(lead), level_class=level_class.reshape(lead), level=k)


def default_grid(step: float = 0.01) -> np.ndarray:
    """Thresholds 0, step, ..., < 1 (the paper-style sweep grid)."""
    if not 0 < step <= 1:
        raise ConfigError("grid step must be in (0, 1]")
    return np.round(np.arange(0.0, 1.0 - 1e-12, step), 10)


def sweep_tau(
    tree: LabelTree,
    prob_fields: list[np.ndarray],
    masks: list[np.ndarray],
    k: int,
    grid: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Sweep the gating threshold on annotated validation pixels.

    Returns ``(tau_m, curve)`` where the curve rows are
    ``(tau, mean TPR, mean BACC, mean F1)`` over positive classes at level
    k and ``tau_m`` maximizes F1, ties broken toward the largest tau.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ConfigError("empty threshold grid")
    if len(prob_fields) != len(masks):
        raise ConfigError("need one mask per probability field")

    lut = leaf_level_map(tree, k) + 1
    max_parts, arg_parts, true_parts = [], [], []
    for probs, mask in zip(prob_fields, masks):
        probs = np.asarray(probs, dtype=float).reshape(-1, tree.n_leaves)
        codes = np.asarray(mask).reshape(-1)
        ann = codes > 0
        if not ann.any():
            continue
        scores, node_ids = score_at_level(tree, probs[ann], k)
        best = np.argmax(scores, axis=1)
        max_parts.append(scores[np.arange(len(best)), best])
        arg_parts.append(np.asarray(node_ids, dtype=np.int64)[best] + 1)
        true_parts.append(lut[codes[ann] - 1])
    if not max_parts:
        raise ConfigError("validation set has no annotated pixels")
    max_score = np.concatenate(max_parts)
    arg_code = np.concatenate(arg_parts)
    true_code = np.concatenate(true_parts)
    classes = sorted(int(c) for c in np.unique(true_code))

    curve = np.zeros((grid.size, 4))
    best_tau, best_f1 = None, -1.0
    for row, tau in enumerate(grid):
        pred = np.where(max_score > tau, arg_code, 0)
        scores = ovr_scores(pred, true_code, classes)
        means = [float(np.nanmean(scores[key])) for key in ("tpr", "bacc", "f1")]
        curve[row] = (tau, *means)
        if means[2] > best_f1 or (means[2] == best_f1 and tau > best_tau):
            best_tau, best_f1 = float(tau), means[2]
    return best_tau, curve
