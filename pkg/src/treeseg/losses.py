"""Segmentation losses with analytic gradients w.r.t. pre-softmax logits.

Conventions used throughout:

* ``logits`` has shape ``(..., C)``; leading dimensions are pixels and are
  flattened internally. Gradients are returned in the original shape.
* ``target`` holds per-pixel class codes: ``0`` means unannotated, codes
  ``1..C`` map to leaf index ``code - 1``. Per-pixel losses average over
  annotated pixels only, in fixed index order, double precision.
* Every loss returns ``(loss, grad)`` where ``grad`` is the derivative of
  the scalar loss w.r.t. the logits.

The semantic losses are the label-space Wasserstein loss (closed form
``p^T M g`` for crisp ground truth) and the tree-weighted cross-entropy
over aggregated node probabilities; both can be compounded with a generic
segmentation loss as ``alpha * semantic + beta * seg``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .distances import distance_matrix
from .errors import ConfigError, EmptyMaskError, LabelError, NormalizationError
from .hierarchy import EdgeWeightScheme, LabelTree, assign_weights

LOG_GUARD = 1e-12  # aggregated probabilities are sums of softmax outputs, clamp before log
DICE_SMOOTH = 1e-5

SEG_KINDS = ("ce", "dice_ce", "none")
SEMANTIC_KINDS = ("wass", "twce")


@dataclass(frozen=True)
class LossSpec:
    """Compound loss configuration: alpha * semantic + beta * seg.

    ``seg="none"`` is only allowed for the tree-weighted CE, where the
    leaf-edge terms already play the role of a CE on leaves.
    """

    semantic: str
    scheme: EdgeWeightScheme
    seg: str = "ce"
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.semantic not in SEMANTIC_KINDS:
            raise ConfigError(f"semantic must be one of {SEMANTIC_KINDS}, got {self.semantic!r}")
        if self.seg not in SEG_KINDS:
            raise ConfigError(f"seg must be one of {SEG_KINDS}, got {self.seg!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.seg == "none" and self.semantic != "twce":
            raise ConfigError("seg='none' is only valid with the tree-weighted CE")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _flatten(logits: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple]:
    logits = np.asarray(logits, dtype=float)
    target = np.asarray(target)
    shape = logits.shape
    flat = logits.reshape(-1, shape[-1])
    t = target.reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise LabelError(f"target has {t.shape[0]} pixels, logits have {flat.shape[0]}")
    return flat, t, shape


def _annotated(target: np.ndarray, n_classes: int) -> np.ndarray:
    if target.size and (target.min() < 0 or target.max() > n_classes):
        bad = target[(target < 0) | (target > n_classes)][0]
        raise LabelError(f"class code {bad} outside 0..{n_classes}")
    idx = np.flatnonzero(target > 0)
    if idx.size == 0:
        raise EmptyMaskError("no annotated pixels")
    return idx


def ancestor_matrix(tree: LabelTree) -> np.ndarray:
    """N x C 0/1 matrix: entry (v, l) is 1 iff leaf l lies in the subtree of v."""
    u = np.zeros((tree.n_nodes, tree.n_leaves))
    for v in range(tree.n_nodes):
        u[v, tree.leaves_under(v)] = 1.0
    return u


def edge_weight_vector(tree: LabelTree) -> np.ndarray:
    """Per-node weight of the edge to the parent; 0 for the root."""
    w = np.zeros(tree.n_nodes)
    for v, weight in tree.edge_weight.items():
        w[v] = weight
    return w


def aggregate(tree: LabelTree, probs: np.ndarray) -> np.ndarray:
    """Extend leaf probabilities to all nodes by one leaf-to-root pass.

    Equivalent to applying (I - A)^-1 to the zero-padded leaf vector, but
    computed by summing children into parents in depth order. Input is
    ``(..., C)``, output ``(..., N)``.
    """
    p = np.asarray(probs, dtype=float)
    lead = p.shape[:-1]
    p = p.reshape(-1, p.shape[-1])
    if p.shape[1] != tree.n_leaves:
        raise NormalizationError(f"expected {tree.n_leaves} leaf columns, got {p.shape[1]}")
    if np.any(p < -1e-9) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise NormalizationError("rows must be probability vectors over the leaves")
    out = np.zeros((p.shape[0], tree.n_nodes))
    out[:, : tree.n_leaves] = p
    for v in tree.deepest_first():
        kids = tree.nodes[v].children
        if kids:
            acc = out[:, kids[0]].copy()
            for c in kids[1:]:
                acc += out[:, c]
            out[:, v] = acc
    return out.reshape(*lead, tree.n_nodes)


def _chain_softmax(p: np.ndarray, dldp: np.ndarray) -> np.ndarray:
    """Push a gradient w.r.t. probabilities through the softmax Jacobian."""
    inner = np.sum(p * dldp, axis=1, keepdims=True)
    return p * (dldp - inner)


def wasserstein_crisp(m: np.ndarray, logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Closed-form label-space Wasserstein loss for crisp ground truth.

    Per annotated pixel the loss is ``sum_l M[l, g] p_l``, i.e. the
    expected tree distance between the prediction and the true leaf;
    averaged over annotated pixels.
    """
    flat, t, shape = _flatten(logits, target)
    m = np.asarray(m, dtype=float)
    idx = _annotated(t, m.shape[0])
    p = softmax(flat[idx])
    cols = m[:, t[idx] - 1].T  # (n, C): distance of every leaf to the true leaf
    per_pixel = np.sum(p * cols, axis=1)
    loss = float(per_pixel.mean())
    grad = np.zeros_like(flat)
    grad[idx] = _chain_softmax(p, cols) / idx.size
    return loss, grad.reshape(shape)


def seg_loss_ce(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Standard softmax cross-entropy over annotated pixels."""
    flat, t, shape = _flatten(logits, target)
    idx = _annotated(t, flat.shape[1])
    logp = log_softmax(flat[idx])
    rows = np.arange(idx.size)
    loss = float(-logp[rows, t[idx] - 1].mean())
    grad = np.zeros_like(flat)
    g = softmax(flat[idx])
    g[rows, t[idx] - 1] -= 1.0
    grad[idx] = g / idx.size
    return loss, grad.reshape(shape)


def seg_loss_dice(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Soft Dice loss, averaged over classes. Requires a dense target.

    Per class: 1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps), with the
    sums running over all pixels.
    """
    flat, t, shape = _flatten(logits, target)
    n_classes = flat.shape[1]
    if t.size and (t.min() < 0 or t.max() > n_classes):
        raise LabelError(f"class code outside 0..{n_classes}")
    if np.any(t == 0):
        raise ConfigError("soft Dice requires a dense target (no unannotated pixels)")
    p = softmax(flat)
    onehot = np.zeros_like(p)
    onehot[np.arange(t.size), t - 1] = 1.0
    num = 2.0 * np.sum(p * onehot, axis=0) + DICE_SMOOTH
    den = p.sum(axis=0) + onehot.sum(axis=0) + DICE_SMOOTH
    loss = float(np.mean(1.0 - num / den))
    # d(1 - num_c/den_c)/dp_ic = -(2 g_ic den_c - num_c) / den_c^2, averaged over classes
    dldp = -(2.0 * onehot * den - num) / (den * den) / n_classes
    grad = _chain_softmax(p, dldp)
    return loss, grad.reshape(shape)


def tree_weighted_ce(tree: LabelTree, logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy extended over all tree nodes, weighted per edge.

    Per annotated pixel: ``-sum_v w_v [v ancestor of g] log p_agg_v`` where
    the aggregated probability of a node is the mass of its subtree. With
    unit weights on leaf edges and zero elsewhere this is the standard CE.
    """
    flat, t, shape = _flatten(logits, target)
    if flat.shape[1] != tree.n_leaves:
        raise LabelError(f"expected {tree.n_leaves} logit columns, got {flat.shape[1]}")
    idx = _annotated(t, tree.n_leaves)
    u = ancestor_matrix(tree)
    w = edge_weight_vector(tree)
    p = softmax(flat[idx])
    node_p = aggregate(tree, p)
    anc = u[:, t[idx] - 1].T  # (n, N) indicator of the true leaf's ancestor chain
    contrib = w[None, :] * anc
    loss = float(-(contrib * np.log(np.maximum(node_p, LOG_GUARD))).sum(axis=1).mean())
    inv = np.where(node_p > LOG_GUARD, 1.0 / np.maximum(node_p, LOG_GUARD), 0.0)
    dldp = -(contrib * inv) @ u  # (n, C)
    grad = np.zeros_like(flat)
    grad[idx] = _chain_softmax(p, dldp) / idx.size
    return loss, grad.reshape(shape)


def seg_loss(kind: str, logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Generic segmentation term: 'ce', 'dice_ce' (sum of both) or 'none'."""
    if kind == "ce":
        return seg_loss_ce(logits, target)
    if kind == "dice_ce":
        t = np.asarray(target).reshape(-1)
        if np.any(t == 0):
            raise ConfigError("seg='dice_ce' requires dense annotations")
        ce, ce_grad = seg_loss_ce(logits, target)
        dc, dc_grad = seg_loss_dice(logits, target)
        return ce + dc, ce_grad + dc_grad
    if kind == "none":
        flat = np.asarray(logits, dtype=float)
        return 0.0, np.zeros_like(flat)
    raise ConfigError(f"unknown seg loss {kind!r}")


def compound_wass(
    spec: LossSpec,
    tree: LabelTree,
    logits: np.ndarray,
    target: np.ndarray,
    m: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """alpha * Wasserstein + beta * seg. Pass a precomputed ``m`` to skip
    re-deriving the distance matrix (it must match ``spec.scheme``)."""
    if spec.semantic != "wass":
        raise ConfigError(f"compound_wass needs semantic='wass', got {spec.semantic!r}")
    if m is None:
        m = distance_matrix(assign_weights(tree, spec.scheme))
    sem, sem_grad = wasserstein_crisp(m, logits, target)
    seg, seg_grad = seg_loss(spec.seg, logits, target)
    return spec.alpha * sem + spec.beta * seg, spec.alpha * sem_grad + spec.beta * seg_grad


def compound_twce(
    spec: LossSpec,
    tree: LabelTree,
    logits: np.ndarray,
    target: np.ndarray,
    weighted_tree: LabelTree | None = None,
) -> tuple[float, np.ndarray]:
    """alpha * tree-weighted CE + beta * seg; seg='none' drops the second term."""
    if spec.semantic != "twce":
        raise ConfigError(f"compound_twce needs semantic='twce', got {spec.semantic!r}")
    wt = weighted_tree if weighted_tree is not None else assign_weights(tree, spec.scheme)
    sem, sem_grad = tree_weighted_ce(wt, logits, target)
    if spec.seg == "none":
        return spec.alpha * sem, spec.alpha * sem_grad
    seg, seg_grad = seg_loss(spec.seg, logits, target)
    return spec.alpha * sem + spec.beta * seg, spec.alpha * sem_grad + spec.beta * seg_grad


def make_loss(tree: LabelTree, spec: LossSpec) -> Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]:
    """Bind a LossSpec to a tree, precomputing weights and distances."""
    weighted = assign_weights(tree, spec.scheme)
    if spec.semantic == "wass":
        m = distance_matrix(weighted)

        def loss_fn(logits, target):
            return compound_wass(spec, tree, logits, target, m=m)

    else:

        def loss_fn(logits, target):
            return compound_twce(spec, tree, logits, target, weighted_tree=weighted)

    return loss_fn
