"""Hierarchical evaluation: Dice, surface Dice, one-vs-rest rates, confusion.

All functions work on integer class-code arrays (0 = background, codes
``1..`` = classes). Evaluation can run at any tree level: leaf codes are
mapped to the code of their level-k cut node (``node id + 1``), so code 0
stays reserved for background at every level. Sparse ground truth is
handled by restricting everything to an annotation domain.

Classes absent from both prediction and truth are excluded from means
(reported as NaN) rather than scored 1, so sparse corpora do not inflate
averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, EmptyEvalError, LabelError
from .hierarchy import LabelTree, leaf_level_map, level_nodes


def level_classes(tree: LabelTree, k: int) -> list[int]:
    """Class codes (node id + 1) of the level-k cut, ascending."""
    return [v + 1 for v in sorted(level_nodes(tree, k))]


def nanmean_axis0(stack: np.ndarray) -> np.ndarray:
    """nanmean over axis 0 that stays silent on all-NaN slices."""
    valid = ~np.isnan(stack)
    count = valid.sum(axis=0)
    total = np.where(valid, stack, 0.0).sum(axis=0)
    return np.divide(total, count, out=np.full(count.shape, np.nan), where=count > 0)


def map_to_level(tree: LabelTree, codes: np.ndarray, k: int) -> np.ndarray:
    """Map leaf codes to level-k codes; background 0 is preserved."""
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > tree.n_leaves):
        raise LabelError(f"leaf codes must lie in 0..{tree.n_leaves}")
    lut = np.concatenate([[0], leaf_level_map(tree, k) + 1])
    return lut[codes]


def _resolve_domain(truth: np.ndarray, domain: np.ndarray | None) -> np.ndarray:
    if domain is None:
        domain = truth > 0
    domain = np.asarray(domain, dtype=bool)
    if not domain.any():
        raise EmptyEvalError("empty annotation domain")
    return domain


def dice_scores(pred: np.ndarray, truth: np.ndarray, classes: list[int], domain: np.ndarray | None = None) -> np.ndarray:
    """Per-class Dice 2|P&G| / (|P|+|G|); NaN where the class is absent from both."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    dom = _resolve_domain(truth, domain).reshape(-1)
    p, g = pred[dom], truth[dom]
    out = np.full(len(classes), np.nan)
    for i, c in enumerate(classes):
        pc, gc = p == c, g == c
        total = pc.sum() + gc.sum()
        if total:
            out[i] = 2.0 * np.sum(pc & gc) / total
    return out


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Face-adjacency boundary; out-of-image counts as background, so pixels
    on the image border are boundary."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    core = tuple(slice(1, -1) for _ in range(mask.ndim))
    all_in = mask.copy()
    for axis in range(mask.ndim):
        for off in (-1, 1):
            sl = list(core)
            sl[axis] = slice(1 + off, padded.shape[axis] - 1 + off)
            all_in &= padded[tuple(sl)]
    return mask & ~all_in


def nsd_scores(
    pred: np.ndarray,
    truth: np.ndarray,
    classes: list[int],
    tolerance: float,
    spacing: tuple[float, ...] | None = None,
) -> np.ndarray:
    """Normalised surface Dice per class on dense label images.

    Fraction of boundary elements of each surface lying within
    ``tolerance`` of the other surface, symmetrized over both surfaces.
    """
    if tolerance < 0:
        raise ConfigError("tolerance must be >= 0")
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim < 2:
        raise ConfigError("nsd needs two dense label images of the same spatial shape")
    out = np.full(len(classes), np.nan)
    for i, c in enumerate(classes):
        sp = _boundary(pred == c)
        sg = _boundary(truth == c)
        np_, ng = int(sp.sum()), int(sg.sum())
        if np_ == 0 and ng == 0:
            continue
        if np_ == 0 or ng == 0:
            out[i] = 0.0
            continue
        dist_to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
        dist_to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
        ok = np.sum(dist_to_g[sp] <= tolerance) + np.sum(dist_to_p[sg] <= tolerance)
        out[i] = ok / (np_ + ng)
    return out


def ovr_scores(
    pred: np.ndarray, truth: np.ndarray, classes: list[int], domain: np.ndarray | None = None
) -> dict[str, np.ndarray]:
    """One-vs-rest TPR/TNR/BACC/F1 per class on the annotation domain.

    Background predictions (code 0) count as negatives for every class.
    Classes with zero annotated positives are NaN (excluded from means).
    A class with no negatives gets the vacuous TNR of 1.
    """
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    dom = _resolve_domain(truth, domain).reshape(-1)
    p, g = pred[dom], truth[dom]
    n = len(classes)
    tpr = np.full(n, np.nan)
    tnr = np.full(n, np.nan)
    f1 = np.full(n, np.nan)
    for i, c in enumerate(classes):
        pos, neg = g == c, g != c
        n_pos, n_neg = int(pos.sum()), int(neg.sum())
        if n_pos == 0:
            continue
        tp = int(np.sum(pos & (p == c)))
        fp = int(np.sum(neg & (p == c)))
        tpr[i] = tp / n_pos
        tnr[i] = (n_neg - fp) / n_neg if n_neg else 1.0
        f1[i] = 2.0 * tp / (2.0 * tp + fp + (n_pos - tp))
    return {"tpr": tpr, "tnr": tnr, "bacc": (tpr + tnr) / 2.0, "f1": f1}


@dataclass
class EvalReport:
    """Per-class and mean metrics at one tree level."""

    level: int
    classes: list[int]
    names: list[str]
    dice: np.ndarray
    tpr: np.ndarray
    bacc: np.ndarray
    f1: np.ndarray
    nsd: np.ndarray | None = None
    nsd_tolerance: float | None = None

    def _mean(self, arr: np.ndarray | None) -> float | None:
        if arr is None:
            return None
        if np.all(np.isnan(arr)):
            return None
        return float(np.nanmean(arr))

    @property
    def mean_dice(self):
        return self._mean(self.dice)

    @property
    def mean_nsd(self):
        return self._mean(self.nsd)

    @property
    def mean_tpr(self):
        return self._mean(self.tpr)

    @property
    def mean_bacc(self):
        return self._mean(self.bacc)

    @property
    def mean_f1(self):
        return self._mean(self.f1)

    def to_dict(self) -> dict:
        def listify(a):
            return None if a is None else [None if np.isnan(x) else float(x) for x in a]

        return {
            "level": self.level,
            "classes": list(self.classes),
            "names": list(self.names),
            "per_class": {
                "dice": listify(self.dice),
                "tpr": listify(self.tpr),
                "bacc": listify(self.bacc),
                "f1": listify(self.f1),
                "nsd": listify(self.nsd),
            },
            "means": {
                "dice": self.mean_dice,
                "tpr": self.mean_tpr,
                "bacc": self.mean_bacc,
                "f1": self.mean_f1,
                "nsd": self.mean_nsd,
            },
            "nsd_tolerance": self.nsd_tolerance,
        }


def evaluate_level(
    tree: LabelTree,
    pred: np.ndarray,
    truth: np.ndarray,
    level: int,
    *,
    domain: np.ndarray | None = None,
    nsd_tolerance: float | None = None,
    spacing: tuple[float, ...] | None = None,
) -> EvalReport:
    """Evaluate leaf-coded predictions against leaf-coded truth at a level.

    NSD is computed only when a tolerance is given and the inputs are
    dense spatial label images (no unannotated truth, no domain mask).
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    classes = level_classes(tree, level)
    names = [tree.name_of(c - 1) for c in classes]
    pred_l = map_to_level(tree, pred, level)
    truth_l = map_to_level(tree, truth, level)
    dice = dice_scores(pred_l, truth_l, classes, domain)
    ovr = ovr_scores(pred_l, truth_l, classes, domain)
    nsd = None
    dense = domain is None and truth.ndim >= 2 and not np.any(truth == 0)
    if nsd_tolerance is not None and dense:
        nsd = nsd_scores(pred_l, truth_l, classes, nsd_tolerance, spacing)
    return EvalReport(
        level=level,
        classes=classes,
        names=names,
        dice=dice,
        tpr=ovr["tpr"],
        bacc=ovr["bacc"],
        f1=ovr["f1"],
        nsd=nsd,
        nsd_tolerance=nsd_tolerance if nsd is not None else None,
    )


@dataclass
class ConfusionTensor:
    """Per-fold raw-count confusion matrices plus the row-normalized average.

    Rows are true classes, columns predicted. When background is included
    it is the last row/column, code 0. Fold averaging takes the entrywise
    mean of row-normalized fold matrices, skipping rows without support.
    """

    classes: list[int]  # row/col codes; 0 last when background is included
    per_fold: np.ndarray  # (F, m, m) raw counts
    averaged: np.ndarray = field(init=False)  # (m, m), NaN rows = never supported

    def __post_init__(self):
        normed = np.full(self.per_fold.shape, np.nan)
        for f, counts in enumerate(self.per_fold):
            sums = counts.sum(axis=1, keepdims=True)
            rows = sums[:, 0] > 0
            normed[f, rows] = counts[rows] / sums[rows]
        self.averaged = nanmean_axis0(normed)


def confusion(
    fold_preds: list[np.ndarray],
    fold_truths: list[np.ndarray],
    classes: list[int],
    domains: list[np.ndarray] | None = None,
    include_background: bool = False,
) -> ConfusionTensor:
    """Count confusion per fold over the given class codes.

    ``include_background`` adds a trailing row/column for code 0 so gated
    background predictions and pseudo-background truth are visible.
    """
    if len(fold_preds) != len(fold_truths):
        raise ConfigError("need one truth field per prediction fold")
    codes = list(classes) + ([0] if include_background else [])
    m = len(codes)
    per_fold = np.zeros((len(fold_preds), m, m))
    for f, (pred, truth) in enumerate(zip(fold_preds, fold_truths)):
        pred = np.asarray(pred).reshape(-1)
        truth = np.asarray(truth).reshape(-1)
        dom = _resolve_domain(truth, domains[f] if domains else None).reshape(-1)
        p, t = pred[dom], truth[dom]
        lut = np.full(int(max(p.max(initial=0), t.max(initial=0), max(codes))) + 1, -1, dtype=np.int64)
        for i, c in enumerate(codes):
            lut[c] = i
        ti, pi = lut[t], lut[p]
        keep = (ti >= 0) & (pi >= 0)
        np.add.at(per_fold[f], (ti[keep], pi[keep]), 1.0)
    return ConfusionTensor(classes=codes, per_fold=per_fold)


@dataclass
class HardClassReport:
    threshold: float
    subset: list[int]  # class codes with baseline score below the threshold
    names: list[str]
    means: dict[str, dict[str, float | None]]  # report label -> subset means
    note: str = ""


def hard_class_report(
    baseline: EvalReport, reports: dict[str, EvalReport] | None = None, threshold: float = 0.7
) -> HardClassReport:
    """Select classes whose baseline Dice falls below the threshold and
    report subset means for the baseline and any comparison reports."""
    picked = [i for i, d in enumerate(baseline.dice) if not np.isnan(d) and d < threshold]
    subset = [baseline.classes[i] for i in picked]
    all_reports = {"baseline": baseline, **(reports or {})}
    means: dict[str, dict[str, float | None]] = {}
    for label, rep in all_reports.items():
        rows = [rep.classes.index(c) for c in subset if c in rep.classes]

        def sub_mean(arr):
            if arr is None or not rows:
                return None
            vals = arr[rows]
            return None if np.all(np.isnan(vals)) else float(np.nanmean(vals))

        means[label] = {"dice": sub_mean(rep.dice), "nsd": sub_mean(rep.nsd), "f1": sub_mean(rep.f1)}
    note = "" if subset else f"no classes below baseline Dice {threshold}"
    return HardClassReport(threshold=threshold, subset=subset, names=[baseline.names[i] for i in picked], means=means, note=note)
