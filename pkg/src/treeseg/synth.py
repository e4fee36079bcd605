"""Synthetic segmentation corpora whose features respect the label tree.

Class-conditional feature means are drawn by a root-to-leaf random walk
with geometrically shrinking steps, so leaves that are close in the tree
get close means and expected feature distance correlates with tree
distance. Images are Voronoi partitions with one leaf class per region;
sparse positive-only masks keep a fraction of each region's pixels.

Corpora are bit-reproducible: every subject draws from an RNG substream
keyed by (seed, subject index), so generation order and parallelism
cannot change the output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .hierarchy import LabelTree, parse_tree, random_tree, serialize
from .seeding import substream


@dataclass
class SynthConfig:
    """Corpus generation parameters; tree=None samples a random hierarchy."""

    tree: LabelTree | None = None
    tree_depth: int = 3
    tree_branching: tuple[int, int] = (2, 3)
    n_subjects: int = 16
    height: int = 64
    width: int = 64
    channels: int = 16
    n_regions: int = 48
    sigma_between: float = 1.0
    sigma_within: float = 0.35
    level_decay: float = 0.5  # walk step shrink factor per level away from the root
    sparsity: float = 1.0  # fraction of each region's pixels that stays annotated
    held_out: tuple[int, ...] = ()  # class codes never annotated anywhere
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ConfigError(f"sparsity must be in [0, 1], got {self.sparsity}")
        if self.sigma_between <= 0 or self.sigma_within <= 0:
            raise ConfigError("sigma_between and sigma_within must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tree"] = None if self.tree is None else self.tree.to_dict()
        return d


@dataclass
class Subject:
    features: np.ndarray  # (H, W, d) float
    truth: np.ndarray  # (H, W) leaf codes 1..C
    mask: np.ndarray  # (H, W) codes, 0 = unannotated


@dataclass
class Corpus:
    tree: LabelTree
    subjects: list[Subject]
    config: SynthConfig

    @property
    def n_classes(self) -> int:
        return self.tree.n_leaves


@dataclass(frozen=True)
class FoldSpec:
    index: int
    train_subjects: tuple[int, ...]
    val_subjects: tuple[int, ...]
    held_out: tuple[int, ...]  # class codes hidden from training in this fold


def class_means(tree: LabelTree, channels: int, sigma_between: float, level_decay: float, rng: np.random.Generator) -> np.ndarray:
    """Leaf feature means from a root-to-leaf Gaussian walk, (C, d)."""
    means = {tree.root: np.zeros(channels)}
    for v in tree.deepest_first()[::-1]:  # parents first
        if v == tree.root:
            continue
        parent = tree.parent[v]
        step = sigma_between * level_decay ** tree.depth[parent]
        means[v] = means[parent] + step * rng.standard_normal(channels)
    return np.stack([means[leaf] for leaf in range(tree.n_leaves)])


def _voronoi_regions(height: int, width: int, n_regions: int, rng: np.random.Generator) -> np.ndarray:
    seeds = np.column_stack([rng.uniform(0, height, n_regions), rng.uniform(0, width, n_regions)])
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    return np.argmin(d2, axis=-1)


def generate(config: SynthConfig) -> Corpus:
    """Generate a corpus; deterministic given config.seed."""
    tree = config.tree or random_tree(substream(config.seed, "tree"), config.tree_depth, config.tree_branching)
    n_classes = tree.n_leaves
    if config.n_regions < n_classes:
        raise ConfigError(f"n_regions={config.n_regions} cannot cover {n_classes} classes")
    if config.sparsity == 0.0:
        raise ConfigError("sparsity=0 would leave no annotated pixels")
    bad = [c for c in config.held_out if not 1 <= c <= n_classes]
    if bad:
        raise ConfigError(f"held_out codes {bad} outside 1..{n_classes}")

    means = class_means(tree, config.channels, config.sigma_between, config.level_decay, substream(config.seed, "means"))

    subjects = []
    for s in range(config.n_subjects):
        rng = substream(config.seed, "subject", s)
        regions = _voronoi_regions(config.height, config.width, config.n_regions, rng)
        region_class = np.concatenate(
            [
                rng.permutation(n_classes) + 1,  # every class gets at least one region
                rng.integers(1, n_classes + 1, config.n_regions - n_classes),
            ]
        )
        truth = region_class[regions]
        noise = rng.standard_normal((config.height, config.width, config.channels))
        features = means[truth - 1] + config.sigma_within * noise
        features = features - features.min()  # reflectance-like: nonnegative

        mask = np.zeros_like(truth)
        flat_regions = regions.reshape(-1)
        flat_mask = mask.reshape(-1)
        for r in range(config.n_regions):
            code = int(region_class[r])
            if code in config.held_out:
                continue
            pix = np.flatnonzero(flat_regions == r)
            n_keep = max(1, int(round(config.sparsity * pix.size)))
            keep = pix if n_keep >= pix.size else rng.choice(pix, size=n_keep, replace=False)
            flat_mask[keep] = code
        subjects.append(Subject(features=features, truth=truth, mask=mask))
    return Corpus(tree=tree, subjects=subjects, config=config)


def l1_normalize(image: np.ndarray) -> np.ndarray:
    """Divide each spatial location's channel vector by its l1 norm.

    Zero vectors are left untouched; the operation is idempotent.
    """
    image = np.asarray(image, dtype=float)
    norm = np.abs(image).sum(axis=-1, keepdims=True)
    return np.divide(image, norm, out=image.copy(), where=norm > 0)


def make_folds(corpus: Corpus, n_subject_folds: int, n_label_folds: int = 1) -> list[FoldSpec]:
    """Cross product of subject folds and held-out label subsets.

    With one label fold no classes are held out (plain k-fold CV). With
    more, the positive classes are round-robin partitioned and each label
    fold hides one part from training; those classes become
    pseudo-background in validation.
    """
    n = len(corpus.subjects)
    if n < 2:
        raise ConfigError("need at least 2 subjects to fold")
    if not 2 <= n_subject_folds <= n:
        raise ConfigError(f"n_subject_folds={n_subject_folds} infeasible for {n} subjects")
    available = [c for c in range(1, corpus.n_classes + 1) if c not in corpus.config.held_out]
    if n_label_folds < 1 or (n_label_folds > 1 and n_label_folds > len(available) - 1):
        raise ConfigError(f"n_label_folds={n_label_folds} infeasible for {len(available)} classes")

    label_folds: list[tuple[int, ...]]
    if n_label_folds == 1:
        label_folds = [()]
    else:
        label_folds = [tuple(available[j::n_label_folds]) for j in range(n_label_folds)]

    folds = []
    for sf in range(n_subject_folds):
        val = tuple(i for i in range(n) if i % n_subject_folds == sf)
        train = tuple(i for i in range(n) if i % n_subject_folds != sf)
        for held in label_folds:
            folds.append(FoldSpec(index=len(folds), train_subjects=train, val_subjects=val, held_out=held))
    return folds


def train_view(corpus: Corpus, fold: FoldSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """(features, mask) pairs for training; fold-held-out codes are unannotated."""
    out = []
    for i in fold.train_subjects:
        sub = corpus.subjects[i]
        mask = sub.mask.copy()
        if fold.held_out:
            mask[np.isin(mask, fold.held_out)] = 0
        out.append((sub.features, mask))
    return out


def val_view(corpus: Corpus, fold: FoldSpec) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(features, eval_truth, domain) triples for validation.

    The domain is every sparsely annotated pixel; truth codes of fold-
    held-out classes are remapped to 0 so they evaluate as background.
    """
    out = []
    for i in fold.val_subjects:
        sub = corpus.subjects[i]
        domain = sub.mask > 0
        truth = sub.mask.copy()
        if fold.held_out:
            truth[np.isin(truth, fold.held_out)] = 0
        out.append((sub.features, truth, domain))
    return out


# --- disk format ----------------------------------------------------------
#
# One directory per subject: features.bin (float64), labels.bin and
# mask.bin (int64). Each file starts with an ASCII header line "H W d\n"
# followed by the row-major little-endian payload; label fields use d = 1.
# The corpus root holds hierarchy.json, corpus.json and (optionally)
# folds.json.


def write_field(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    h, w = arr.shape[0], arr.shape[1]
    d = arr.shape[2] if arr.ndim == 3 else 1
    dtype = "<f8" if arr.dtype.kind == "f" else "<i8"
    with open(path, "wb") as f:
        f.write(f"{h} {w} {d}\n".encode("ascii"))
        f.write(arr.astype(dtype).tobytes())


def read_field(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) != 3:
            raise ParseError(f"{path}: malformed field header")
        h, w, d = (int(x) for x in header)
        kind = "<f8" if path.name.startswith("features") else "<i8"
        arr = np.frombuffer(f.read(), dtype=kind)
    if arr.size != h * w * d:
        raise ParseError(f"{path}: payload size {arr.size} != {h}*{w}*{d}")
    return arr.reshape((h, w, d) if d > 1 else (h, w)).copy()


def save_corpus(corpus: Corpus, root: Path | str) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "hierarchy.json").write_text(serialize(corpus.tree))
    meta = corpus.config.to_dict()
    meta.pop("tree")
    (root / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for i, sub in enumerate(corpus.subjects):
        d = root / f"s{i:03d}"
        d.mkdir(exist_ok=True)
        write_field(d / "features.bin", sub.features)
        write_field(d / "labels.bin", sub.truth)
        write_field(d / "mask.bin", sub.mask)
    return root


def load_corpus(root: Path | str) -> Corpus:
    root = Path(root)
    tree = parse_tree((root / "hierarchy.json").read_text())
    meta = json.loads((root / "corpus.json").read_text())
    meta["tree_branching"] = tuple(meta.get("tree_branching", (2, 3)))
    meta["held_out"] = tuple(meta.get("held_out", ()))
    config = SynthConfig(tree=tree, **meta)
    subjects = []
    for d in sorted(root.glob("s[0-9][0-9][0-9]")):
        subjects.append(
            Subject(
                features=read_field(d / "features.bin"),
                truth=read_field(d / "labels.bin"),
                mask=read_field(d / "mask.bin"),
            )
        )
    if not subjects:
        raise ConfigError(f"{root} holds no subject directories")
    return Corpus(tree=tree, subjects=subjects, config=config)


def save_folds(folds: list[FoldSpec], path: Path | str) -> None:
    data = [
        {"index": f.index, "train_subjects": list(f.train_subjects), "val_subjects": list(f.val_subjects), "held_out": list(f.held_out)}
        for f in folds
    ]
    Path(path).write_text(json.dumps({"folds": data}, indent=2, sort_keys=True))


def load_folds(path: Path | str) -> list[FoldSpec]:
    data = json.loads(Path(path).read_text())
    return [
        FoldSpec(
            index=f["index"],
            train_subjects=tuple(f["train_subjects"]),
            val_subjects=tuple(f["val_subjects"]),
            held_out=tuple(f["held_out"]),
        )
        for f in data["folds"]
    ]
