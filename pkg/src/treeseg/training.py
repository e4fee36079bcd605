"""Desk-scale per-pixel classifiers trained with the semantic losses.

Models map d-channel pixel features to C leaf logits: either a linear
softmax classifier or a one-hidden-layer tanh MLP. Training is mini-batch
gradient descent where a batch is the annotated pixels of a few whole
images. Only annotated pixels ever enter the computation, which makes the
positive-only contract (unannotated pixels cannot influence parameters)
hold bitwise by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, EmptyMaskError, ShapeError
from .hierarchy import LabelTree
from .losses import LossSpec, make_loss, softmax
from .seeding import substream

MODEL_KINDS = ("linear", "mlp")


@dataclass
class TrainConfig:
    model: str = "linear"
    hidden: int = 32  # mlp only
    lr: float = 1e-3
    gamma: float = 0.999  # exponential per-epoch lr decay
    batch_size: int = 5  # whole images per optimizer step
    epochs: int = 50
    optimizer: str = "adam"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    augment: bool = False  # horizontal/vertical flips
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must be in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


@dataclass
class ModelParams:
    """Flat parameter container; ``arrays`` order is fixed per model kind."""

    kind: str
    arrays: list[np.ndarray]  # linear: [W(d,C), b(C)]; mlp: [W1(d,h), b1(h), W2(h,C), b2(C)]

    @property
    def in_dim(self) -> int:
        return self.arrays[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.arrays[-1].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, [a.copy() for a in self.arrays])


def init_params(kind: str, in_dim: int, n_classes: int, hidden: int, rng: np.random.Generator) -> ModelParams:
    if kind == "linear":
        arrays = [0.01 * rng.standard_normal((in_dim, n_classes)), np.zeros(n_classes)]
    else:
        arrays = [
            rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim),
            np.zeros(hidden),
            rng.standard_normal((hidden, n_classes)) / np.sqrt(hidden),
            np.zeros(n_classes),
        ]
    return ModelParams(kind, arrays)


def _forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    if params.kind == "linear":
        w, b = params.arrays
        return x @ w + b, None
    w1, b1, w2, b2 = params.arrays
    hidden = np.tanh(x @ w1 + b1)
    return hidden @ w2 + b2, hidden


def _backward(params: ModelParams, x: np.ndarray, hidden: np.ndarray | None, grad_logits: np.ndarray) -> list[np.ndarray]:
    if params.kind == "linear":
        return [x.T @ grad_logits, grad_logits.sum(axis=0)]
    w2 = params.arrays[2]
    grad_hidden = (grad_logits @ w2.T) * (1.0 - hidden * hidden)
    return [x.T @ grad_hidden, grad_hidden.sum(axis=0), hidden.T @ grad_logits, grad_logits.sum(axis=0)]


def absorb_standardization(params: ModelParams, mu: np.ndarray, sd: np.ndarray) -> ModelParams:
    """Fold an affine input transform x -> (x - mu) / sd into the first layer.

    The returned model acts on raw features exactly as the original acted
    on standardized ones, so per-channel standardization never needs to be
    stored alongside the model file.
    """
    out = params.copy()
    w = out.arrays[0]
    b = out.arrays[1]
    scaled = w / sd[:, None]
    out.arrays[0] = scaled
    out.arrays[1] = b - mu @ scaled
    return out


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Per-pixel softmax leaf probabilities, same leading shape as the input."""
    features = np.asarray(features, dtype=float)
    if features.shape[-1] != params.in_dim:
        raise ShapeError(f"model expects {params.in_dim} channels, got {features.shape[-1]}")
    flat = features.reshape(-1, params.in_dim)
    logits, _ = _forward(params, flat)
    return softmax(logits).reshape(*features.shape[:-1], params.n_classes)


def _flip(arr: np.ndarray, flip_h: bool, flip_v: bool) -> np.ndarray:
    if flip_v:
        arr = arr[::-1]
    if flip_h:
        arr = arr[:, ::-1]
    return arr


def train(
    subjects: Sequence[tuple[np.ndarray, np.ndarray]],
    tree: LabelTree,
    spec: LossSpec | Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]],
    config: TrainConfig,
) -> tuple[ModelParams, list[float]]:
    """Train on (features, mask) images; returns (params, per-epoch loss trace).

    ``spec`` is normally a LossSpec; passing a callable ``(logits, target)
    -> (loss, grad)`` directly is supported for experiments. The loss sees
    only annotated pixels. Deterministic given config.seed.
    """
    if not subjects:
        raise EmptyMaskError("no training subjects")
    loss_fn = spec if callable(spec) else make_loss(tree, spec)
    if isinstance(spec, LossSpec) and spec.seg == "dice_ce" and any(np.any(m == 0) for _, m in subjects):
        raise ConfigError("seg='dice_ce' requires dense masks")

    def annotated(features: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        keep = mask.reshape(-1) > 0
        return features.reshape(-1, features.shape[-1])[keep], mask.reshape(-1)[keep]

    static = [annotated(f, m) for f, m in subjects]
    if sum(y.size for _, y in static) == 0:
        raise EmptyMaskError("training fold has no annotated pixels")

    in_dim = subjects[0][0].shape[-1]
    params = init_params(config.model, in_dim, tree.n_leaves, config.hidden, substream(config.seed, "init"))
    slots = [np.zeros_like(a) for a in params.arrays]  # adam m / sgd velocity
    second = [np.zeros_like(a) for a in params.arrays]  # adam v
    step = 0
    trace: list[float] = []

    for epoch in range(config.epochs):
        rng = substream(config.seed, "epoch", epoch)
        order = rng.permutation(len(subjects))
        if config.augment:
            flips = rng.random((len(subjects), 2)) < 0.5
            pool = []
            for i in range(len(subjects)):
                f, m = subjects[i]
                fh, fv = flips[i]
                pool.append(annotated(_flip(f, fh, fv), _flip(m, fh, fv)))
        else:
            pool = static
        lr = config.lr * config.gamma**epoch
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            chosen = order[start : start + config.batch_size]
            x = np.concatenate([pool[i][0] for i in chosen])
            y = np.concatenate([pool[i][1] for i in chosen])
            if y.size == 0:
                continue
            logits, hidden = _forward(params, x)
            loss, grad_logits = loss_fn(logits, y)
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            grads = _backward(params, x, hidden, grad_logits)
            step += 1
            for a, g, m1, m2 in zip(params.arrays, grads, slots, second):
                if config.optimizer == "adam":
                    m1 *= config.beta1
                    m1 += (1 - config.beta1) * g
                    m2 *= config.beta2
                    m2 += (1 - config.beta2) * g * g
                    mhat = m1 / (1 - config.beta1**step)
                    vhat = m2 / (1 - config.beta2**step)
                    a -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)
                else:
                    m1 *= config.momentum
                    m1 += g
                    a -= lr * m1
            batch_losses.append(loss)
        trace.append(float(np.mean(batch_losses)))
    return params, trace


# --- model file format ------------------------------------------------------
#
# ASCII header line "kind d C [hidden]\n" followed by the parameter arrays
# in fixed order, float64 little-endian.


def save_model(params: ModelParams, path: Path | str) -> None:
    with open(path, "wb") as f:
        if params.kind == "linear":
            f.write(f"linear {params.in_dim} {params.n_classes}\n".encode("ascii"))
        else:
            f.write(f"mlp {params.in_dim} {params.n_classes} {params.arrays[0].shape[1]}\n".encode("ascii"))
        for a in params.arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path: Path | str) -> ModelParams:
    with open(path, "rb") as f:
        parts = f.readline().decode("ascii").split()
        kind = parts[0]
        if kind == "linear":
            d, c = int(parts[1]), int(parts[2])
            shapes = [(d, c), (c,)]
        elif kind == "mlp":
            d, c, h = int(parts[1]), int(parts[2]), int(parts[3])
            shapes = [(d, h), (h,), (h, c), (c,)]
        else:
            raise ShapeError(f"unknown model kind {kind!r}")
        payload = np.frombuffer(f.read(), dtype="<f8")
    arrays = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(payload[offset : offset + size].reshape(shape).copy())
        offset += size
    if offset != payload.size:
        raise ShapeError(f"{path}: payload size {payload.size} != expected {offset}")
    return ModelParams(kind, arrays)
