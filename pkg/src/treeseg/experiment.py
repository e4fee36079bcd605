"""End-to-end experiment runner: corpus -> folds -> train -> gate -> eval.

One config drives the whole pipeline. Per fold: train with the configured
loss, sweep (or fix) the background threshold on validation, gate, then
evaluate at the requested tree levels; finally fold-average metrics and
the top-level confusion matrix. Every emitted file lands in the output
directory and is listed with a content hash in manifest.json, so reruns
with the same seed are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .distances import distance_matrix
from .errors import ConfigError
from .evaluation import EvalReport, confusion, evaluate_level, level_classes, map_to_level, nanmean_axis0, nsd_scores
from .gating import ThresholdPolicy, default_grid, gate, sweep_tau
from .hierarchy import EdgeWeightScheme, LabelTree, assign_weights, parse_tree
from .losses import LossSpec
from .seeding import substream
from .synth import (
    Corpus,
    FoldSpec,
    SynthConfig,
    generate,
    l1_normalize,
    load_corpus,
    make_folds,
    save_folds,
    train_view,
    val_view,
    write_field,
)
from .training import TrainConfig, absorb_standardization, predict, train

# fixed yardstick for the tree distance of misclassified pixels, independent
# of the loss used for training
ERROR_METRIC_SCHEME = EdgeWeightScheme("hier", kappa=10.0)

PREPROC_KINDS = ("standardize", "l1", "none")


def fit_standardizer(train_feats: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all training pixels (std floored at tiny)."""
    stacked = np.concatenate([f.reshape(-1, f.shape[-1]) for f in train_feats])
    mu = stacked.mean(axis=0)
    sd = stacked.std(axis=0)
    return mu, np.where(sd > 0, sd, 1.0)


@dataclass
class ExperimentConfig:
    loss: LossSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig | None = None
    corpus_path: str | None = None
    gate_level: int | None = None  # None = topmost
    tau: float | None = None  # fixed threshold; None = sweep on validation
    grid_step: float = 0.01
    eval_levels: tuple = ("leaf", "topmost")
    nsd_tolerance: float | None = None
    preproc: str = "standardize"  # or "l1" (per-pixel norm) or "none"
    n_subject_folds: int = 2
    n_label_folds: int = 1
    fold_subset: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.synth is None and self.corpus_path is None:
            raise ConfigError("config needs either a synth block or a corpus path")
        if self.preproc not in PREPROC_KINDS:
            raise ConfigError(f"preproc must be one of {PREPROC_KINDS}, got {self.preproc!r}")


def loss_spec_from_dict(d: dict) -> LossSpec:
    scheme = EdgeWeightScheme(d.get("scheme", "equal"), kappa=float(d.get("kappa", 10.0)))
    return LossSpec(
        semantic=d.get("semantic", "wass"),
        scheme=scheme,
        seg=d.get("seg", "ce"),
        alpha=float(d.get("alpha", 0.5)),
        beta=float(d.get("beta", 0.5)),
    )


def config_from_dict(d: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from the JSON config file layout."""
    loss = loss_spec_from_dict(d.get("loss", {}))
    train_cfg = TrainConfig(**d.get("train", {}))
    synth_cfg = None
    if "synth" in d:
        synth_kwargs = dict(d["synth"])
        if "tree_branching" in synth_kwargs:
            synth_kwargs["tree_branching"] = tuple(synth_kwargs["tree_branching"])
        if "held_out" in synth_kwargs:
            synth_kwargs["held_out"] = tuple(synth_kwargs["held_out"])
        synth_cfg = SynthConfig(**synth_kwargs)
    hierarchy = d.get("hierarchy")
    if hierarchy is not None:
        path = Path(hierarchy)
        if not path.exists():
            raise ConfigError(f"hierarchy file {hierarchy} does not exist")
        tree = parse_tree(path.read_text())
        if synth_cfg is None:
            raise ConfigError("a hierarchy file requires a synth block to generate data for it")
        synth_cfg = replace(synth_cfg, tree=tree)
    corpus_path = d.get("corpus")
    if corpus_path is not None and not Path(corpus_path).exists():
        raise ConfigError(f"corpus path {corpus_path} does not exist")
    gate_block = d.get("gate", {})
    level = gate_block.get("level", "topmost")
    return ExperimentConfig(
        loss=loss,
        train=train_cfg,
        synth=synth_cfg,
        corpus_path=corpus_path,
        gate_level=None if level in ("topmost", None) else int(level),
        tau=gate_block.get("tau"),
        grid_step=float(gate_block.get("grid_step", 0.01)),
        eval_levels=tuple(d.get("eval", {}).get("levels", ("leaf", "topmost"))),
        nsd_tolerance=d.get("eval", {}).get("tolerance"),
        preproc=d.get("preproc", "standardize"),
        n_subject_folds=int(d.get("n_subject_folds", 2)),
        n_label_folds=int(d.get("n_label_folds", 1)),
        fold_subset=tuple(d["fold_subset"]) if "fold_subset" in d else None,
        seed=int(d.get("seed", 0)),
    )


def load_config(path: Path | str) -> ExperimentConfig:
    """Load a config file; relative file references resolve against it."""
    path = Path(path)
    data = json.loads(path.read_text())
    for key in ("hierarchy", "corpus"):
        if isinstance(data.get(key), str) and not Path(data[key]).is_absolute():
            data[key] = str(path.parent / data[key])
    return config_from_dict(data)


def resolve_level(tree: LabelTree, spec) -> int:
    if spec in ("leaf", 0):
        return 0
    if spec in ("topmost", None):
        return tree.levels - 1
    return int(spec)


def loss_label(spec: LossSpec) -> str:
    scheme = spec.scheme.kind + (f"{spec.scheme.kappa:g}" if spec.scheme.kind == "hier" else "")
    return f"{spec.semantic}[{scheme}]+{spec.seg}(a={spec.alpha:g};b={spec.beta:g})"


def corpus_fingerprint(corpus: Corpus) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(corpus.tree.to_dict(), sort_keys=True).encode())
    for sub in corpus.subjects:
        h.update(np.ascontiguousarray(sub.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(sub.truth, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(sub.mask, dtype="<i8").tobytes())
    return h.hexdigest()


def semantic_error_distance(m: np.ndarray, pred_codes: np.ndarray, truth_codes: np.ndarray) -> float | None:
    """Mean tree distance between predicted and true leaves over errors."""
    pred = np.asarray(pred_codes).reshape(-1)
    truth = np.asarray(truth_codes).reshape(-1)
    wrong = (truth > 0) & (pred > 0) & (pred != truth)
    if not wrong.any():
        return None
    return float(m[pred[wrong] - 1, truth[wrong] - 1].mean())


def _csv(rows: list[list], header: list[str]) -> str:
    def fmt(x):
        if isinstance(x, float):
            return f"{x:.10g}"
        return str(x)

    lines = [",".join(header)]
    lines.extend(",".join(fmt(x) for x in row) for row in rows)
    return "\n".join(lines) + "\n"


@dataclass
class FoldResult:
    fold: FoldSpec
    tau: float
    swept: bool
    curve: np.ndarray | None
    trace: list[float]
    leaf_accuracy: float
    error_distance: float | None
    reports: dict[int, EvalReport]
    pred_codes: list[np.ndarray]  # gated, per val subject
    truths: list[np.ndarray]
    domains: list[np.ndarray]


def run_fold(corpus: Corpus, fold: FoldSpec, config: ExperimentConfig) -> FoldResult:
    tree = corpus.tree
    raw_train = train_view(corpus, fold)
    if config.preproc == "l1":
        train_prep = infer_prep = l1_normalize
    elif config.preproc == "standardize":
        mu, sd = fit_standardizer([f for f, _ in raw_train])
        train_prep = lambda x: (x - mu) / sd
        infer_prep = lambda x: x  # standardization is folded into the model below
    else:
        train_prep = infer_prep = lambda x: x
    train_data = [(train_prep(f), m) for f, m in raw_train]
    train_cfg = replace(config.train, seed=int(substream(config.seed, "train", fold.index).integers(2**31)))
    params, trace = train(train_data, tree, config.loss, train_cfg)
    if config.preproc == "standardize":
        params = absorb_standardization(params, mu, sd)

    val = [(infer_prep(f), t, d) for f, t, d in val_view(corpus, fold)]
    probs = [predict(params, f) for f, _, _ in val]
    truths = [t for _, t, _ in val]
    domains = [d for _, _, d in val]

    k = resolve_level(tree, "topmost" if config.gate_level is None else config.gate_level)
    if config.tau is None:
        tau, curve = sweep_tau(tree, probs, truths, k, default_grid(config.grid_step))
        swept = True
    else:
        tau, curve, swept = float(config.tau), None, False
    policy = ThresholdPolicy(tau=tau, level=k)
    preds = [gate(tree, p, policy).labels for p in probs]

    pooled_pred = np.concatenate([p.reshape(-1) for p in preds])
    pooled_truth = np.concatenate([t.reshape(-1) for t in truths])
    pooled_domain = np.concatenate([d.reshape(-1) for d in domains])

    reports = {}
    for level_spec in config.eval_levels:
        level = resolve_level(tree, level_spec)
        rep = evaluate_level(tree, pooled_pred, pooled_truth, level, domain=pooled_domain)
        if config.nsd_tolerance is not None and all(np.all(t > 0) for t in truths):
            per_subject = [
                nsd_scores(map_to_level(tree, p, level), map_to_level(tree, t, level), rep.classes, config.nsd_tolerance)
                for p, t in zip(preds, truths)
            ]
            rep.nsd = nanmean_axis0(np.stack(per_subject))
            rep.nsd_tolerance = config.nsd_tolerance
        reports[level] = rep

    # ungated leaf argmax, for accuracy and the semantic distance of errors
    raw_codes = [np.argmax(p, axis=-1) + 1 for p in probs]
    pooled_raw = np.concatenate([r.reshape(-1) for r in raw_codes])
    fg = pooled_domain & (pooled_truth > 0)
    leaf_acc = float(np.mean(pooled_raw[fg] == pooled_truth[fg])) if fg.any() else float("nan")
    m_err = distance_matrix(assign_weights(tree, ERROR_METRIC_SCHEME))
    err_dist = semantic_error_distance(m_err, np.where(fg, pooled_raw, 0), np.where(fg, pooled_truth, 0))

    return FoldResult(
        fold=fold,
        tau=tau,
        swept=swept,
        curve=curve,
        trace=trace,
        leaf_accuracy=leaf_acc,
        error_distance=err_dist,
        reports=reports,
        pred_codes=preds,
        truths=truths,
        domains=domains,
    )


def _fold_dict(res: FoldResult) -> dict:
    return {
        "index": res.fold.index,
        "train_subjects": list(res.fold.train_subjects),
        "val_subjects": list(res.fold.val_subjects),
        "held_out": list(res.fold.held_out),
        "tau": res.tau,
        "swept": res.swept,
        "train_trace": [float(x) for x in res.trace],
        "leaf_accuracy": res.leaf_accuracy,
        "semantic_error_distance": res.error_distance,
        "levels": {str(level): rep.to_dict() for level, rep in res.reports.items()},
    }


def _mean_or_none(values) -> float | None:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and np.isnan(v))]
    return float(np.mean(vals)) if vals else None


def write_manifest(out: Path) -> None:
    entries = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    (out / "manifest.json").write_text(json.dumps({"files": entries}, indent=2, sort_keys=True))


def run_experiment(config: ExperimentConfig, out: Path | str, jobs: int = 1) -> Path:
    """Run the full pipeline and write reports; returns the output directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if config.corpus_path is not None:
        corpus = load_corpus(config.corpus_path)
    else:
        corpus = generate(replace(config.synth, seed=config.seed))
    folds = make_folds(corpus, config.n_subject_folds, config.n_label_folds)
    if config.fold_subset is not None:
        folds = [folds[i] for i in config.fold_subset]
    save_folds(folds, out / "folds.json")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda f: run_fold(corpus, f, config), folds))
    else:
        results = [run_fold(corpus, f, config) for f in folds]

    tree = corpus.tree
    for res in results:
        fold_dir = out / f"fold_{res.fold.index:03d}"
        fold_dir.mkdir(exist_ok=True)
        if res.curve is not None:
            fold_dir.joinpath("tau_curve.csv").write_text(_csv([list(row) for row in res.curve], ["tau", "tpr", "bacc", "f1"]))
        for subject, pred in zip(res.fold.val_subjects, res.pred_codes):
            write_field(fold_dir / f"pred_s{subject:03d}.bin", pred.astype(np.int64))

    top = tree.levels - 1
    conf = confusion(
        [np.concatenate([map_to_level(tree, p, top).reshape(-1) for p in r.pred_codes]) for r in results],
        [np.concatenate([map_to_level(tree, t, top).reshape(-1) for t in r.truths]) for r in results],
        level_classes(tree, top),
        domains=[np.concatenate([d.reshape(-1) for d in r.domains]) for r in results],
        include_background=True,
    )
    names = [tree.name_of(c - 1) if c else "background" for c in conf.classes]
    conf_rows = [[names[i]] + [x if not np.isnan(x) else "" for x in row] for i, row in enumerate(conf.averaged)]
    (out / "confusion.csv").write_text(_csv(conf_rows, ["true\\pred"] + names))

    levels_present = sorted({level for r in results for level in r.reports})
    means: dict = {"levels": {}}
    for level in levels_present:
        reps = [r.reports[level] for r in results if level in r.reports]
        means["levels"][str(level)] = {
            key: _mean_or_none([getattr(rep, f"mean_{key}") for rep in reps]) for key in ("dice", "tpr", "bacc", "f1", "nsd")
        }
    means["tau"] = _mean_or_none([r.tau for r in results])
    means["leaf_accuracy"] = _mean_or_none([r.leaf_accuracy for r in results])
    means["semantic_error_distance"] = _mean_or_none([r.error_distance for r in results])

    report = {
        "loss_label": loss_label(config.loss),
        "corpus": {
            "fingerprint": corpus_fingerprint(corpus),
            "n_subjects": len(corpus.subjects),
            "n_classes": corpus.n_classes,
            "levels": tree.levels,
        },
        "fold_structure": [[list(f.train_subjects), list(f.val_subjects), list(f.held_out)] for f in folds],
        "folds": [_fold_dict(r) for r in results],
        "means": means,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out / "report.txt").write_text(render_report(report))
    write_manifest(out)
    return out


def render_report(report: dict) -> str:
    lines = [f"loss: {report['loss_label']}", f"corpus: {report['corpus']['n_subjects']} subjects, {report['corpus']['n_classes']} classes"]
    header = f"{'level':>8} {'dice':>8} {'tpr':>8} {'bacc':>8} {'f1':>8} {'nsd':>8}"
    lines.append(header)

    def cell(v):
        return f"{v:8.4f}" if v is not None else f"{'-':>8}"

    for level, m in sorted(report["means"]["levels"].items(), key=lambda kv: int(kv[0])):
        lines.append(f"{level:>8} " + " ".join(cell(m[k]) for k in ("dice", "tpr", "bacc", "f1", "nsd")))
    lines.append(f"mean tau: {report['means']['tau']}")
    lines.append(f"leaf accuracy (ungated): {report['means']['leaf_accuracy']}")
    lines.append(f"tree distance of errors: {report['means']['semantic_error_distance']}")
    return "\n".join(lines) + "\n"


def compare(report_paths: list[Path | str], out: Path | str | None = None) -> str:
    """Side-by-side comparison of runs over the same corpus and folds.

    Emits a CSV and an aligned text table (per-metric columns, deltas vs
    the first report, tree distance of errors per method).
    """
    if len(report_paths) < 2:
        raise ConfigError("compare needs at least 2 reports")
    reports = []
    for p in report_paths:
        path = Path(p)
        if path.is_dir():
            path = path / "report.json"
        reports.append(json.loads(path.read_text()))
    base = reports[0]
    for rep in reports[1:]:
        if rep["corpus"]["fingerprint"] != base["corpus"]["fingerprint"]:
            raise ConfigError("reports were produced on different corpora")
        if rep["fold_structure"] != base["fold_structure"]:
            raise ConfigError("reports were produced with different fold structures")

    metrics = []
    for level in sorted(base["means"]["levels"], key=int):
        for key in ("dice", "tpr", "bacc", "f1", "nsd"):
            if any(r["means"]["levels"].get(level, {}).get(key) is not None for r in reports):
                metrics.append((f"L{level}_{key}", lambda r, lv=level, k=key: r["means"]["levels"][lv][k]))
    metrics.append(("leaf_accuracy", lambda r: r["means"]["leaf_accuracy"]))
    metrics.append(("error_tree_distance", lambda r: r["means"]["semantic_error_distance"]))

    header = ["method"] + [name for name, _ in metrics]
    rows = []
    for rep in reports:
        rows.append([rep["loss_label"]] + [get(rep) if get(rep) is not None else "" for _, get in metrics])
    delta_rows = []
    for rep in reports[1:]:
        deltas = [rep["loss_label"] + " - " + base["loss_label"]]
        for _, get in metrics:
            a, b = get(rep), get(base)
            deltas.append(a - b if a is not None and b is not None else "")
        delta_rows.append(deltas)
    csv_text = _csv(rows + delta_rows, header)

    widths = [max(len(str(header[i])), *(len(_fmt_cell(r[i])) for r in rows + delta_rows)) for i in range(len(header))]
    text_lines = [" ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    for r in rows + delta_rows:
        text_lines.append(" ".join(_fmt_cell(x).ljust(widths[i]) for i, x in enumerate(r)))
    table = "\n".join(text_lines) + "\n"
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(csv_text)
        (out / "comparison.txt").write_text(table)
    return table


def _fmt_cell(x) -> str:
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)
