import json

import numpy as np
import pytest

from treeseg.cli import main
from treeseg.distances import distance_matrix
from treeseg.hierarchy import EdgeWeightScheme, assign_weights, parse_tree

from conftest import THREE_LEAF_DOC

EXP_CONFIG = {
    "loss": {"semantic": "wass", "scheme": "hier", "kappa": 10, "alpha": 0.5, "beta": 0.5, "seg": "ce"},
    "train": {"model": "linear", "lr": 0.05, "epochs": 4},
    "synth": {"n_subjects": 4, "height": 16, "width": 16, "channels": 4, "n_regions": 30, "sparsity": 0.8},
    "gate": {"level": "topmost"},
    "eval": {"levels": ["leaf", "topmost"]},
    "n_subject_folds": 2,
    "seed": 17,
}


@pytest.fixture
def hier_file(tmp_path):
    path = tmp_path / "hier.json"
    path.write_text(THREE_LEAF_DOC)
    return path


@pytest.fixture
def exp_file(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(EXP_CONFIG))
    return path


class TestTreeCommands:
    def test_check_valid_exits_zero(self, hier_file, capsys):
        assert main(["tree", "check", str(hier_file)]) == 0
        assert "OK" in capsys.readouterr().out

    def test_check_invalid_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"name": "r", "children": [{"name": "x"}, {"name": "x"}]}))
        assert main(["tree", "check", str(bad)]) == 1

    def test_check_missing_file_exits_one(self):
        assert main(["tree", "check", "/definitely/not/here.json"]) == 1

    def test_distmat_matches_library(self, hier_file, tmp_path):
        out = tmp_path / "m.csv"
        assert main(["tree", "distmat", str(hier_file), "--scheme", "hier", "--kappa", "2", "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        tree = parse_tree(hier_file.read_text())
        assert lines[0] == "," + ",".join(tree.leaf_names())
        m = distance_matrix(assign_weights(tree, EdgeWeightScheme("hier", kappa=2.0)))
        for i, line in enumerate(lines[1:]):
            cells = line.split(",")
            assert cells[0] == tree.leaf_names()[i]
            assert np.allclose([float(x) for x in cells[1:]], m[i])


class TestPipelineCommands:
    def test_synth_train_sweep_gate_eval(self, exp_file, tmp_path, capsys):
        corpus_dir = tmp_path / "corpus"
        assert main(["synth", "--config", str(exp_file), "--out", str(corpus_dir)]) == 0
        assert (corpus_dir / "hierarchy.json").exists()
        assert (corpus_dir / "folds.json").exists()
        assert (corpus_dir / "s000" / "features.bin").exists()

        model = tmp_path / "model.bin"
        assert main(["train", "--config", str(exp_file), "--out", str(model)]) == 0
        assert model.exists()

        curve = tmp_path / "curve.csv"
        assert main(["sweep", "--corpus", str(corpus_dir), "--model", str(model), "--l1", "--grid-step", "0.1", "--out", str(curve)]) == 0
        assert curve.read_text().startswith("tau,tpr,bacc,f1")
        assert "tau_m" in capsys.readouterr().out

        preds = tmp_path / "preds"
        assert main(["gate", "--corpus", str(corpus_dir), "--model", str(model), "--tau", "0.3", "--l1", "--out", str(preds)]) == 0
        assert (preds / "pred_s003.bin").exists()

        evald = tmp_path / "evald"
        assert main(["eval", "--corpus", str(corpus_dir), "--pred", str(preds), "--level", "topmost", "--out", str(evald)]) == 0
        report = json.loads((evald / "report.json").read_text())
        assert set(report["means"]) == {"dice", "tpr", "bacc", "f1", "nsd"}
        assert (evald / "confusion.csv").exists()

        conf = tmp_path / "conf.csv"
        assert main(["confusion", "--corpus", str(corpus_dir), "--pred", str(preds), "--level", "topmost", "--out", str(conf)]) == 0
        assert conf.read_text().splitlines()[0].startswith("true\\pred")

    def test_missing_pred_file_is_validation_error(self, exp_file, tmp_path):
        corpus_dir = tmp_path / "corpus"
        main(["synth", "--config", str(exp_file), "--out", str(corpus_dir)])
        empty = tmp_path / "nopreds"
        empty.mkdir()
        assert main(["eval", "--corpus", str(corpus_dir), "--pred", str(empty)]) == 1

    def test_bad_level_is_validation_error(self, exp_file, tmp_path):
        corpus_dir = tmp_path / "corpus"
        main(["synth", "--config", str(exp_file), "--out", str(corpus_dir)])
        model = tmp_path / "model.bin"
        main(["train", "--config", str(exp_file), "--out", str(model)])
        assert main(["sweep", "--corpus", str(corpus_dir), "--model", str(model), "--level", "nonsense"]) == 1


class TestRunAndCompare:
    def test_run_writes_full_experiment(self, exp_file, tmp_path, capsys):
        out = tmp_path / "run1"
        assert main(["run", "--config", str(exp_file), "--out", str(out)]) == 0
        for name in ("report.json", "report.txt", "confusion.csv", "manifest.json", "folds.json"):
            assert (out / name).exists(), name
        report = json.loads((out / "report.json").read_text())
        assert len(report["folds"]) == 2
        assert report["folds"][0]["swept"] is True
        assert (out / "fold_000" / "tau_curve.csv").exists()

    def test_rerun_is_byte_identical(self, exp_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(exp_file), "--out", str(a)])
        main(["run", "--config", str(exp_file), "--out", str(b)])
        assert (a / "manifest.json").read_text() == (b / "manifest.json").read_text()

    def test_fixed_tau_zero_equals_ungated_argmax_eval(self, tmp_path):
        cfg = dict(EXP_CONFIG)
        cfg["gate"] = {"level": "topmost", "tau": 0.0}
        cfg["fold_subset"] = [0]
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        assert main(["run", "--config", str(path), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        fold = report["folds"][0]
        assert fold["swept"] is False and fold["tau"] == 0.0
        # with tau = 0 nothing is gated away, so gated leaf Dice equals the
        # ungated argmax accuracy-style evaluation embedded in the report
        leaf = fold["levels"]["0"]
        assert leaf["means"]["tpr"] is not None

    def test_compare_reports(self, exp_file, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(exp_file), "--out", str(a)])
        cfg = dict(EXP_CONFIG)
        cfg["loss"] = {"semantic": "twce", "scheme": "equal", "alpha": 1.0, "beta": 0.0, "seg": "none"}
        other = tmp_path / "cfg2.json"
        other.write_text(json.dumps(cfg))
        main(["run", "--config", str(other), "--out", str(b)])
        out = tmp_path / "cmp"
        assert main(["compare", str(a), str(b), "--out", str(out)]) == 0
        table = capsys.readouterr().out
        assert "wass[hier10]+ce" in table
        assert "twce[equal]+none" in table
        assert (out / "comparison.csv").exists()
        assert (out / "comparison.txt").exists()

    def test_compare_identical_runs_zero_deltas(self, exp_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(exp_file), "--out", str(a)])
        main(["run", "--config", str(exp_file), "--out", str(b)])
        out = tmp_path / "cmp"
        main(["compare", str(a), str(b), "--out", str(out)])
        csv_lines = (out / "comparison.csv").read_text().strip().splitlines()
        deltas = csv_lines[-1].split(",")[1:]
        assert all(x == "" or abs(float(x)) == 0.0 for x in deltas)

    def test_compare_mismatched_corpora_exits_one(self, exp_file, tmp_path):
        a = tmp_path / "a"
        main(["run", "--config", str(exp_file), "--out", str(a)])
        cfg = dict(EXP_CONFIG)
        cfg["seed"] = 99  # different corpus
        other = tmp_path / "cfg3.json"
        other.write_text(json.dumps(cfg))
        b = tmp_path / "b"
        main(["run", "--config", str(other), "--out", str(b)])
        assert main(["compare", str(a), str(b)]) == 1

    def test_hierarchy_path_resolves_relative_to_config(self, tmp_path, monkeypatch):
        (tmp_path / "hier.json").write_text(THREE_LEAF_DOC)
        cfg = dict(EXP_CONFIG)
        cfg["hierarchy"] = "hier.json"
        cfg["synth"] = dict(cfg["synth"], n_regions=12)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        monkeypatch.chdir(tmp_path / "..")  # cwd differs from the config dir
        out = tmp_path / "run"
        assert main(["run", "--config", str(path), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["corpus"]["n_classes"] == 3

    def test_divergent_training_exits_two(self, tmp_path):
        cfg = dict(EXP_CONFIG)
        cfg["train"] = {"model": "linear", "lr": 1e308, "epochs": 8, "optimizer": "sgd"}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        with np.errstate(over="ignore", invalid="ignore"):
            assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == 2

    def test_seed_flag_overrides_config(self, exp_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(exp_file), "--out", str(a), "--seed", "123"])
        main(["run", "--config", str(exp_file), "--out", str(b)])
        ra = json.loads((a / "report.json").read_text())
        rb = json.loads((b / "report.json").read_text())
        assert ra["corpus"]["fingerprint"] != rb["corpus"]["fingerprint"]
