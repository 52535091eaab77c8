"""End-to-end command-line tests on small synthetic runs.

Training runs here use a 32x32 input so the whole file stays fast; the
checkpoint, record, and report formats are identical at every scale.
"""

import json

import numpy as np
import pytest

from tcnn.cli import main
from tcnn.model import load_checkpoint

TRAIN_ARGS = [
    "--size", "32", "--n", "80", "--epochs", "2", "--batch", "16",
    "--data-seed", "11",
]


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps({
        "dataset": {"n": 80, "size": 32},
        "model": {"input_size": 32},
        "train": {"epochs": 2, "batch_size": 16},
        "data_seed": 11,
    }))
    return str(path)


@pytest.fixture(scope="module")
def dense_run(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("dense")
    code = run(["train", "--config", config_file, "--seed", "1",
                "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def tucker_run(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("tucker")
    code = run(["train", "--config", config_file, "--seed", "1",
                "--ranks", "8,8,3,3", "--out", str(out)])
    assert code == 0
    return out


class TestGenerate:
    def test_writes_dataset_layout(self, tmp_path):
        out = tmp_path / "ds"
        code = run(["generate", "--n", "40", "--size", "32",
                    "--data-seed", "3", "--out", str(out)])
        assert code == 0
        index = (out / "index.csv").read_text().splitlines()
        assert index[0] == "relative_path,label,line_id,defect_kind,split"
        assert len(index) == 41
        splits = [line.split(",")[-1] for line in index[1:]]
        assert splits.count("train") == 32
        assert splits.count("val") == 4
        assert splits.count("test") == 4
        meta = json.loads((out / "generate.json").read_text())
        assert meta["split_sizes"] == {"train": 32, "val": 4, "test": 4}

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["generate", "--n", "30", "--size", "32",
                        "--data-seed", "9", "--out", str(out)]) == 0
        assert (a / "index.csv").read_bytes() == (b / "index.csv").read_bytes()
        for img in sorted(p.name for p in (a / "images").iterdir()):
            assert (a / "images" / img).read_bytes() == (b / "images" / img).read_bytes()


class TestTrain:
    def test_outputs_exist(self, dense_run):
        seed_dir = dense_run / "seed_1"
        assert (seed_dir / "checkpoint" / "manifest.json").exists()
        assert (seed_dir / "checkpoint" / "weights.bin").exists()
        assert (seed_dir / "record.jsonl").exists()
        assert (seed_dir / "timing.json").exists()
        assert (seed_dir / "report.json").exists()
        summary = json.loads((dense_run / "summary.json").read_text())
        assert summary["ranks"] is None
        assert summary["seeds"] == [1]
        assert summary["param_report"]["c_r"] == 1.0

    def test_record_has_one_line_per_epoch(self, dense_run):
        lines = (dense_run / "seed_1" / "record.jsonl").read_text().splitlines()
        assert len(lines) == 2
        entry = json.loads(lines[0])
        assert entry["epoch"] == 0
        assert entry["lr"] == 3e-4

    def test_checkpoint_reloads_and_reevaluates_identically(self, dense_run, config_file, tmp_path):
        out = tmp_path / "eval"
        code = run(["eval", str(dense_run / "seed_1" / "checkpoint"),
                    "--config", config_file, "--out", str(out)])
        assert code == 0
        rep = json.loads((out / "report.json").read_text())
        trained = json.loads((dense_run / "seed_1" / "report.json").read_text())
        assert rep["f1"] == trained["f1"]
        assert rep["confusion_matrix"] == trained["confusion_matrix"]
        assert (out / "report.txt").read_text().startswith("threshold")

    def test_multi_seed_summary_formatting(self, tmp_path, config_file):
        out = tmp_path / "multi"
        code = run(["train", "--config", config_file, "--seeds", "1,2",
                    "--out", str(out)])
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seeds"] == [1, 2]
        assert "±" in summary["test_metrics_formatted"]["f1"]
        assert len(summary["test_metrics"]["f1"]) == 2

    def test_tucker_ranks_reduce_stored_parameters(self, tucker_run, dense_run):
        tucker = json.loads((tucker_run / "summary.json").read_text())
        dense = json.loads((dense_run / "summary.json").read_text())
        assert tucker["ranks"] == [8, 8, 3, 3]
        assert tucker["param_report"]["n_c_f"] < dense["param_report"]["n_c_f"]
        assert tucker["param_report"]["c_r"] > 1.0


class TestDeterminism:
    def test_identical_seeds_identical_outputs(self, tmp_path, config_file):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["train", "--config", config_file, "--seed", "4",
                        "--out", str(out)]) == 0
        for rel in ("seed_4/checkpoint/weights.bin",
                    "seed_4/checkpoint/manifest.json",
                    "seed_4/record.jsonl",
                    "seed_4/report.json"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


class TestTensorize:
    def test_full_rank_predictions_match(self, dense_run, config_file, tmp_path):
        out = tmp_path / "tk"
        code = run(["tensorize", str(dense_run / "seed_1" / "checkpoint"),
                    "--ranks", "128,128,3,3", "--out", str(out)])
        assert code == 0
        dense = load_checkpoint(dense_run / "seed_1" / "checkpoint")
        tucker = load_checkpoint(out / "checkpoint")
        x = np.random.default_rng(0).standard_normal((8, 3, 32, 32)).astype(np.float32)
        a, b = dense.forward(x), tucker.forward(x)
        assert (a.argmax(1) == b.argmax(1)).all()
        report = json.loads((out / "param_report.json").read_text())
        assert len(report["per_layer"]) == 4
        assert all(p["ranks"] is not None for p in report["per_layer"])

    def test_rank_clamping_recorded(self, dense_run, tmp_path):
        out = tmp_path / "tk2"
        code = run(["tensorize", str(dense_run / "seed_1" / "checkpoint"),
                    "--ranks", "999,999,3,3", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "param_report.json").read_text())
        for layer in report["per_layer"]:
            c, w, t, h = layer["dims"]
            assert layer["ranks"][0] <= c and layer["ranks"][2] <= t

    def test_missing_ranks_is_config_error(self, dense_run, tmp_path, capsys):
        code = run(["tensorize", str(dense_run / "seed_1" / "checkpoint"),
                    "--out", str(tmp_path / "x")])
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert "model.ranks" in err["message"]


class TestBench:
    def test_latency_stats_and_ratio(self, dense_run, tmp_path):
        out = tmp_path / "bench"
        ckpt = str(dense_run / "seed_1" / "checkpoint")
        code = run(["bench", ckpt, "--batch", "8", "--repeats", "4",
                    "--baseline", ckpt, "--out", str(out)])
        assert code == 0
        payload = json.loads((out / "bench.json").read_text())
        assert payload["repeats"] == 4
        assert payload["warmup_runs"] == 3
        assert payload["min_ms"] <= payload["median_ms"]
        assert 0.5 < payload["latency_ratio"] < 2.0


class TestReport:
    def test_combined_table(self, dense_run, tucker_run, tmp_path):
        out = tmp_path / "rep"
        code = run(["report", str(dense_run), str(tucker_run),
                    "--out", str(out)])
        assert code == 0
        table = (out / "combined_table.txt").read_text()
        header = table.splitlines()[0].split()
        assert header[:5] == ["ranks", "precision", "recall", "f1", "compression"]
        assert "(8, 8, 3, 3)" in table
        combined = json.loads((out / "combined.json").read_text())
        assert len(combined["runs"]) == 2
        tucker_row = [r for r in combined["runs"] if r["ranks"] == [8, 8, 3, 3]][0]
        assert tucker_row["compression"] > 1.0

    def test_requires_dense_baseline(self, tucker_run, tmp_path, capsys):
        code = run(["report", str(tucker_run), "--out", str(tmp_path / "r")])
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert "baseline" in err["message"]


class TestConfigValidation:
    def test_unknown_key_fails_fast(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"trainn": {"epochs": 2}}))
        code = run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert "trainn" in err["message"]

    def test_invalid_value_names_key_path(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"train": {"epochs": 0}}))
        code = run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["message"].startswith("train.epochs")

    def test_bad_ranks_flag(self, tmp_path, capsys):
        code = run(["train", "--ranks", "1,2,3", "--out", str(tmp_path / "o")])
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert "--ranks" in err["message"]

    def test_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "dataset": {"n": 40, "size": 32},
            "model": {"input_size": 32},
            "train": {"epochs": 3, "batch_size": 16},
        }))
        out = tmp_path / "o"
        code = run(["train", "--config", str(cfg), "--epochs", "1",
                    "--out", str(out)])
        assert code == 0
        lines = (out / "seed_0" / "record.jsonl").read_text().splitlines()
        assert len(lines) == 1
