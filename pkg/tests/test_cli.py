import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from signxai.cli import main, report_rows
from signxai.dataset import export_synthetic, generate_synthetic
from signxai.evaluation import confusion_matrix, metrics_report
from signxai.manifest import RunManifest


def run(*argv, expect=0):
    code = main([str(a) for a in argv])
    assert code == expect, f"signxai {' '.join(map(str, argv))} exited {code}"
    return code


def _npz_arrays(path):
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    run("prepare", "--synthetic", 10, 100, "--seed", 1, "--out", out, "--run-id", "a")
    run_dir = out / "a"
    run("train", run_dir, "--arch", "tiny", "--epochs", 3)
    run("evaluate", run_dir)
    return run_dir


def test_prepare_counts_and_determinism(tmp_path):
    run("prepare", "--synthetic", 10, 100, "--seed", 4, "--out", tmp_path, "--run-id", "x")
    run("prepare", "--synthetic", 10, 100, "--seed", 4, "--out", tmp_path, "--run-id", "y")
    manifest = RunManifest.load(tmp_path / "x")
    assert manifest.dataset["counts"] == {"train": 700, "val": 150, "test": 150}
    assert (tmp_path / "x" / "split.json").read_bytes() == (tmp_path / "y" / "split.json").read_bytes()


def test_prepare_directory_dataset(tmp_path):
    export_synthetic(generate_synthetic(3, 10, side=20, seed=0), tmp_path / "data")
    run("prepare", tmp_path / "data", "--out", tmp_path / "runs", "--run-id", "d")
    manifest = RunManifest.load(tmp_path / "runs" / "d")
    assert manifest.dataset["source"] == "directory"
    assert manifest.dataset["class_names"] == ["0", "1", "2"]


def test_prepare_without_source_is_config_error(tmp_path):
    run("prepare", "--out", tmp_path, expect=2)


def test_prepare_empty_class_is_data_error(tmp_path):
    export_synthetic(generate_synthetic(2, 3, side=8, seed=0), tmp_path / "data")
    (tmp_path / "data" / "zzz").mkdir()
    run("prepare", tmp_path / "data", "--out", tmp_path / "runs", expect=3)


def test_zero_epochs_and_recorded_defaults(tmp_path):
    run("prepare", "--synthetic", 3, 10, "--side", 75, "--out", tmp_path, "--run-id", "z")
    run_dir = tmp_path / "z"
    run("train", run_dir, "--arch", "tiny", "--epochs", 0)
    assert json.loads((run_dir / "history.json").read_text())["records"] == []
    cfg = RunManifest.load(run_dir).train_config
    assert (cfg["learning_rate"], cfg["batch_size"], cfg["dropout_rate"], cfg["label_smoothing"]) == \
        (1e-4, 128, 0.5, 0.0)
    assert cfg["epochs"] == 0


def test_default_epoch_budget():
    from signxai.cli import build_parser
    from signxai.training import TrainConfig

    args = build_parser().parse_args(["train", "somewhere"])
    assert args.epochs is None and args.arch == "resnet50" and args.weights == "imagenet"
    assert TrainConfig().epochs == 50


def test_unknown_architecture_exit_code(tmp_path):
    run("prepare", "--synthetic", 3, 10, "--out", tmp_path, "--run-id", "u")
    run("train", tmp_path / "u", "--arch", "alexnet", "--epochs", 0, expect=2)


def test_missing_manifest_is_io_error(tmp_path):
    run("evaluate", tmp_path / "nothing", expect=5)


def test_config_file_is_applied(tmp_path):
    run("prepare", "--synthetic", 3, 10, "--out", tmp_path, "--run-id", "c")
    ini = tmp_path / "t.ini"
    ini.write_text("[train]\nlearning_rate = 0.002\nbatch_size = 16\n")
    run("train", tmp_path / "c", "--arch", "tiny", "--epochs", 1, "--config", ini)
    cfg = RunManifest.load(tmp_path / "c").train_config
    assert (cfg["learning_rate"], cfg["batch_size"], cfg["epochs"]) == (0.002, 16, 1)


def test_evaluate_matches_oracle_on_persisted_predictions(trained_run):
    with open(trained_run / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 150
    y_true = [int(r["y_true"]) for r in rows]
    y_pred = [int(r["y_pred"]) for r in rows]
    expected = metrics_report(confusion_matrix(y_true, y_pred, 10)).to_dict()
    got = json.loads((trained_run / "metrics.json").read_text())
    assert got["accuracy"] == expected["accuracy"]
    assert got["aggregates"] == expected["aggregates"]
    with open(trained_run / "confusion.csv") as fh:
        body = [list(map(int, r[1:])) for r in list(csv.reader(fh))[1:]]
    assert body == confusion_matrix(y_true, y_pred, 10).counts.tolist()


def test_trained_run_learns(trained_run):
    assert json.loads((trained_run / "metrics.json").read_text())["accuracy"] >= 0.9


def test_majority_class_dummy_head(tmp_path):
    from signxai.models import load_checkpoint, save_checkpoint

    data = tmp_path / "data"
    export_synthetic(generate_synthetic(3, 20, side=16, seed=0), data)
    for name, keep in (("1", 10), ("2", 7)):
        for p in sorted((data / name).iterdir())[keep:]:
            p.unlink()
    run("prepare", data, "--out", tmp_path / "runs", "--run-id", "m")
    run_dir = tmp_path / "runs" / "m"
    run("train", run_dir, "--arch", "tiny", "--epochs", 0)

    handle = load_checkpoint(run_dir / "checkpoint")
    weights = handle.head.get_weights()
    weights[-2][:] = 0.0
    weights[-1][:] = [5.0, 0.0, 0.0]  # always predict class 0
    handle.head.set_weights(weights)
    save_checkpoint(handle, run_dir / "checkpoint")
    run("evaluate", run_dir)

    counts = RunManifest.load(run_dir).dataset["counts"]
    test_labels = [int(r["y_true"]) for r in csv.DictReader(open(run_dir / "predictions.csv"))]
    assert len(test_labels) == counts["test"]
    share = np.bincount(test_labels).max() / len(test_labels)
    assert json.loads((run_dir / "metrics.json").read_text())["accuracy"] == pytest.approx(share, abs=1e-12)


def test_explain_all_classes(trained_run):
    args = ("explain", trained_run, "--index", 0, "--classes", "all", "--samples", 20, "--background", 10)
    run(*args)
    out = trained_run / "explain" / "test00000"
    assert len(list(out.glob("overlay_class_*.png"))) == 10
    sidecars = sorted(out.glob("class_*.json"))
    assert len(sidecars) == 10
    for s in sidecars:
        doc = json.loads(s.read_text())
        assert {"residual", "base_value", "explained_output", "passed"} <= set(doc)
    first = _npz_arrays(out / "class_3.npz")["values"]
    run(*args)
    assert np.array_equal(first, _npz_arrays(out / "class_3.npz")["values"])


def test_explain_single_class_and_image(trained_run):
    manifest = RunManifest.load(trained_run)
    image = trained_run / "data" / "2" / "2_00000.png"
    run("explain", trained_run, "--image", image, "--classes", 2, "--samples", 100, "--background", 20)
    assert (trained_run / "explain" / "2_00000" / "class_2.npz").exists()
    assert RunManifest.load(trained_run).explain["n_samples"] == 100
    assert manifest.run_id == "a"


def test_explain_additivity_warning_exit(trained_run):
    # a single path sample cannot meet a 1e-6 relative tolerance
    run("explain", trained_run, "--index", 1, "--classes", 0, "--samples", 1, "--background", 3,
        "--tol", 1e-6, "--floor", 1e-8, expect=6)
    doc = json.loads((trained_run / "explain" / "test00001" / "class_0.json").read_text())
    assert doc["passed"] is False


@pytest.mark.parametrize("classes", ["10", "dog"])
def test_explain_bad_class(trained_run, classes):
    run("explain", trained_run, "--index", 0, "--classes", classes, expect=2)


def test_report_single_run(trained_run, tmp_path):
    run("report", trained_run, "--out", tmp_path / "table")
    rows = report_rows([trained_run])
    assert len(rows) == 1
    metrics = json.loads((trained_run / "metrics.json").read_text())
    assert rows[0]["Test Accuracy"] == metrics["accuracy"]
    assert rows[0]["Precision"] == metrics["aggregates"]["weighted"]["precision"]
    assert rows[0]["Algorithm"] == "tiny"
    with open(tmp_path / "table.csv") as fh:
        assert float(next(csv.DictReader(fh))["F1 Score"]) == metrics["aggregates"]["weighted"]["f1"]
    assert "| tiny |" in (tmp_path / "table.md").read_text()


def test_report_dangling_artifact(tmp_path):
    run("prepare", "--synthetic", 3, 10, "--out", tmp_path, "--run-id", "r")
    manifest = RunManifest.load(tmp_path / "r")
    manifest.artifacts["metrics"] = "metrics.json"
    manifest.save(tmp_path / "r")
    run("report", tmp_path / "r", expect=3)


def test_module_help():
    out = subprocess.run([sys.executable, "-m", "signxai", "--help"], capture_output=True, text=True, timeout=120)
    assert out.returncode == 0
    for command in ("prepare", "train", "evaluate", "explain", "report"):
        assert command in out.stdout
