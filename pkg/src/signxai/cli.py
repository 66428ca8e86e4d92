"""Command line entry point: ``prepare``, ``train``, ``evaluate``, ``explain``, ``report``.

Exit codes: 0 success, 2 configuration, 3 data, 4 numeric, 5 I/O,
6 attributions written but at least one failed its additivity check.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import uuid
from datetime import datetime
from pathlib import Path

import numpy as np

from . import dataset as ds
from .errors import EXIT_ADDITIVITY_WARNING, ConfigError, DataError, SignXAIError
from .manifest import RunManifest

log = logging.getLogger("signxai")


def _run_root(manifest: RunManifest, run_dir: Path) -> Path:
    root = Path(manifest.dataset["root"])
    return root if root.is_absolute() else run_dir / root


def _load_split(run_dir: Path, manifest: RunManifest):
    return ds.load_split(manifest.artifact("split", run_dir), _run_root(manifest, run_dir))


def _load_part(index, ids, side, workers):
    paths = [index.samples[i][0] for i in ids]
    x = ds.normalize(ds.load_images(paths, side, workers)) if ids else np.zeros((0, side, side, 3), np.float32)
    return x, index.labels[ids] if ids else np.zeros(0, np.int64)


def cmd_prepare(args) -> int:
    run_id = args.run_id or datetime.now().strftime("%Y%m%d-%H%M%S-") + uuid.uuid4().hex[:6]
    run_dir = Path(args.out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(run_id)

    if args.synthetic:
        k, per_class = args.synthetic
        synth = ds.generate_synthetic(k, per_class, args.side, args.seed)
        index = ds.export_synthetic(synth, run_dir / "data")
        manifest.dataset = {"source": "synthetic", "root": "data",
                            "synthetic": {"k": k, "per_class": per_class, "side": args.side, "seed": args.seed}}
    elif args.dataset_root:
        index = ds.scan_dataset(args.dataset_root)
        manifest.dataset = {"source": "directory", "root": str(Path(args.dataset_root).resolve())}
    else:
        raise ConfigError("give a dataset root or --synthetic K PER_CLASS")

    split = ds.split_dataset(index, args.ratios, args.seed)
    ds.save_split(run_dir / "split.json", index, split)
    manifest.dataset.update(class_names=index.class_names, n_samples=len(index),
                            ratios=list(split.ratios),
                            counts={name: len(ids) for name, ids in split.parts().items()})
    manifest.preprocessing = {"side": args.side, "resize": ds.RESIZE_METHOD, "normalization": "divide by 255"}
    manifest.seeds["split"] = args.seed
    manifest.add_artifact("split", run_dir / "split.json", run_dir)
    manifest.save(run_dir)
    c = manifest.dataset["counts"]
    print(f"{run_dir}: {len(index)} samples, train/val/test = {c['train']}/{c['val']}/{c['test']}")
    return 0


def cmd_train(args) -> int:
    from .models import BackboneSpec, HeadSpec, build_model
    from .training import TrainConfig, train

    run_dir = Path(args.run_dir)
    manifest = RunManifest.load(run_dir)
    cfg = TrainConfig()
    if args.config:
        cfg = TrainConfig.from_file(args.config, cfg)
    overrides = {k: v for k, v in {
        "epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size,
        "label_smoothing": args.label_smoothing, "dropout_rate": args.dropout, "seed": args.seed,
    }.items() if v is not None}
    cfg = cfg.updated(**overrides)

    weights = None if args.weights == "none" or args.arch == "tiny" else args.weights
    backbone_spec = BackboneSpec(args.arch, weights=weights, seed=cfg.seed,
                                 canonical_preprocessing=args.canonical_preprocessing)
    index, split = _load_split(run_dir, manifest)
    head_spec = HeadSpec(num_classes=index.class_count, dropout_rate=cfg.dropout_rate, seed=cfg.seed)

    side = manifest.preprocessing["side"]
    x_train, y_train = _load_part(index, split.train, side, args.workers)
    x_val, y_val = _load_part(index, split.val, side, args.workers)
    handle = build_model(backbone_spec, head_spec, index.class_names)

    history = train(handle, x_train, y_train, x_val, y_val, cfg, checkpoint_dir=run_dir / "checkpoint")
    history.save_json(run_dir / "history.json")
    history.save_csv(run_dir / "history.csv")

    manifest.backbone = backbone_spec.to_dict()
    manifest.head = head_spec.to_dict()
    manifest.train_config = cfg.to_dict()
    manifest.seeds.update(backbone=backbone_spec.seed, head=head_spec.seed, train=cfg.seed)
    for name, rel in (("checkpoint", "checkpoint"), ("history", "history.json"), ("history_csv", "history.csv")):
        manifest.add_artifact(name, run_dir / rel, run_dir)
    manifest.save(run_dir)
    if len(history):
        last = history.records[-1]
        print(f"trained {args.arch} for {len(history)} epochs: "
              f"train_acc {last['train_accuracy']:.4f} val_acc {last['val_accuracy']:.4f}")
    else:
        print(f"no training epochs requested; untrained {args.arch} checkpoint written")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import confusion_matrix, metrics_report, render_confusion
    from .models import load_checkpoint

    run_dir = Path(args.run_dir)
    manifest = RunManifest.load(run_dir)
    ckpt = manifest.artifact("checkpoint", run_dir)
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} is missing")
    handle = load_checkpoint(ckpt)
    index, split = _load_split(run_dir, manifest)
    if not split.test:
        raise DataError("test split is empty")
    x, y_true = _load_part(index, split.test, manifest.preprocessing["side"], args.workers)
    y_pred = np.argmax(handle.predict(x), axis=1)

    with open(run_dir / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "path", "y_true", "y_pred"])
        for i, t, p in zip(split.test, y_true, y_pred):
            writer.writerow([i, index.samples[i][0].relative_to(index.root).as_posix(), int(t), int(p)])

    cm = confusion_matrix(y_true, y_pred, index.class_count, index.class_names)
    report = metrics_report(cm)
    report.save_json(run_dir / "metrics.json")
    png, csv_path = render_confusion(cm, run_dir / "confusion", title=f"{handle.backbone_spec.architecture}")
    for name, path in (("predictions", run_dir / "predictions.csv"), ("metrics", run_dir / "metrics.json"),
                       ("confusion_png", png), ("confusion_csv", csv_path)):
        manifest.add_artifact(name, path, run_dir)
    manifest.save(run_dir)
    agg = report.aggregates["weighted"]
    print(f"test accuracy {report.accuracy:.4f}  weighted precision {agg['precision']:.4f} "
          f"recall {agg['recall']:.4f} f1 {agg['f1']:.4f}")
    return 0


def cmd_explain(args) -> int:
    from .explain import attribute_classes, render_overlay, save_attribution, select_background, verify_additivity
    from .models import load_checkpoint

    run_dir = Path(args.run_dir)
    manifest = RunManifest.load(run_dir)
    handle = load_checkpoint(manifest.artifact("checkpoint", run_dir))
    index, split = _load_split(run_dir, manifest)
    side = manifest.preprocessing["side"]

    if args.image:
        x = ds.normalize(ds.load_and_resize(args.image, side))
        tag, input_id = Path(args.image).stem, 0
    else:
        if not 0 <= args.index < len(split.test):
            raise ConfigError(f"test index {args.index} outside [0, {len(split.test)})")
        sample = split.test[args.index]
        x = ds.normalize(ds.load_and_resize(index.samples[sample][0], side))
        tag, input_id = f"test{args.index:05d}", args.index

    x_train, _ = _load_part(index, split.train, side, args.workers)
    background = select_background(x_train, min(args.background, len(x_train)), args.seed)
    k = index.class_count
    if args.classes == "all":
        classes = list(range(k))
    else:
        try:
            classes = [int(args.classes)]
        except ValueError:
            raise ConfigError(f"--classes must be 'all' or a class index, got {args.classes!r}") from None
        if not 0 <= classes[0] < k:
            raise ConfigError(f"class {classes[0]} outside [0, {k})")

    out = run_dir / "explain" / tag
    out.mkdir(parents=True, exist_ok=True)
    attrs = attribute_classes(handle, x, background, classes, args.samples, args.seed, input_id)
    failures = 0
    residuals = {}
    for a in attrs:
        save_attribution(a, out / f"class_{a.class_index}", args.tol, args.floor)
        render_overlay(x, a, out / f"overlay_class_{a.class_index}.png", index.class_names)
        rep = verify_additivity(a, args.tol, args.floor)
        residuals[a.class_index] = rep
        failures += not rep.passed
        manifest.add_artifact(f"explain/{tag}/class_{a.class_index}", out / f"class_{a.class_index}.npz", run_dir)
        manifest.add_artifact(f"explain/{tag}/overlay_{a.class_index}", out / f"overlay_class_{a.class_index}.png",
                              run_dir)
    render_overlay(x, attrs, out / "overlay_panels.png", index.class_names)
    manifest.add_artifact(f"explain/{tag}/panels", out / "overlay_panels.png", run_dir)
    manifest.explain = {"background_size": len(background), "background_seed": args.seed,
                        "n_samples": args.samples, "tol_rel": args.tol, "floor": args.floor,
                        "estimator": "expected_gradients"}
    manifest.seeds["explain"] = args.seed
    manifest.save(run_dir)

    for c, rep in residuals.items():
        status = "ok" if rep.passed else "FAIL"
        print(f"class {index.class_names[c]}: residual {rep.residual:.3e} gap {rep.gap:.3e} [{status}]")
    if failures:
        log.warning("%d of %d attributions exceed additivity tolerance %.3g", failures, len(attrs), args.tol)
        return EXIT_ADDITIVITY_WARNING
    return 0


REPORT_COLUMNS = ("Algorithm", "Training Accuracy", "Test Accuracy", "Precision", "F1 Score", "Recall")


def report_rows(run_dirs, strategy: str = "weighted") -> list[dict]:
    from .training import TrainingHistory

    rows = []
    for run_dir in map(Path, run_dirs):
        manifest = RunManifest.load(run_dir)
        missing = manifest.missing_artifacts(run_dir)
        if missing:
            raise DataError(f"run {manifest.run_id} references missing artifacts: {', '.join(missing)}")
        metrics = json.loads(manifest.artifact("metrics", run_dir).read_text())
        history = TrainingHistory.load_json(manifest.artifact("history", run_dir))
        agg = metrics["aggregates"][strategy]
        rows.append({
            "Algorithm": manifest.backbone["architecture"],
            "Training Accuracy": history.records[-1]["train_accuracy"] if len(history) else float("nan"),
            "Test Accuracy": metrics["accuracy"],
            "Precision": agg["precision"],
            "F1 Score": agg["f1"],
            "Recall": agg["recall"],
            "run_id": manifest.run_id,
        })
    return rows


def _pct(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{100 * v:.2f}%"


def cmd_report(args) -> int:
    rows = report_rows(args.run_dirs, args.strategy)
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    for r in rows:
        lines.append("| " + " | ".join([r["Algorithm"]] + [_pct(r[c]) for c in REPORT_COLUMNS[1:]]) + " |")
    table = "\n".join(lines)
    print(table)
    if args.out:
        stem = Path(args.out)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".md").write_text(table + "\n")
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(REPORT_COLUMNS) + ["run_id"])
            writer.writeheader()
            writer.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="signxai", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="scan or synthesize a dataset and write a stratified split")
    sp.add_argument("dataset_root", nargs="?")
    sp.add_argument("--synthetic", nargs=2, type=int, metavar=("K", "PER_CLASS"))
    sp.add_argument("--ratios", nargs=3, type=float, default=list(ds.DEFAULT_RATIOS))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--side", type=int, default=ds.IMAGE_SIDE)
    sp.add_argument("--out", default="runs", help="directory holding run directories")
    sp.add_argument("--run-id")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train the classification head on the prepared split")
    sp.add_argument("run_dir")
    sp.add_argument("--arch", default="resnet50")
    sp.add_argument("--weights", default="imagenet", choices=["imagenet", "none"])
    sp.add_argument("--config", help="INI file with a [train] section")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--label-smoothing", type=float)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--canonical-preprocessing", action="store_true")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="confusion matrix and metrics on the test split")
    sp.add_argument("run_dir")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("explain", help="expected-gradients attributions and overlays")
    sp.add_argument("run_dir")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--index", type=int, help="position within the test split")
    sp.add_argument("--classes", default="all")
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--background", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=0.1,
                    help="relative additivity tolerance; sized for the Monte-Carlo error at 200 samples")
    sp.add_argument("--floor", type=float, default=0.1,
                    help="smallest prediction gap the relative tolerance is scaled by")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("report", help="Markdown/CSV comparison table across runs")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--strategy", default="weighted", choices=["macro", "micro", "weighted"])
    sp.add_argument("--out", help="output stem; writes <stem>.md and <stem>.csv")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SignXAIError as e:
        log.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
