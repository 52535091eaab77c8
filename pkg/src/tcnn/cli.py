"""Command-line entry point: generate / train / tensorize / eval / bench /
report.

Configuration comes from an optional JSON file plus flag overrides (flags
win) and is validated up front; invalid entries fail fast with the offending
key path. All randomness flows from two named seeds (``seed`` for model and
optimizer, ``data_seed`` for data generation, splitting, sampling, and
augmentation), both echoed into every output file.

Outputs are deterministic byte-for-byte for fixed seeds and thread count;
wall-clock measurements are isolated in sidecar ``timing.json`` /
``bench.json`` files. The ``TCNN_THREADS`` env var caps BLAS worker threads
(default 1, for determinism).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    AugmentConfig,
    SplitDataset,
    generate_synthetic,
    load_dataset,
    sampler_weights,
    samples_from_records,
    stack_images,
    stratified_split_indices,
    write_dataset,
)
from .metrics import evaluate_scores, format_table, mean_std_format
from .model import (
    ModelSpec,
    RankConfig,
    build_model,
    count_params,
    load_checkpoint,
    predict_scores,
    reference_spec,
    save_checkpoint,
    tensorize_pretrained,
)
from .training import TrainConfig, train


class ConfigError(ValueError):
    """Configuration rejected; the message names the offending key path."""


DEFAULT_CONFIG = {
    "dataset": {
        "path": None,
        "n": 2000,
        "defect_fraction": 0.3,
        "size": 64,
        "fractions": [0.8, 0.1, 0.1],
    },
    "model": {
        "input_size": 64,
        "ranks": None,
    },
    "train": {
        "epochs": 10,
        "batch_size": 32,
        "lr_initial": 3e-4,
        "lr_floor": 1e-6,
        "lr_decay": 0.1,
        "milestones": None,
        "threshold": 0.2,
    },
    "augment": {
        "color_p": 0.5,
        "brightness_range": [0.8, 1.2],
        "contrast_range": [0.8, 1.2],
        "crop_p": 0.5,
        "crop_area_range": [0.7, 1.0],
        "cutout_p": 0.3,
        "cutout_fraction": 0.125,
    },
    "seed": 0,
    "data_seed": 0,
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{where}: unknown configuration key")
        if isinstance(base[key], dict) and base[key] is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {message}")


def validate_config(cfg: dict) -> None:
    ds = cfg["dataset"]
    _require(ds["path"] is None or isinstance(ds["path"], str),
             "dataset.path", "must be a path or null")
    _require(isinstance(ds["n"], int) and ds["n"] > 0,
             "dataset.n", "must be a positive integer")
    _require(0.0 < ds["defect_fraction"] < 1.0,
             "dataset.defect_fraction", "must be in (0, 1)")
    _require(isinstance(ds["size"], int) and ds["size"] >= 8,
             "dataset.size", "must be an integer >= 8")
    fr = ds["fractions"]
    _require(isinstance(fr, (list, tuple)) and len(fr) == 3
             and abs(sum(fr) - 1.0) < 1e-9,
             "dataset.fractions", "must be three fractions summing to 1")
    ranks = cfg["model"]["ranks"]
    _require(ranks is None or (isinstance(ranks, (list, tuple)) and len(ranks) == 4
             and all(isinstance(r, int) and r >= 1 for r in ranks)),
             "model.ranks", "must be four positive integers or null")
    _require(isinstance(cfg["model"]["input_size"], int)
             and cfg["model"]["input_size"] >= 16,
             "model.input_size", "must be an integer >= 16")
    tr = cfg["train"]
    _require(isinstance(tr["epochs"], int) and tr["epochs"] >= 1,
             "train.epochs", "must be a positive integer")
    _require(isinstance(tr["batch_size"], int) and tr["batch_size"] >= 1,
             "train.batch_size", "must be a positive integer")
    _require(tr["lr_floor"] <= tr["lr_initial"],
             "train.lr_floor", "must not exceed train.lr_initial")
    _require(0.0 < tr["threshold"] < 1.0,
             "train.threshold", "must be in (0, 1)")
    _require(tr["milestones"] is None or all(isinstance(m, int) for m in tr["milestones"]),
             "train.milestones", "must be a list of epoch indices or null")
    au = cfg["augment"]
    for key in ("color_p", "crop_p", "cutout_p"):
        _require(0.0 <= au[key] <= 1.0, f"augment.{key}", "must be in [0, 1]")
    for key in ("seed", "data_seed"):
        _require(isinstance(cfg[key], int), key, "must be an integer")


def load_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        with open(args.config) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file: invalid JSON ({e})")
        cfg = _merge(cfg, user)
    overrides = {
        "seed": ("seed",),
        "data_seed": ("data_seed",),
        "threshold": ("train", "threshold"),
        "epochs": ("train", "epochs"),
        "batch": ("train", "batch_size"),
        "n": ("dataset", "n"),
        "defect_fraction": ("dataset", "defect_fraction"),
        "size": ("dataset", "size"),
    }
    for attr, path in overrides.items():
        value = getattr(args, attr, None)
        if value is not None:
            node = cfg
            for key in path[:-1]:
                node = node[key]
            node[path[-1]] = value
    if getattr(args, "ranks", None) is not None:
        cfg["model"]["ranks"] = _parse_ranks(args.ranks)
    validate_config(cfg)
    return cfg


def _parse_ranks(text: str) -> list[int]:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError("--ranks: expected four comma-separated integers")
    if len(parts) != 4:
        raise ConfigError("--ranks: expected exactly four values r_in,r_out,h,w")
    return parts


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError("--seeds: expected comma-separated integers")


def _augment_from_config(cfg: dict) -> AugmentConfig:
    au = cfg["augment"]
    return AugmentConfig(
        color_p=au["color_p"],
        brightness_range=tuple(au["brightness_range"]),
        contrast_range=tuple(au["contrast_range"]),
        crop_p=au["crop_p"],
        crop_area_range=tuple(au["crop_area_range"]),
        cutout_p=au["cutout_p"],
        cutout_fraction=au["cutout_fraction"],
    )


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    tr = cfg["train"]
    return TrainConfig(
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        lr_initial=tr["lr_initial"],
        lr_floor=tr["lr_floor"],
        lr_decay=tr["lr_decay"],
        milestones=tuple(tr["milestones"]) if tr["milestones"] else None,
        seed=seed,
        data_seed=cfg["data_seed"],
        threshold=tr["threshold"],
    )


def _model_spec(cfg: dict) -> ModelSpec:
    ranks = cfg["model"]["ranks"]
    rank_config = RankConfig(*ranks) if ranks else None
    return reference_spec(cfg["model"]["input_size"], rank_config)


def _load_split(cfg: dict) -> SplitDataset:
    ds = cfg["dataset"]
    if ds["path"]:
        return load_dataset(ds["path"], size=ds["size"])
    records = generate_synthetic(ds["n"], ds["defect_fraction"],
                                 cfg["data_seed"], ds["size"])
    samples = samples_from_records(records, ds["size"])
    labels = np.array([s.label for s in samples])
    tr, va, te = stratified_split_indices(labels, tuple(ds["fractions"]),
                                          cfg["data_seed"])
    split_ds = SplitDataset(
        train=[samples[i] for i in tr],
        val=[samples[i] for i in va],
        test=[samples[i] for i in te],
        fractions=tuple(ds["fractions"]),
    )
    split_ds.train_weights = sampler_weights(split_ds.train)
    return split_ds


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _provenance(cfg: dict) -> dict:
    return {"seed": cfg["seed"], "data_seed": cfg["data_seed"]}


# --- commands ----------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    ds = cfg["dataset"]
    out = Path(args.out)
    records = generate_synthetic(ds["n"], ds["defect_fraction"],
                                 cfg["data_seed"], ds["size"])
    labels = np.array([r.label for r in records])
    tr, va, te = stratified_split_indices(labels, tuple(ds["fractions"]),
                                          cfg["data_seed"])
    splits = [""] * len(records)
    for name, idx in (("train", tr), ("val", va), ("test", te)):
        for i in idx:
            splits[i] = name
    write_dataset(records, splits, out)
    _write_json(out / "generate.json", {
        "n": ds["n"],
        "defect_fraction": ds["defect_fraction"],
        "size": ds["size"],
        "split_sizes": {"train": len(tr), "val": len(va), "test": len(te)},
        **_provenance(cfg),
    })
    print(f"wrote {ds['n']} images to {out} "
          f"(train/val/test = {len(tr)}/{len(va)}/{len(te)})")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    seeds = _parse_seeds(args.seeds) if args.seeds else [cfg["seed"]]
    out = Path(args.out)
    dataset = _load_split(cfg)
    spec = _model_spec(cfg)
    augment_cfg = _augment_from_config(cfg)
    test_images, test_labels = stack_images(dataset.test)

    test_reports = []
    param_report = None
    for seed in seeds:
        run_dir = out / f"seed_{seed}"
        model = build_model(spec, seed)
        best, record = train(model, dataset, _train_config(cfg, seed), augment_cfg)
        save_checkpoint(best, run_dir / "checkpoint")
        (run_dir / "record.jsonl").write_text(record.to_jsonl())
        _write_json(run_dir / "timing.json", record.timing_dict())
        scores = predict_scores(best, test_images)
        rep = evaluate_scores(scores, test_labels, cfg["train"]["threshold"])
        _write_json(run_dir / "report.json", {
            **rep.to_dict(), "split": "test", "best_epoch": record.best_epoch,
            "seed": seed, "data_seed": cfg["data_seed"],
        })
        test_reports.append(rep)
        param_report = count_params(best)
        print(f"seed {seed}: best epoch {record.best_epoch}, "
              f"test F1 {rep.f1:.3f}")

    summary = {
        "ranks": cfg["model"]["ranks"],
        "seeds": seeds,
        "data_seed": cfg["data_seed"],
        "threshold": cfg["train"]["threshold"],
        "epochs": cfg["train"]["epochs"],
        "param_report": param_report.to_dict(),
        "test_metrics": {
            "precision": [r.precision for r in test_reports],
            "recall": [r.recall for r in test_reports],
            "f1": [r.f1 for r in test_reports],
            "auc": [r.auc for r in test_reports],
        },
        "test_metrics_formatted": {
            "precision": mean_std_format([r.precision for r in test_reports]),
            "recall": mean_std_format([r.recall for r in test_reports]),
            "f1": mean_std_format([r.f1 for r in test_reports]),
        },
    }
    _write_json(out / "summary.json", summary)
    print(f"summary: F1 {summary['test_metrics_formatted']['f1']} -> {out}")
    return 0


def cmd_tensorize(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    if cfg["model"]["ranks"] is None:
        raise ConfigError("model.ranks: required for tensorize (--ranks a,b,c,d)")
    dense = load_checkpoint(args.checkpoint)
    tucker = tensorize_pretrained(dense, RankConfig(*cfg["model"]["ranks"]))
    out = Path(args.out)
    save_checkpoint(tucker, out / "checkpoint")
    report = count_params(tucker)
    _write_json(out / "param_report.json", {
        **report.to_dict(), "ranks": cfg["model"]["ranks"], **_provenance(cfg),
    })
    print(f"tensorized at ranks {cfg['model']['ranks']}: "
          f"C_r = {report.c_r:.2f} -> {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    model = load_checkpoint(args.checkpoint)
    dataset = _load_split(cfg)
    images, labels = stack_images(dataset.test)
    scores = predict_scores(model, images)
    rep = evaluate_scores(scores, labels, cfg["train"]["threshold"])
    out = Path(args.out)
    _write_json(out / "report.json", {
        **rep.to_dict(), "split": "test", **_provenance(cfg),
    })
    lines = [
        f"threshold        {rep.threshold}",
        f"TN               {rep.cm.tn}",
        f"FP               {rep.cm.fp}",
        f"FN               {rep.cm.fn}",
        f"TP               {rep.cm.tp}",
        f"precision        {rep.precision:.3f}",
        f"recall           {rep.recall:.3f}",
        f"F1               {rep.f1:.3f}",
        f"AUC              {rep.auc:.3f}",
        f"slip-through     {100 * rep.slip_through:.1f}%",
    ]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    model = load_checkpoint(args.checkpoint)
    c, s, _ = model.spec.input_shape
    gen = np.random.default_rng(cfg["data_seed"])
    batch = gen.random((args.batch, c, s, s), dtype=np.float32)

    def time_model(m):
        for _ in range(3):
            m.forward(batch)
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            m.forward(batch)
            times.append(time.perf_counter() - t0)
        return times

    times = time_model(model)
    payload = {
        "batch_size": args.batch,
        "repeats": args.repeats,
        "warmup_runs": 3,
        "mean_ms": float(np.mean(times) * 1e3),
        "median_ms": float(np.median(times) * 1e3),
        "min_ms": float(np.min(times) * 1e3),
        **_provenance(cfg),
    }
    if args.baseline:
        base_times = time_model(load_checkpoint(args.baseline))
        payload["baseline_mean_ms"] = float(np.mean(base_times) * 1e3)
        payload["latency_ratio"] = payload["mean_ms"] / payload["baseline_mean_ms"]
    out = Path(args.out)
    _write_json(out / "bench.json", payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _mean_run_seconds(run_dir: Path) -> float | None:
    seconds = []
    for timing in sorted(run_dir.glob("seed_*/timing.json")):
        with open(timing) as f:
            seconds.append(json.load(f)["total_wall_seconds"])
    return float(np.mean(seconds)) if seconds else None


def cmd_report(args: argparse.Namespace) -> int:
    runs = []
    for run_dir in args.run_dirs:
        run_dir = Path(run_dir)
        with open(run_dir / "summary.json") as f:
            summary = json.load(f)
        runs.append({
            "dir": run_dir,
            "summary": summary,
            "seconds": _mean_run_seconds(run_dir),
        })
    baselines = [r for r in runs if r["summary"]["ranks"] is None]
    if not baselines:
        raise ConfigError("run_dirs: no dense baseline run (ranks null) found")
    base = baselines[0]
    base_ncf = base["summary"]["param_report"]["n_c_f"]

    rows = []
    combined = []
    for run in runs:
        summary = run["summary"]
        fmt = summary["test_metrics_formatted"]
        compression = base_ncf / summary["param_report"]["n_c_f"]
        if run is base:
            improvement = 0.0
        elif run["seconds"] and base["seconds"]:
            improvement = (base["seconds"] - run["seconds"]) / base["seconds"] * 100.0
        else:
            improvement = None
        ranks = summary["ranks"]
        rows.append({
            "ranks": "-" if ranks is None else f"({', '.join(map(str, ranks))})",
            "precision": fmt["precision"],
            "recall": fmt["recall"],
            "f1": fmt["f1"],
            "compression": f"x{compression:.1f}",
            "training time improvement":
                "-" if improvement is None else f"{improvement:.0f}%",
        })
        combined.append({
            "run_dir": str(run["dir"]),
            "ranks": ranks,
            "metrics": summary["test_metrics"],
            "compression": compression,
            "time_improvement_percent": improvement,
        })
    table = format_table(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "combined_table.txt").write_text(table)
    _write_json(out / "combined.json", {"runs": combined})
    print(table, end="")
    return 0


# --- argument parsing ---------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--seed", type=int, help="model seed override")
    p.add_argument("--data-seed", dest="data_seed", type=int,
                   help="data seed override")
    p.add_argument("--ranks",
                   help="rank bounds r_in,r_out,h,w (factorized conv layers)")
    p.add_argument("--threshold", type=float, help="decision threshold override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcnn",
        description="Train, compress, and evaluate tensor convolutional networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic defect dataset")
    _add_common(p)
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--defect-fraction", dest="defect_fraction", type=float)
    p.add_argument("--size", type=int, help="image side length")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model (dense, or factorized with --ranks)")
    _add_common(p)
    p.add_argument("--seeds", help="comma-separated model seeds (multi-run)")
    p.add_argument("--epochs", type=int, help="epoch count override")
    p.add_argument("--batch", type=int, help="batch size override")
    p.add_argument("--n", type=int, help="synthetic dataset size override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tensorize", help="factorize a trained dense checkpoint")
    _add_common(p)
    p.add_argument("checkpoint", help="dense checkpoint directory")
    p.set_defaults(func=cmd_tensorize)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("checkpoint", help="checkpoint directory")
    p.add_argument("--n", type=int, help="synthetic dataset size override")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure forward-pass latency")
    _add_common(p)
    p.add_argument("checkpoint", help="checkpoint directory")
    p.add_argument("--batch", type=int, default=128, help="benchmark batch size")
    p.add_argument("--repeats", type=int, default=10, help="timed repetitions")
    p.add_argument("--baseline", help="second checkpoint for a latency ratio")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="combine training runs into one table")
    p.add_argument("run_dirs", nargs="+", help="output directories of train runs")
    p.add_argument("--out", default="runs/report", help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def _limit_threads() -> None:
    n = int(os.environ.get("TCNN_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=max(1, n))
    except ImportError:  # pragma: no cover
        pass


def main(argv: list[str] | None = None) -> int:
    _limit_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        error = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(error), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
