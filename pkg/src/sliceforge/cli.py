"""Command-line orchestration: generate, split, audit, train, run, evaluate,
report, inspect.

Exit codes: 0 ok, 2 I/O or bad input, 3 leakage abort, 4 numeric failure.
The environment variable SLICEFORGE_SEED overrides the configured seed;
explicit command-line flags win over both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    AugmentConfig,
    generate_synthetic,
    load_manifest,
    load_slice_set,
)
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    LeakageError,
    NumericError,
    ShapeError,
    SliceforgeError,
)
from .metrics import (
    aggregate_folds,
    compute_metrics,
    format_fold_cell,
    render_aggregate_table,
    render_folds_table,
)
from .model import (
    ModelConfig,
    build_model,
    extract_activation,
    load_model,
    maximize_activation,
    save_model,
)
from .splits import SplitPlan, audit_split, kfold_split, slice_kfold_split
from .tensor import read_array, write_array, write_pgm
from .training import TrainConfig, evaluate, evaluate_subject_vote, fit

EXIT_OK = 0
EXIT_IO = 2
EXIT_LEAKAGE = 3
EXIT_NUMERIC = 4


@dataclass
class ExperimentConfig:
    manifest_path: str
    output_dir: str
    model: ModelConfig
    train: TrainConfig
    augment: AugmentConfig
    split_k: int = 2
    split_seed: int = 0
    split_stratified: bool = True
    split_granularity: str = "subject"

    @classmethod
    def from_json(cls, path, manifest=None) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{path}: unreadable config: {exc}") from exc
        model_doc = dict(doc.get("model", {}))
        if manifest is not None:
            model_doc.setdefault("input_height", manifest.slice_height)
            model_doc.setdefault("input_width", manifest.slice_width)
        split_doc = doc.get("split", {})
        try:
            return cls(
                manifest_path=doc["manifest_path"],
                output_dir=doc["output_dir"],
                model=ModelConfig(**model_doc),
                train=TrainConfig(**doc.get("train", {})),
                augment=AugmentConfig(**doc.get("augment", {})),
                split_k=int(split_doc.get("k", 2)),
                split_seed=int(split_doc.get("seed", 0)),
                split_stratified=bool(split_doc.get("stratified", True)),
                split_granularity=split_doc.get("granularity", "subject"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: bad config: {exc}") from exc


def _resolve_seed(args, config_seed: int) -> int:
    """Precedence: --seed flag, then SLICEFORGE_SEED, then the config value."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SLICEFORGE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"SLICEFORGE_SEED={env!r} is not an integer") from exc
    return config_seed


def _json_dump(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_generate(args) -> int:
    manifest = generate_synthetic(
        n_per_class=args.subjects_per_class,
        slices_per_subject=args.slices,
        h=args.height,
        w=args.width,
        seed=_resolve_seed(args, 0),
        out_dir=args.out,
    )
    print(f"wrote {len(manifest.subjects)} subjects, "
          f"{sum(len(s.slice_paths) for s in manifest.subjects)} slices to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest, check_files=False)
    seed = _resolve_seed(args, 0)
    if args.granularity == "slice":
        plan = slice_kfold_split(manifest, args.k, seed)
    else:
        plan = kfold_split(manifest, args.k, seed, stratified=args.stratified)
    plan.save(args.out)
    print(f"wrote {plan.k}-fold {plan.granularity}-level split to {args.out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    manifest = load_manifest(args.manifest, check_files=False)
    plan = SplitPlan.load(args.split)
    report = audit_split(plan, manifest)
    if args.json_out:
        _json_dump(args.json_out, report.to_json_dict())
    print(report.render_text(), end="")
    return EXIT_OK


def _run_fold(manifest, plan, fold_index, config, seed):
    fold = plan.folds[fold_index]
    train_set = load_slice_set(manifest, fold.train)
    val_set = load_slice_set(manifest, fold.val)
    model = build_model(config.model, seed=seed + fold_index)
    result = fit(model, train_set, val_set, config.train, config.augment)
    counts, mean_loss = evaluate(result.best, val_set)
    subject_counts = evaluate_subject_vote(result.best, val_set)
    return result, counts, mean_loss, subject_counts


def _write_fold_artifacts(fold_dir: Path, result, counts, mean_loss, subject_counts):
    fold_dir.mkdir(parents=True, exist_ok=True)
    result.history.write_csv(fold_dir / "history.csv")
    save_model(fold_dir / "best_model.sfm", result.best)
    save_model(fold_dir / "final_model.sfm", result.final)
    report = compute_metrics(counts)
    doc = {
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.history.records[result.best_epoch - 1].val_acc,
        "val_loss_best_model": mean_loss,
        "confusion_slice_level": counts.to_json_dict(),
        "metrics_slice_level": report.to_json_dict(),
        "confusion_subject_vote": subject_counts.to_json_dict(),
        "metrics_subject_vote": compute_metrics(subject_counts).to_json_dict(),
    }
    _json_dump(fold_dir / "metrics.json", doc)
    return report


def cmd_run(args) -> int:
    pre = json.loads(Path(args.config).read_text(encoding="utf-8"))
    manifest = load_manifest(
        args.manifest if args.manifest else pre["manifest_path"], check_files=True
    )
    config = ExperimentConfig.from_json(args.config, manifest=manifest)
    if args.manifest:
        config.manifest_path = args.manifest
    if args.output_dir:
        config.output_dir = args.output_dir
    seed = _resolve_seed(args, config.train.seed)
    config.train.seed = seed
    if args.k:
        config.split_k = args.k
    if args.granularity:
        config.split_granularity = args.granularity

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.split_granularity == "slice":
        plan = slice_kfold_split(manifest, config.split_k, config.split_seed)
    else:
        plan = kfold_split(manifest, config.split_k, config.split_seed,
                           stratified=config.split_stratified)
    plan.save(out_dir / "split.json")

    report = audit_split(plan, manifest)
    _json_dump(out_dir / "audit.json", report.to_json_dict())
    (out_dir / "audit.txt").write_text(report.render_text(), encoding="utf-8")
    if report.leaked_subject_ids and not args.allow_leakage:
        raise LeakageError(report.leaked_subject_ids)

    fold_reports = []
    fold_best_acc = []
    for i in range(plan.k):
        result, counts, mean_loss, subject_counts = _run_fold(manifest, plan, i, config, seed)
        fold_dir = out_dir / f"fold-{i + 1}"
        fold_reports.append(_write_fold_artifacts(fold_dir, result, counts, mean_loss, subject_counts))
        fold_best_acc.append(result.history.records[result.best_epoch - 1].val_acc)

    aggregate = aggregate_folds(fold_reports)
    summary = {
        "k": plan.k,
        "seed": seed,
        "granularity": plan.granularity,
        "leaked_subjects": report.leaked_subject_ids,
        "fold_best_val_accuracy": fold_best_acc,
        "aggregate": {name: {"mean": m, "std": s} for name, (m, s) in aggregate.items()},
    }
    _json_dump(out_dir / "summary.json", summary)
    _write_report_files(out_dir, aggregate, fold_best_acc)
    print(f"run complete: {plan.k} folds, artifacts in {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest, check_files=True)
    config = ExperimentConfig.from_json(args.config, manifest=manifest)
    plan = SplitPlan.load(args.split)
    seed = _resolve_seed(args, config.train.seed)
    config.train.seed = seed
    if not 0 <= args.fold < plan.k:
        raise ConfigError(f"fold {args.fold} outside 0..{plan.k - 1}")

    report = audit_split(plan, manifest)
    if report.leaked_subject_ids and not args.allow_leakage:
        raise LeakageError(report.leaked_subject_ids)

    result, counts, mean_loss, subject_counts = _run_fold(manifest, plan, args.fold, config, seed)
    fold_dir = Path(args.output_dir) / f"fold-{args.fold + 1}"
    _write_fold_artifacts(fold_dir, result, counts, mean_loss, subject_counts)
    print(f"fold {args.fold + 1}: best val accuracy "
          f"{format_fold_cell(result.history.records[result.best_epoch - 1].val_acc)} "
          f"at epoch {result.best_epoch}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest, check_files=True)
    model = load_model(args.model)
    members = args.subjects.split(",") if args.subjects else [
        s.subject_id for s in manifest.subjects
    ]
    dataset = load_slice_set(manifest, members)
    counts, mean_loss = evaluate(model, dataset, threshold=args.threshold)
    report = compute_metrics(counts)
    doc = {
        "confusion": counts.to_json_dict(),
        "metrics": report.to_json_dict(),
        "mean_loss": mean_loss,
    }
    if args.json_out:
        _json_dump(args.json_out, doc)
    print(json.dumps(doc, indent=1, sort_keys=True))
    return EXIT_OK


def _write_report_files(run_dir: Path, aggregate, fold_best_acc) -> None:
    agg_table = render_aggregate_table(aggregate)
    folds_table = render_folds_table(fold_best_acc)
    text = (
        "# Cross-validation report\n\n"
        "## Aggregate metrics over folds (mean±std)\n\n"
        + agg_table
        + "\n## Best validation accuracy per fold\n\n"
        + folds_table
    )
    (run_dir / "report.md").write_text(text, encoding="utf-8")
    with open(run_dir / "aggregate.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("metric,mean,std,cell\n")
        for name, (m, s) in aggregate.items():
            fh.write(f"{name},{m!r},{s!r},{m:.4f}±{s:.4f}\n")
    with open(run_dir / "folds.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("fold,best_val_accuracy,cell\n")
        for i, acc in enumerate(fold_best_acc):
            fh.write(f"{i + 1},{acc!r},{format_fold_cell(acc)}\n")


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.is_file():
        raise DataError(f"{run_dir}: not a completed run directory (missing summary.json)")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    aggregate = {
        name: (v["mean"], v["std"]) for name, v in summary["aggregate"].items()
    }
    _write_report_files(run_dir, aggregate, summary["fold_best_val_accuracy"])
    print((run_dir / "report.md").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.mode == "activation":
        if not args.input:
            raise ConfigError("activation mode needs --input")
        image = read_array(args.input)
        if image.ndim == 2:
            image = image[None, None, :, :]
        amap = extract_activation(model, image.astype(np.float32), args.block, args.channel)
        stem = f"activation_b{args.block}_c{args.channel}"
        write_array(out_dir / f"{stem}.tsr", amap)
        write_pgm(out_dir / f"{stem}.pgm", amap)
        print(f"wrote {stem}.tsr / .pgm ({amap.shape[0]}x{amap.shape[1]}) to {out_dir}")
    else:
        seed = _resolve_seed(args, 0)
        image, trace = maximize_activation(
            model, args.block, args.channel, steps=args.steps,
            step_size=args.step_size, seed=seed,
        )
        stem = f"maximize_b{args.block}_c{args.channel}"
        write_array(out_dir / f"{stem}.tsr", image)
        write_pgm(out_dir / f"{stem}.pgm", image[0, 0])
        with open(out_dir / f"{stem}_trace.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("step,objective\n")
            for i, v in enumerate(trace):
                fh.write(f"{i},{v!r}\n")
        print(f"wrote {stem}.tsr / .pgm, objective {trace[0]:.6g} -> {trace[-1]:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sliceforge",
        description="Train and audit slice-stack binary classifiers.",
    )
    parser.add_argument("--version", action="version", version=f"sliceforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic two-class dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects-per-class", type=int, default=8)
    p.add_argument("--slices", type=int, default=4)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", help="write a k-fold split plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stratified", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--granularity", choices=("subject", "slice"), default="subject")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("audit", help="audit a split plan for leakage and imbalance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--json-out", default=None)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train", help="train a single fold of a split plan")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--allow-leakage", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="full cross-validation: split, audit, train, report")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--granularity", choices=("subject", "slice"), default=None)
    p.add_argument("--allow-leakage", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="evaluate a saved model over manifest subjects")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--subjects", default=None, help="comma-separated subject ids")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--json-out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render tables for a completed run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="export activation maps or maximizing inputs")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("activation", "maximize"), required=True)
    p.add_argument("--input", default=None, help="TSR1 slice (activation mode)")
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--channel", type=int, required=True)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--step-size", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LeakageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("rerun with --allow-leakage to proceed anyway", file=sys.stderr)
        return EXIT_LEAKAGE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, DataError, ConfigError, ShapeError, SliceforgeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
