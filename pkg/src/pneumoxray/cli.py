"""Command-line interface: split, train, evaluate, gradcam, ensemble, report.

Exit codes: 0 on success, 1 for configuration problems (bad flags, bad config
file), 2 for runtime failures (missing artifacts, training divergence).

Each training run lives in its own timestamped directory under
<outputs>/runs and records the manifest hash it was trained against, so
downstream commands can refuse to mix incompatible artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import RunConfig, default_run_config, load_run_config, parse_model_token
from .data import (
    AugmentPolicy,
    PreprocessConfig,
    SplitName,
    XrayDataset,
    load_manifest,
    manifest_hash,
    save_manifest,
    scan_dataset_dir,
    stratified_split,
)
from .ensemble import ENSEMBLE_METHODS, load_member, weighted_average
from .errors import ConfigError, EvaluationError, PneumoXrayError
from .explain import render_case_panels
from .metrics import (
    PredictionSet,
    evaluate_predictions,
    read_predictions_csv,
    roc_and_auc,
    write_metrics_json,
    write_predictions_csv,
    write_roc_csv,
)
from .models import ArchitectureId, ModelSpec, Regime, build_model, load_checkpoint
from .report import generate_report
from .training import TrainConfig, predict, train

logger = logging.getLogger(__name__)


def _timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")


def _new_run_dir(runs_dir: Path, stem: str) -> Path:
    """Fresh directory <runs_dir>/<stem>; a suffix resolves collisions."""
    run_dir = runs_dir / stem
    counter = 1
    while run_dir.exists():
        counter += 1
        run_dir = runs_dir / f"{stem}-{counter}"
    run_dir.mkdir(parents=True)
    return run_dir


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else default_run_config()
    if args.out is not None:
        cfg = dataclasses.replace(cfg, outputs=Path(args.out))
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            split_seed=args.seed,
            train=dataclasses.replace(cfg.train, seed=args.seed),
        )
    return cfg


def _require_dataset_root(cfg: RunConfig) -> Path:
    if cfg.dataset_root is None:
        raise ConfigError("dataset_root is not configured; set it in the config file")
    return cfg.dataset_root


def _load_split_manifest(cfg: RunConfig):
    path = cfg.manifest_path()
    if not path.is_file():
        raise ConfigError(f"no manifest at {path}; run the split command first")
    manifest = load_manifest(path)
    return manifest, path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_split(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    root = _require_dataset_root(cfg)
    manifest = scan_dataset_dir(root)
    manifest = stratified_split(manifest, ratios=cfg.split_ratios, seed=cfg.split_seed)
    path = cfg.manifest_path()
    save_manifest(manifest, path)
    print(f"manifest: {path}")
    for split_name, counts in manifest.split_counts().items():
        total = sum(counts.values())
        detail = ", ".join(f"{label}={n}" for label, n in sorted(counts.items()))
        print(f"  {split_name}: {total} ({detail})")
    return 0


def _write_run_config(
    run_dir: Path,
    cfg: RunConfig,
    spec: ModelSpec,
    manifest_file: Path,
) -> None:
    payload = {
        "run_name": run_dir.name,
        "arch": spec.arch.value,
        "regime": spec.regime.regime.value,
        "spec": spec.to_json(),
        "train": cfg.train.to_json(),
        "weights": cfg.weights,
        "dataset_root": str(cfg.dataset_root),
        "manifest_path": str(manifest_file),
        "manifest_hash": manifest_hash(manifest_file),
        "preprocess": {
            "target_size": cfg.preprocess.target_size,
            "channel_means": list(cfg.preprocess.channel_means),
            "channel_stds": list(cfg.preprocess.channel_stds),
        },
        "augment": {
            "hflip_prob": cfg.augment.hflip_prob,
            "max_rotation_deg": cfg.augment.max_rotation_deg,
            "max_translate_frac": cfg.augment.max_translate_frac,
            "scale_range": list(cfg.augment.scale_range),
            "jitter_frac": cfg.augment.jitter_frac,
        },
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    with open(run_dir / "config.json", "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    root = _require_dataset_root(cfg)
    manifest, manifest_file = _load_split_manifest(cfg)
    selections = (
        [parse_model_token(token) for token in args.model]
        if args.model
        else list(cfg.models)
    )
    for arch, regime in selections:
        spec = cfg.model_spec(arch, regime)
        handle = build_model(spec, weights=cfg.weights)
        run_dir = _new_run_dir(
            cfg.runs_dir(), f"{arch.value}_{regime.value}_{_timestamp()}"
        )
        _write_run_config(run_dir, cfg, spec, manifest_file)
        result = train(
            handle,
            manifest,
            cfg.train,
            data_root=root,
            run_dir=run_dir,
            preprocess=cfg.preprocess,
            augment=cfg.augment,
        )
        print(
            f"{run_dir.name}: {result.stop_reason.value} after "
            f"{len(result.history)} epoch(s), best epoch {result.best_epoch} "
            f"(val_loss {result.best_val_loss:.4f})"
        )
    return 0


def _read_run_config(run_dir: Path) -> dict:
    config_path = run_dir / "config.json"
    if not config_path.is_file():
        raise EvaluationError(f"no config.json in {run_dir}; not a run directory")
    with open(config_path) as fh:
        return json.load(fh)


def _rebuild_model(run_dir: Path, run_config: dict):
    spec = ModelSpec.from_json(run_config["spec"])
    # checkpoint weights replace everything, so skip the pretrained cache
    handle = build_model(spec, weights="random")
    ckpt = run_dir / "checkpoints" / "best.pt"
    load_checkpoint(handle, ckpt)
    return handle, spec


def _run_preprocess(run_config: dict) -> PreprocessConfig:
    p = run_config["preprocess"]
    return PreprocessConfig(
        target_size=p["target_size"],
        channel_means=tuple(p["channel_means"]),
        channel_stds=tuple(p["channel_stds"]),
    )


def _run_manifest(run_config: dict):
    manifest_file = Path(run_config["manifest_path"])
    if not manifest_file.is_file():
        raise EvaluationError(f"manifest recorded by the run is gone: {manifest_file}")
    if manifest_hash(manifest_file) != run_config["manifest_hash"]:
        raise EvaluationError(
            f"manifest {manifest_file} changed since this run was trained; "
            "re-split or point the run at its original manifest"
        )
    return load_manifest(manifest_file)


def _evaluate_run(run_dir: Path, split: SplitName) -> PredictionSet:
    run_config = _read_run_config(run_dir)
    handle, _ = _rebuild_model(run_dir, run_config)
    manifest = _run_manifest(run_config)
    dataset = XrayDataset(
        manifest,
        split,
        root=Path(run_config["dataset_root"]),
        preprocess=_run_preprocess(run_config),
    )
    batch_size = run_config.get("train", {}).get("batch_size", 32)
    ids, y_true, y_prob = predict(handle, dataset, batch_size=batch_size)
    preds = PredictionSet.from_probabilities(ids, y_true, y_prob)

    suffix = "" if split is SplitName.TEST else f"_{split.value.lower()}"
    write_predictions_csv(preds, run_dir / f"predictions{suffix}.csv")
    metrics = evaluate_predictions(preds)
    write_metrics_json(metrics, run_dir / f"metrics{suffix}.json")
    try:
        curve, _ = roc_and_auc(preds)
        write_roc_csv(curve, run_dir / f"roc{suffix}.csv")
    except EvaluationError as exc:
        logger.warning("no ROC written for %s: %s", run_dir.name, exc)
    return preds


def _print_metrics_line(name: str, metrics: dict) -> None:
    c = metrics["classification"]

    def pct(v: Optional[float]) -> str:
        return "n/a" if v is None else f"{v * 100.0:.2f}"

    print(
        f"{name}: n={metrics['n']} acc={pct(c['accuracy'])} "
        f"prec={pct(c['precision'])} rec={pct(c['recall'])} f1={pct(c['f1'])} "
        f"auc={pct(c['auc'])}"
    )


def cmd_evaluate(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    split = SplitName.VAL if args.split == "val" else SplitName.TEST
    preds = _evaluate_run(run_dir, split)
    _print_metrics_line(f"{run_dir.name} [{split.value}]", evaluate_predictions(preds))
    return 0


def cmd_gradcam(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    run_config = _read_run_config(run_dir)
    preds_path = run_dir / "predictions.csv"
    if preds_path.is_file():
        preds = read_predictions_csv(preds_path)
    else:
        logger.info("no TEST predictions in %s; evaluating first", run_dir.name)
        preds = _evaluate_run(run_dir, SplitName.TEST)
    handle, _ = _rebuild_model(run_dir, run_config)
    payload = render_case_panels(
        handle,
        preds,
        data_root=Path(run_config["dataset_root"]),
        out_dir=run_dir / "gradcam",
        preprocess=_run_preprocess(run_config),
        per_category=args.per_category,
    )
    sizes = {cat: len(entries) for cat, entries in payload["categories"].items()}
    print(f"{run_dir.name}: gradcam panels {sizes} -> {run_dir / 'gradcam'}")
    return 0


def _discover_runs(cfg: RunConfig, args_runs: Optional[list[str]]) -> list[Path]:
    if args_runs:
        return [Path(r) for r in args_runs]
    runs_dir = cfg.runs_dir()
    if not runs_dir.is_dir():
        raise ConfigError(f"no run directories given and {runs_dir} does not exist")
    found = sorted(p for p in runs_dir.iterdir() if (p / "config.json").is_file())
    if not found:
        raise ConfigError(f"no runs found under {runs_dir}")
    return found


def _default_ensemble_members(run_dirs: list[Path]) -> list[Path]:
    """Default membership: fine-tuned model runs when present, otherwise
    every model run. Ensemble outputs never feed back in as members."""
    models = []
    finetuned = []
    for run_dir in run_dirs:
        run_config = _read_run_config(run_dir)
        if run_config.get("ensemble_method"):
            continue
        models.append(run_dir)
        if run_config.get("regime") == Regime.FINETUNE.value:
            finetuned.append(run_dir)
    chosen = finetuned or models
    if not chosen:
        raise ConfigError("no model runs to combine; train and evaluate first")
    return chosen


def cmd_ensemble(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    run_dirs = _discover_runs(cfg, args.runs)
    if not args.runs:
        run_dirs = _default_ensemble_members(run_dirs)
    members = [load_member(d, weight_source=args.weight_source) for d in run_dirs]

    hashes = set()
    for run_dir in run_dirs:
        run_config = _read_run_config(run_dir)
        if run_config.get("manifest_hash"):
            hashes.add(run_config["manifest_hash"])
    if len(hashes) > 1 and not args.force:
        raise EvaluationError(
            "member runs were trained against different manifests; "
            "pass --force to combine them anyway"
        )

    if args.method == "weighted":
        combined = weighted_average(members)
    else:
        combined = ENSEMBLE_METHODS[args.method](members)

    out_dir = _new_run_dir(cfg.runs_dir(), f"ensemble_{args.method}_{_timestamp()}")
    with open(out_dir / "config.json", "w") as fh:
        json.dump(
            {
                "run_name": out_dir.name,
                "ensemble_method": args.method,
                "members": [m.model_name for m in members],
                "weight_source": args.weight_source,
                "weights": [m.weight for m in members],
                "manifest_hash": next(iter(hashes)) if len(hashes) == 1 else None,
                "created_utc": datetime.now(timezone.utc).isoformat(),
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    write_predictions_csv(combined, out_dir / "predictions.csv")
    metrics = evaluate_predictions(combined)
    write_metrics_json(metrics, out_dir / "metrics.json")
    try:
        curve, _ = roc_and_auc(combined)
        write_roc_csv(curve, out_dir / "roc.csv")
    except EvaluationError as exc:
        logger.warning("no ROC written for %s: %s", out_dir.name, exc)
    _print_metrics_line(out_dir.name, metrics)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    run_dirs = _discover_runs(cfg, args.runs)
    out_dir = Path(args.report_dir) if args.report_dir else cfg.outputs / "report"
    bundle = generate_report(run_dirs, out_dir, force=args.force)
    print(f"report: {bundle.out_dir}")
    for table in bundle.tables:
        print(f"  table_{table.name}.csv / .md")
    for name in sorted(bundle.figures):
        print(f"  fig_{name}.png")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to the JSON run configuration")
    common.add_argument("--seed", type=int, help="override split and training seed")
    common.add_argument("--out", help="override the outputs directory")

    parser = argparse.ArgumentParser(
        prog="pneumoxray",
        description="Chest X-ray pneumonia classification benchmark",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", parents=[common], help="scan the dataset and write the stratified manifest")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train one or more models")
    p.add_argument(
        "--model",
        action="append",
        help="arch:regime selector (repeatable); default trains the configured sweep",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="write predictions and metrics for a run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--split", choices=["test", "val"], default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcam", parents=[common], help="render TP/TN/FP/FN heatmap panels for a run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--per-category", type=int, default=4)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("ensemble", parents=[common], help="combine evaluated runs")
    p.add_argument("--method", choices=sorted(ENSEMBLE_METHODS), required=True)
    p.add_argument("--runs", nargs="+", help="member run directories")
    p.add_argument("--weight-source", choices=["val", "test"], default="val")
    p.add_argument("--force", action="store_true", help="combine runs from different manifests")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("report", parents=[common], help="render tables and figures from runs")
    p.add_argument("--runs", nargs="+", help="run directories (default: every run under outputs)")
    p.add_argument("--report-dir", help="where to write the report (default <outputs>/report)")
    p.add_argument("--force", action="store_true", help="mix runs from different manifests")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse handles --help (code 0) and usage errors (code 2) itself;
        # usage errors are configuration errors under this tool's contract
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return 1
    except PneumoXrayError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
