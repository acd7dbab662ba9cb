"""Render result tables and figures from evaluated run directories.

Every cell traces back to a metrics.json field: this module never recomputes
a metric, it only formats stored full-precision values (percentages at 2
decimals) and takes deltas in full precision before rounding. Model tables
order rows by descending accuracy. Regeneration over unchanged runs is
byte-identical, and runs whose config records a different dataset manifest
hash are refused unless forced.

Outputs under <out_dir>:
    table_<name>.csv / table_<name>.md   one pair per table
    fig_metrics.png, fig_roc.png, fig_gradcam.png
    report.md                            all tables plus figure links
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .errors import ReportError
from .explain import Category
from .metrics import read_metrics_json
from .models import ArchitectureId, Regime

logger = logging.getLogger(__name__)

_ARCH_DISPLAY = {
    ArchitectureId.CUSTOM_CNN.value: "Custom CNN",
    ArchitectureId.RESNET50.value: "ResNet50",
    ArchitectureId.DENSENET121.value: "DenseNet121",
    ArchitectureId.EFFICIENTNET_B0.value: "EfficientNet-B0",
}
_REGIME_DISPLAY = {
    Regime.SCRATCH.value: "scratch",
    Regime.FROZEN.value: "frozen",
    Regime.FINETUNE.value: "fine-tuned",
}
_METHOD_DISPLAY = {
    "simple": "Simple averaging",
    "weighted": "Weighted averaging",
    "vote": "Majority voting",
}

NA = "n/a"


@dataclass(frozen=True)
class RunSummary:
    path: Path
    name: str
    kind: str
    arch: Optional[str]
    regime: Optional[str]
    method: Optional[str]
    manifest_hash: Optional[str]
    metrics: dict

    @property
    def display(self) -> str:
        if self.kind == "ensemble":
            return _METHOD_DISPLAY.get(self.method or "", self.method or self.name)
        arch = _ARCH_DISPLAY.get(self.arch or "", self.arch or self.name)
        regime = _REGIME_DISPLAY.get(self.regime or "", self.regime or "")
        return f"{arch} ({regime})" if regime else arch

    def accuracy(self) -> Optional[float]:
        return self.metrics["classification"].get("accuracy")

    def errors(self) -> int:
        cm = self.metrics["confusion"]
        return cm["fp"] + cm["fn"]


@dataclass(frozen=True)
class Table:
    name: str
    title: str
    header: list[str]
    rows: list[list[str]]


@dataclass(frozen=True)
class ReportBundle:
    tables: list[Table]
    figures: dict[str, Path]
    out_dir: Path


def collect_runs(run_dirs: Sequence[Union[str, Path]]) -> list[RunSummary]:
    """Load config + metrics of each run; runs without metrics are skipped."""
    summaries = []
    for run_dir in sorted(Path(d) for d in run_dirs):
        if not run_dir.is_dir():
            raise ReportError(f"run directory not found: {run_dir}")
        metrics_path = run_dir / "metrics.json"
        if not metrics_path.is_file():
            logger.warning("skipping %s: no metrics.json (run not evaluated)", run_dir)
            continue
        metrics = read_metrics_json(metrics_path)
        config: dict = {}
        config_path = run_dir / "config.json"
        if config_path.is_file():
            with open(config_path) as fh:
                config = json.load(fh)
        summaries.append(
            RunSummary(
                path=run_dir,
                name=run_dir.name,
                kind="ensemble" if config.get("ensemble_method") else "model",
                arch=config.get("arch"),
                regime=config.get("regime"),
                method=config.get("ensemble_method"),
                manifest_hash=config.get("manifest_hash"),
                metrics=metrics,
            )
        )
    return summaries


def check_manifest_consistency(runs: Sequence[RunSummary], force: bool = False) -> None:
    hashes = {r.manifest_hash for r in runs if r.manifest_hash}
    if len(hashes) > 1:
        detail = {r.name: r.manifest_hash for r in runs}
        if not force:
            raise ReportError(
                f"runs come from different dataset manifests: {detail}; "
                "pass force to mix them anyway"
            )
        logger.warning("mixing runs from different manifests (forced): %s", detail)
    if any(r.manifest_hash is None for r in runs):
        logger.warning("some runs record no manifest hash; consistency unverified")


def _pct(value: Optional[float]) -> str:
    return NA if value is None else f"{value * 100.0:.2f}"


def _plain(value: Optional[float]) -> str:
    return NA if value is None else f"{value:.2f}"


def _signed_pp(value: float) -> str:
    return f"{value:+.2f}"


def _sorted_by_accuracy(runs: Sequence[RunSummary]) -> list[RunSummary]:
    return sorted(
        runs,
        key=lambda r: (-(r.accuracy() if r.accuracy() is not None else -math.inf), r.name),
    )


def _model_runs(runs: Sequence[RunSummary]) -> list[RunSummary]:
    return [r for r in runs if r.kind == "model"]


def _ensemble_runs(runs: Sequence[RunSummary]) -> list[RunSummary]:
    return [r for r in runs if r.kind == "ensemble"]


def table_overall(runs: Sequence[RunSummary]) -> Table:
    rows = []
    for r in _sorted_by_accuracy(_model_runs(runs)):
        c = r.metrics["classification"]
        rows.append(
            [r.display, _pct(c["accuracy"]), _pct(c["precision"]),
             _pct(c["recall"]), _pct(c["f1"]), _pct(c["auc"])]
        )
    return Table(
        name="overall",
        title="Overall model performance",
        header=["Model", "Accuracy (%)", "Precision (%)", "Recall (%)", "F1 (%)", "AUC (%)"],
        rows=rows,
    )


def table_improvement(runs: Sequence[RunSummary]) -> Optional[Table]:
    """Best transfer model against the scratch baseline."""
    models = _model_runs(runs)
    baselines = [r for r in models if r.arch == ArchitectureId.CUSTOM_CNN.value]
    transfer = [r for r in models if r.arch != ArchitectureId.CUSTOM_CNN.value]
    if not baselines or not transfer:
        logger.warning("improvement table needs a baseline and a transfer run; skipped")
        return None
    base = baselines[0]
    best = _sorted_by_accuracy(transfer)[0]
    b, t = base.metrics["classification"], best.metrics["classification"]
    b_clin, t_clin = base.metrics["clinical"], best.metrics["clinical"]

    rows = []

    def pct_row(label: str, bv: Optional[float], tv: Optional[float]) -> None:
        if bv is not None and tv is not None:
            rows.append([label, _pct(bv), _pct(tv), _signed_pp((tv - bv) * 100.0)])

    def count_row(label: str, bn: int, tn: int) -> None:
        delta = f"{(tn - bn) / bn * 100.0:+.2f}%" if bn > 0 else NA
        rows.append([label, str(bn), str(tn), delta])

    pct_row("Accuracy (%)", b["accuracy"], t["accuracy"])
    pct_row("F1 (%)", b["f1"], t["f1"])
    pct_row("AUC (%)", b["auc"], t["auc"])
    pct_row("Sensitivity (%)", b_clin["sensitivity"], t_clin["sensitivity"])
    pct_row("Specificity (%)", b_clin["specificity"], t_clin["specificity"])
    count_row("Total errors", base.errors(), best.errors())
    count_row(
        "False negatives", base.metrics["confusion"]["fn"], best.metrics["confusion"]["fn"]
    )
    return Table(
        name="improvement",
        title="Best transfer model vs scratch baseline",
        header=["Metric", base.display, best.display, "Delta"],
        rows=rows,
    )


def table_frozen_finetune(runs: Sequence[RunSummary]) -> Optional[Table]:
    """Per-architecture accuracy gain of fine-tuning over the frozen regime."""
    models = _model_runs(runs)
    rows = []
    frozen_accs: list[float] = []
    tuned_accs: list[float] = []
    acc_deltas: list[float] = []
    f1_deltas: list[float] = []
    for arch in (a.value for a in ArchitectureId if a is not ArchitectureId.CUSTOM_CNN):
        frozen = [r for r in models if r.arch == arch and r.regime == Regime.FROZEN.value]
        tuned = [r for r in models if r.arch == arch and r.regime == Regime.FINETUNE.value]
        if not frozen or not tuned:
            continue
        fr, ft = frozen[0].metrics["classification"], tuned[0].metrics["classification"]
        if fr["accuracy"] is None or ft["accuracy"] is None:
            continue
        acc_delta = (ft["accuracy"] - fr["accuracy"]) * 100.0
        frozen_accs.append(fr["accuracy"])
        tuned_accs.append(ft["accuracy"])
        acc_deltas.append(acc_delta)
        if fr["f1"] is not None and ft["f1"] is not None:
            f1_delta = (ft["f1"] - fr["f1"]) * 100.0
            f1_deltas.append(f1_delta)
            f1_cell = _signed_pp(f1_delta)
        else:
            f1_cell = NA
        rows.append(
            [_ARCH_DISPLAY.get(arch, arch), _pct(fr["accuracy"]), _pct(ft["accuracy"]),
             _signed_pp(acc_delta), f1_cell]
        )
    if not rows:
        logger.warning("frozen-vs-finetune table needs paired regimes; skipped")
        return None
    rows.append(
        ["Average",
         _pct(sum(frozen_accs) / len(frozen_accs)),
         _pct(sum(tuned_accs) / len(tuned_accs)),
         _signed_pp(sum(acc_deltas) / len(acc_deltas)),
         _signed_pp(sum(f1_deltas) / len(f1_deltas)) if f1_deltas else NA]
    )
    return Table(
        name="frozen_finetune",
        title="Fine-tuning vs frozen backbone accuracy",
        header=["Architecture", "Frozen (%)", "Fine-tuned (%)", "Delta Acc (pp)",
                "Delta F1 (pp)"],
        rows=rows,
    )


def table_confusion(runs: Sequence[RunSummary]) -> Table:
    rows = []
    for r in _sorted_by_accuracy(_model_runs(runs)):
        cm = r.metrics["confusion"]
        positives = cm["tp"] + cm["fn"]
        fn_rate = f"{cm['fn'] / positives * 100.0:.2f}" if positives else NA
        rows.append(
            [r.display, str(cm["tp"]), str(cm["tn"]), str(cm["fp"]), str(cm["fn"]),
             str(cm["fp"] + cm["fn"]), fn_rate]
        )
    return Table(
        name="confusion",
        title="Confusion matrix breakdown",
        header=["Model", "TP", "TN", "FP", "FN", "Errors", "FN Rate (%)"],
        rows=rows,
    )


def table_clinical(runs: Sequence[RunSummary]) -> Table:
    rows = []
    for r in _sorted_by_accuracy(_model_runs(runs)):
        c = r.metrics["clinical"]
        rows.append(
            [r.display, _pct(c["sensitivity"]), _pct(c["specificity"]),
             _pct(c["ppv"]), _pct(c["npv"]), _plain(c["balance"])]
        )
    return Table(
        name="clinical",
        title="Clinical metrics",
        header=["Model", "Sensitivity (%)", "Specificity (%)", "PPV (%)", "NPV (%)",
                "Balance (pp)"],
        rows=rows,
    )


def table_per_class(runs: Sequence[RunSummary]) -> Table:
    rows = []
    for r in _sorted_by_accuracy(_model_runs(runs)):
        normal = r.metrics["per_class"]["NORMAL"]
        pneumonia = r.metrics["per_class"]["PNEUMONIA"]
        rows.append(
            [r.display,
             _pct(normal["precision"]), _pct(normal["recall"]), _pct(normal["f1"]),
             _pct(pneumonia["precision"]), _pct(pneumonia["recall"]), _pct(pneumonia["f1"])]
        )
    return Table(
        name="per_class",
        title="Class-wise precision, recall and F1",
        header=["Model",
                "NORMAL Precision (%)", "NORMAL Recall (%)", "NORMAL F1 (%)",
                "PNEUMONIA Precision (%)", "PNEUMONIA Recall (%)", "PNEUMONIA F1 (%)"],
        rows=rows,
    )


def table_ensemble(runs: Sequence[RunSummary]) -> Optional[Table]:
    ensembles = _ensemble_runs(runs)
    if not ensembles:
        return None
    rows = []
    for r in _sorted_by_accuracy(ensembles):
        c = r.metrics["classification"]
        cm = r.metrics["confusion"]
        rows.append(
            [r.display, _pct(c["accuracy"]), _pct(c["f1"]), _pct(c["auc"]),
             str(cm["fp"]), str(cm["fn"])]
        )
    return Table(
        name="ensemble",
        title="Ensemble methods",
        header=["Method", "Accuracy (%)", "F1 (%)", "AUC (%)", "FP", "FN"],
        rows=rows,
    )


def build_tables(runs: Sequence[RunSummary]) -> list[Table]:
    tables = [
        table_overall(runs),
        table_improvement(runs),
        table_frozen_finetune(runs),
        table_confusion(runs),
        table_clinical(runs),
        table_per_class(runs),
        table_ensemble(runs),
    ]
    return [t for t in tables if t is not None]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def write_table_csv(table: Table, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.header)
        writer.writerows(table.rows)


def markdown_table(table: Table) -> str:
    lines = [
        "| " + " | ".join(table.header) + " |",
        "| " + " | ".join("---" for _ in table.header) + " |",
    ]
    for row in table.rows:
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def write_table_markdown(table: Table, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"### {table.title}\n\n")
        fh.write(markdown_table(table))


def figure_metric_bars(runs: Sequence[RunSummary], path: Path) -> Optional[Path]:
    models = _sorted_by_accuracy(_model_runs(runs))
    if not models:
        return None
    metric_keys = ["accuracy", "precision", "recall", "f1"]
    labels = [r.display for r in models]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.6 * len(models)), 4.5))
    x = np.arange(len(models))
    width = 0.2
    for i, key in enumerate(metric_keys):
        values = [
            (r.metrics["classification"][key] or 0.0) * 100.0 for r in models
        ]
        ax.bar(x + (i - 1.5) * width, values, width, label=key.capitalize())
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("Percent")
    ax.set_ylim(0, 105)
    ax.set_title("Test metrics by model")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _read_roc_csv(path: Path) -> tuple[list[float], list[float]]:
    fpr: list[float] = []
    tpr: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            fpr.append(float(row["fpr"]))
            tpr.append(float(row["tpr"]))
    return fpr, tpr


def figure_roc_overlay(runs: Sequence[RunSummary], path: Path) -> Optional[Path]:
    curves = []
    for r in _sorted_by_accuracy(list(runs)):
        roc_path = r.path / "roc.csv"
        if roc_path.is_file():
            curves.append((r.display, *_read_roc_csv(roc_path)))
    if not curves:
        return None
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    for label, fpr, tpr in curves:
        ax.plot(fpr, tpr, label=label, linewidth=1.2)
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title("ROC curves (TEST)")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def figure_gradcam_sheet(runs: Sequence[RunSummary], path: Path) -> Optional[Path]:
    """One row per run, one column per outcome category (first case each)."""
    panels = []
    for r in _sorted_by_accuracy(list(runs)):
        panel_path = r.path / "gradcam" / "panel.json"
        if panel_path.is_file():
            with open(panel_path) as fh:
                panels.append((r, json.load(fh)))
    if not panels:
        return None
    categories = [c.value for c in Category]
    fig, axes = plt.subplots(
        len(panels), len(categories),
        figsize=(3.0 * len(categories), 3.0 * len(panels)),
        squeeze=False,
    )
    for row, (run, payload) in enumerate(panels):
        for col, category in enumerate(categories):
            ax = axes[row][col]
            ax.set_axis_off()
            entries = payload["categories"].get(category, [])
            if row == 0:
                ax.set_title(category, fontsize=10)
            if not entries:
                ax.text(0.5, 0.5, "none", ha="center", va="center", fontsize=9)
                continue
            img = Image.open(run.path / "gradcam" / entries[0]["png"])
            ax.imshow(np.asarray(img))
            ax.set_xlabel(entries[0]["id"], fontsize=6)
        axes[row][0].set_ylabel(run.display, fontsize=8)
    fig.suptitle("Grad-CAM case panels", fontsize=12)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def generate_report(
    run_dirs: Sequence[Union[str, Path]],
    out_dir: Union[str, Path],
    force: bool = False,
) -> ReportBundle:
    """Build every table and figure the collected runs support."""
    runs = collect_runs(run_dirs)
    if not runs:
        raise ReportError("no evaluated runs found; nothing to report")
    check_manifest_consistency(runs, force=force)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    tables = build_tables(runs)
    for table in tables:
        write_table_csv(table, out_dir / f"table_{table.name}.csv")
        write_table_markdown(table, out_dir / f"table_{table.name}.md")

    figures: dict[str, Path] = {}
    for name, builder in (
        ("metrics", figure_metric_bars),
        ("roc", figure_roc_overlay),
        ("gradcam", figure_gradcam_sheet),
    ):
        result = builder(runs, out_dir / f"fig_{name}.png")
        if result is not None:
            figures[name] = result

    lines = ["# Benchmark report", ""]
    lines.append(f"Runs included: {len(runs)}")
    lines.append("")
    for table in tables:
        lines.append(f"## {table.title}")
        lines.append("")
        lines.append(markdown_table(table))
    if figures:
        lines.append("## Figures")
        lines.append("")
        for name, fig_path in sorted(figures.items()):
            lines.append(f"![{name}]({fig_path.name})")
        lines.append("")
    with open(out_dir / "report.md", "w") as fh:
        fh.write("\n".join(lines))

    return ReportBundle(tables=tables, figures=figures, out_dir=out_dir)
