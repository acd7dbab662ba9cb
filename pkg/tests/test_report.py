import csv
import json
import logging

import pytest

from pneumoxray.errors import ReportError
from pneumoxray.metrics import (
    ConfusionMatrix,
    classification_report,
    clinical_report,
    per_class_from_confusion,
)
from pneumoxray.report import (
    collect_runs,
    generate_report,
    markdown_table,
    table_clinical,
    table_confusion,
    table_ensemble,
    table_frozen_finetune,
    table_improvement,
    table_overall,
    table_per_class,
)


def metrics_from_cm(tp, tn, fp, fn, auc=None):
    """Full-precision metrics payload a real run with this confusion matrix
    would store; AUC has no closed form from counts so it is injected."""
    cm = ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)
    cls = classification_report(cm).to_json()
    cls["auc"] = auc
    return {
        "n": tp + tn + fp + fn,
        "confusion": cm.to_json(),
        "classification": cls,
        "clinical": clinical_report(cm).to_json(),
        "per_class": {k: v.to_json() for k, v in per_class_from_confusion(cm).items()},
    }


def write_run(
    root,
    name,
    metrics,
    arch=None,
    regime=None,
    method=None,
    manifest_hash="m0",
):
    run_dir = root / name
    run_dir.mkdir(parents=True)
    config = {"run_name": name, "manifest_hash": manifest_hash}
    if method:
        config["ensemble_method"] = method
    else:
        config["arch"] = arch
        config["regime"] = regime
    (run_dir / "config.json").write_text(json.dumps(config))
    (run_dir / "metrics.json").write_text(json.dumps(metrics))
    return run_dir


# confusion counts for the four runs whose error breakdown is checked in full
CM_RESNET_FT = (386, 134, 1, 2)
CM_DENSENET_FT = (385, 132, 3, 3)
CM_CUSTOM = (376, 128, 7, 12)
CM_EFFNET_FR = (345, 130, 5, 43)


@pytest.fixture
def reference_runs(tmp_path):
    """A seven-model sweep whose stored metrics reproduce the reference
    percentage grid, plus three ensemble runs."""
    runs = []

    def displayed(acc, prec, rec, f1, auc, cm):
        tp, tn, fp, fn = cm
        payload = metrics_from_cm(tp, tn, fp, fn, auc=auc / 100.0)
        payload["classification"].update(
            accuracy=acc / 100.0, precision=prec / 100.0,
            recall=rec / 100.0, f1=f1 / 100.0,
        )
        return payload

    runs.append(write_run(
        tmp_path, "resnet50_finetune_a",
        metrics_from_cm(*CM_RESNET_FT, auc=0.9993),
        arch="resnet50", regime="finetune",
    ))
    runs.append(write_run(
        tmp_path, "densenet121_finetune_a",
        metrics_from_cm(*CM_DENSENET_FT, auc=0.9989),
        arch="densenet121", regime="finetune",
    ))
    runs.append(write_run(
        tmp_path, "custom_cnn_scratch_a",
        metrics_from_cm(*CM_CUSTOM, auc=0.9923),
        arch="custom_cnn", regime="scratch",
    ))
    runs.append(write_run(
        tmp_path, "efficientnet_b0_finetune_a",
        metrics_from_cm(*CM_CUSTOM, auc=0.9949),
        arch="efficientnet_b0", regime="finetune",
    ))
    runs.append(write_run(
        tmp_path, "densenet121_frozen_a",
        displayed(94.46, 96.62, 95.88, 96.25, 98.47, (372, 122, 13, 16)),
        arch="densenet121", regime="frozen",
    ))
    runs.append(write_run(
        tmp_path, "resnet50_frozen_a",
        displayed(92.93, 95.12, 95.36, 95.24, 97.71, (370, 116, 19, 18)),
        arch="resnet50", regime="frozen",
    ))
    runs.append(write_run(
        tmp_path, "efficientnet_b0_frozen_a",
        displayed(90.82, 98.57, 88.92, 93.50, 98.28, CM_EFFNET_FR),
        arch="efficientnet_b0", regime="frozen",
    ))

    runs.append(write_run(
        tmp_path, "ensemble_simple_a",
        metrics_from_cm(386, 132, 3, 2, auc=0.9990), method="simple",
    ))
    runs.append(write_run(
        tmp_path, "ensemble_weighted_a",
        metrics_from_cm(386, 132, 3, 2, auc=0.9990), method="weighted",
    ))
    runs.append(write_run(
        tmp_path, "ensemble_vote_a",
        metrics_from_cm(386, 132, 3, 2, auc=0.9863), method="vote",
    ))
    return runs


def row_by_model(table, display):
    matches = [r for r in table.rows if r[0] == display]
    assert matches, f"{display!r} not in {[r[0] for r in table.rows]}"
    return matches[0]


class TestOverallTable:
    def test_rows_sorted_by_descending_accuracy(self, reference_runs):
        table = table_overall(collect_runs(reference_runs))
        assert [r[0] for r in table.rows] == [
            "ResNet50 (fine-tuned)",
            "DenseNet121 (fine-tuned)",
            "Custom CNN (scratch)",
            "EfficientNet-B0 (fine-tuned)",
            "DenseNet121 (frozen)",
            "ResNet50 (frozen)",
            "EfficientNet-B0 (frozen)",
        ]

    def test_percentage_grid(self, reference_runs):
        table = table_overall(collect_runs(reference_runs))
        grid = {r[0]: r[1:] for r in table.rows}
        assert grid["ResNet50 (fine-tuned)"] == ["99.43", "99.74", "99.48", "99.61", "99.93"]
        assert grid["DenseNet121 (fine-tuned)"] == ["98.85", "99.23", "99.23", "99.23", "99.89"]
        assert grid["Custom CNN (scratch)"] == ["96.37", "98.17", "96.91", "97.54", "99.23"]
        assert grid["EfficientNet-B0 (fine-tuned)"] == ["96.37", "98.17", "96.91", "97.54", "99.49"]
        assert grid["DenseNet121 (frozen)"] == ["94.46", "96.62", "95.88", "96.25", "98.47"]
        assert grid["ResNet50 (frozen)"] == ["92.93", "95.12", "95.36", "95.24", "97.71"]
        assert grid["EfficientNet-B0 (frozen)"] == ["90.82", "98.57", "88.92", "93.50", "98.28"]

    def test_excludes_ensembles(self, reference_runs):
        table = table_overall(collect_runs(reference_runs))
        assert len(table.rows) == 7


class TestImprovementTable:
    def test_deltas_taken_before_rounding(self, reference_runs):
        table = table_improvement(collect_runs(reference_runs))
        rows = {r[0]: r[1:] for r in table.rows}
        assert table.header[1] == "Custom CNN (scratch)"
        assert table.header[2] == "ResNet50 (fine-tuned)"
        assert rows["Accuracy (%)"] == ["96.37", "99.43", "+3.06"]
        # displayed difference would give +2.07; full precision rounds to +2.08
        assert rows["F1 (%)"] == ["97.54", "99.61", "+2.08"]
        assert rows["AUC (%)"] == ["99.23", "99.93", "+0.70"]
        assert rows["Sensitivity (%)"] == ["96.91", "99.48", "+2.58"]
        # displayed difference would give +4.45; full precision rounds to +4.44
        assert rows["Specificity (%)"] == ["94.81", "99.26", "+4.44"]

    def test_error_reduction_rows(self, reference_runs):
        table = table_improvement(collect_runs(reference_runs))
        rows = {r[0]: r[1:] for r in table.rows}
        assert rows["Total errors"] == ["19", "3", "-84.21%"]
        assert rows["False negatives"] == ["12", "2", "-83.33%"]

    def test_skipped_without_baseline(self, tmp_path, caplog):
        run = write_run(
            tmp_path, "resnet50_finetune_a",
            metrics_from_cm(*CM_RESNET_FT), arch="resnet50", regime="finetune",
        )
        with caplog.at_level(logging.WARNING):
            assert table_improvement(collect_runs([run])) is None


class TestFrozenFinetuneTable:
    def test_per_architecture_gains(self, reference_runs):
        table = table_frozen_finetune(collect_runs(reference_runs))
        rows = {r[0]: r[1:] for r in table.rows}
        assert rows["ResNet50"] == ["92.93", "99.43", "+6.50", "+4.37"]
        assert rows["DenseNet121"] == ["94.46", "98.85", "+4.39", "+2.98"]
        assert rows["EfficientNet-B0"] == ["90.82", "96.37", "+5.55", "+4.04"]

    def test_average_row(self, reference_runs):
        table = table_frozen_finetune(collect_runs(reference_runs))
        assert table.rows[-1] == ["Average", "92.74", "98.22", "+5.48", "+3.80"]

    def test_skipped_without_regime_pairs(self, tmp_path):
        run = write_run(
            tmp_path, "resnet50_finetune_a",
            metrics_from_cm(*CM_RESNET_FT), arch="resnet50", regime="finetune",
        )
        assert table_frozen_finetune(collect_runs([run])) is None


class TestConfusionAndClinicalTables:
    def test_confusion_rows(self, reference_runs):
        table = table_confusion(collect_runs(reference_runs))
        assert row_by_model(table, "ResNet50 (fine-tuned)")[1:] == [
            "386", "134", "1", "2", "3", "0.52",
        ]
        assert row_by_model(table, "Custom CNN (scratch)")[1:] == [
            "376", "128", "7", "12", "19", "3.09",
        ]
        assert row_by_model(table, "EfficientNet-B0 (frozen)")[1:] == [
            "345", "130", "5", "43", "48", "11.08",
        ]

    def test_clinical_rows(self, reference_runs):
        table = table_clinical(collect_runs(reference_runs))
        assert row_by_model(table, "ResNet50 (fine-tuned)")[1:] == [
            "99.48", "99.26", "99.74", "98.53", "0.22",
        ]
        assert row_by_model(table, "DenseNet121 (fine-tuned)")[1:] == [
            "99.23", "97.78", "99.23", "97.78", "1.45",
        ]
        assert row_by_model(table, "Custom CNN (scratch)")[1:] == [
            "96.91", "94.81", "98.17", "91.43", "2.10",
        ]

    def test_per_class_rows(self, reference_runs):
        table = table_per_class(collect_runs(reference_runs))
        assert row_by_model(table, "ResNet50 (fine-tuned)")[1:] == [
            "98.53", "99.26", "98.89", "99.74", "99.48", "99.61",
        ]


class TestEnsembleTable:
    def test_rows(self, reference_runs):
        table = table_ensemble(collect_runs(reference_runs))
        rows = {r[0]: r[1:] for r in table.rows}
        assert rows["Simple averaging"] == ["99.04", "99.36", "99.90", "3", "2"]
        assert rows["Weighted averaging"] == ["99.04", "99.36", "99.90", "3", "2"]
        assert rows["Majority voting"] == ["99.04", "99.36", "98.63", "3", "2"]

    def test_absent_without_ensemble_runs(self, reference_runs):
        models_only = [r for r in reference_runs if not r.name.startswith("ensemble")]
        assert table_ensemble(collect_runs(models_only)) is None


class TestCollection:
    def test_run_without_metrics_is_skipped_with_warning(self, tmp_path, caplog):
        evaluated = write_run(
            tmp_path, "custom_cnn_scratch_a",
            metrics_from_cm(*CM_CUSTOM), arch="custom_cnn", regime="scratch",
        )
        bare = tmp_path / "resnet50_finetune_b"
        bare.mkdir()
        (bare / "config.json").write_text(json.dumps({"arch": "resnet50"}))
        with caplog.at_level(logging.WARNING):
            runs = collect_runs([evaluated, bare])
        assert [r.name for r in runs] == ["custom_cnn_scratch_a"]
        assert any("metrics.json" in r.message for r in caplog.records)

    def test_missing_directory_is_fatal(self, tmp_path):
        with pytest.raises(ReportError, match="not found"):
            collect_runs([tmp_path / "ghost"])

    def test_null_accuracy_sorts_last_and_renders_na(self, tmp_path):
        cm = ConfusionMatrix(0, 0, 0, 0)
        degenerate = {
            "n": 0,
            "confusion": cm.to_json(),
            "classification": classification_report(cm).to_json(),
            "clinical": clinical_report(cm).to_json(),
            "per_class": {
                k: v.to_json() for k, v in per_class_from_confusion(cm).items()
            },
        }
        runs = [
            write_run(tmp_path, "custom_cnn_scratch_a",
                      metrics_from_cm(*CM_CUSTOM), arch="custom_cnn", regime="scratch"),
            write_run(tmp_path, "resnet50_frozen_a", degenerate,
                      arch="resnet50", regime="frozen"),
        ]
        table = table_overall(collect_runs(runs))
        assert table.rows[-1][0] == "ResNet50 (frozen)"
        assert table.rows[-1][1:] == ["n/a"] * 5


class TestGenerateReport:
    def test_bundle_contents(self, reference_runs, tmp_path):
        out = tmp_path / "report"
        bundle = generate_report(reference_runs, out)
        assert [t.name for t in bundle.tables] == [
            "overall", "improvement", "frozen_finetune",
            "confusion", "clinical", "per_class", "ensemble",
        ]
        for table in bundle.tables:
            assert (out / f"table_{table.name}.csv").is_file()
            assert (out / f"table_{table.name}.md").is_file()
        assert (out / "report.md").is_file()
        # bar chart always renders; roc and gradcam need per-run artifacts
        assert set(bundle.figures) == {"metrics"}

    def test_csv_round_trip(self, reference_runs, tmp_path):
        out = tmp_path / "report"
        bundle = generate_report(reference_runs, out)
        overall = next(t for t in bundle.tables if t.name == "overall")
        with open(out / "table_overall.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == overall.header
        assert rows[1:] == overall.rows

    def test_markdown_shape(self, reference_runs):
        table = table_overall(collect_runs(reference_runs))
        text = markdown_table(table)
        lines = text.strip().split("\n")
        assert lines[0].startswith("| Model |")
        assert set(lines[1].replace("|", "").split()) == {"---"}
        assert len(lines) == 2 + len(table.rows)

    def test_regeneration_is_byte_identical(self, reference_runs, tmp_path):
        out = tmp_path / "report"
        generate_report(reference_runs, out)
        before = {
            p.name: p.read_bytes()
            for p in out.iterdir() if p.suffix in (".csv", ".md")
        }
        generate_report(reference_runs, out)
        for name, blob in before.items():
            assert (out / name).read_bytes() == blob, name

    def test_mixed_manifests_refused(self, tmp_path):
        a = write_run(tmp_path, "custom_cnn_scratch_a", metrics_from_cm(*CM_CUSTOM),
                      arch="custom_cnn", regime="scratch", manifest_hash="aaa")
        b = write_run(tmp_path, "resnet50_finetune_a", metrics_from_cm(*CM_RESNET_FT),
                      arch="resnet50", regime="finetune", manifest_hash="bbb")
        with pytest.raises(ReportError, match="manifest"):
            generate_report([a, b], tmp_path / "report")

    def test_mixed_manifests_allowed_with_force(self, tmp_path, caplog):
        a = write_run(tmp_path, "custom_cnn_scratch_a", metrics_from_cm(*CM_CUSTOM),
                      arch="custom_cnn", regime="scratch", manifest_hash="aaa")
        b = write_run(tmp_path, "resnet50_finetune_a", metrics_from_cm(*CM_RESNET_FT),
                      arch="resnet50", regime="finetune", manifest_hash="bbb")
        with caplog.at_level(logging.WARNING):
            bundle = generate_report([a, b], tmp_path / "report", force=True)
        assert bundle.tables

    def test_no_runs_is_fatal(self, tmp_path):
        with pytest.raises(ReportError, match="no evaluated runs"):
            generate_report([], tmp_path / "report")
