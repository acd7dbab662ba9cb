"""Classification, clinical and ROC metrics with PNEUMONIA as the positive class.

Everything here is a pure function over immutable inputs. Two rules apply
throughout:

- a metric whose denominator is zero is reported as None together with a
  note naming the reason; NaN never propagates into reports,
- internal math runs in full precision; 2-decimal percentage rounding happens
  at presentation time. The one deliberate exception is `balance`, defined as
  the absolute difference of the two-decimal sensitivity and specificity
  percentages, because that is the convention the reference tables follow.

AUC comes from trapezoidal integration of the threshold-swept ROC curve; a
brute-force pairwise implementation (`auc_pairwise`) is kept as an
independent cross-check and must agree to 1e-9.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import EvaluationError

POSITIVE_INDEX = 1
NEGATIVE_INDEX = 0
POSITIVE_NAME = "PNEUMONIA"
NEGATIVE_NAME = "NORMAL"
DECISION_THRESHOLD = 0.5

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class PredictionSet:
    """Aligned ids, true labels, positive probabilities and hard predictions."""

    ids: tuple[str, ...]
    y_true: tuple[int, ...]
    y_prob: tuple[float, ...]
    y_pred: tuple[int, ...]

    def __post_init__(self) -> None:
        n = len(self.ids)
        if not (len(self.y_true) == len(self.y_prob) == len(self.y_pred) == n):
            raise EvaluationError("prediction set fields must have equal lengths")
        if any(t not in (0, 1) for t in self.y_true):
            raise EvaluationError("y_true labels must be 0 (NORMAL) or 1 (PNEUMONIA)")
        if any(p not in (0, 1) for p in self.y_pred):
            raise EvaluationError("y_pred labels must be 0 (NORMAL) or 1 (PNEUMONIA)")
        if any(not math.isfinite(p) or not 0.0 <= p <= 1.0 for p in self.y_prob):
            raise EvaluationError("probabilities must be finite and lie in [0, 1]")
        if len(set(self.ids)) != n:
            raise EvaluationError("prediction set contains duplicate record ids")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_probabilities(
        cls,
        ids: Sequence[str],
        y_true: Sequence[int],
        y_prob: Sequence[float],
        threshold: float = DECISION_THRESHOLD,
    ) -> "PredictionSet":
        """Threshold positive probabilities; ties go to PNEUMONIA (prob >= t)."""
        y_pred = tuple(1 if p >= threshold else 0 for p in y_prob)
        return cls(
            ids=tuple(ids),
            y_true=tuple(int(t) for t in y_true),
            y_prob=tuple(float(p) for p in y_prob),
            y_pred=y_pred,
        )

    def inverted(self) -> "PredictionSet":
        """Swap the positive class; used by the per-class inversion identity."""
        return PredictionSet(
            ids=self.ids,
            y_true=tuple(1 - t for t in self.y_true),
            y_prob=tuple(1.0 - p for p in self.y_prob),
            y_pred=tuple(1 - p for p in self.y_pred),
        )


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise EvaluationError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def inverted(self) -> "ConfusionMatrix":
        return ConfusionMatrix(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)

    def to_json(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def confusion(preds: PredictionSet) -> ConfusionMatrix:
    """Count TP/TN/FP/FN with PNEUMONIA positive."""
    if len(preds) == 0:
        raise EvaluationError("cannot build a confusion matrix from zero predictions")
    tp = tn = fp = fn = 0
    for t, p in zip(preds.y_true, preds.y_pred):
        if t == 1 and p == 1:
            tp += 1
        elif t == 0 and p == 0:
            tn += 1
        elif t == 0 and p == 1:
            fp += 1
        else:
            fn += 1
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)


def confusion_at_threshold(
    y_true: Sequence[int], y_prob: Sequence[float], threshold: float
) -> ConfusionMatrix:
    preds = PredictionSet.from_probabilities(
        ids=tuple(str(i) for i in range(len(y_true))),
        y_true=y_true,
        y_prob=y_prob,
        threshold=threshold,
    )
    return confusion(preds)


def _ratio(num: int, den: int, metric: str, notes: dict[str, str]) -> Optional[float]:
    if den == 0:
        notes[metric] = f"undefined: denominator {metric} count is zero"
        return None
    return num / den


@dataclass(frozen=True)
class ClassificationReport:
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    auc: Optional[float]
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "notes": self.notes,
        }


def _f1(p: Optional[float], r: Optional[float], notes: dict[str, str]) -> Optional[float]:
    if p is None or r is None:
        notes["f1"] = "undefined: precision or recall undefined"
        return None
    if p + r == 0:
        notes["f1"] = "undefined: precision + recall is zero"
        return None
    return 2 * p * r / (p + r)


def classification_report(
    cm: ConfusionMatrix, preds: Optional[PredictionSet] = None
) -> ClassificationReport:
    """Accuracy/precision/recall/F1 from counts, AUC from scores when given."""
    notes: dict[str, str] = {}
    accuracy = _ratio(cm.tp + cm.tn, cm.n, "accuracy", notes)
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", notes)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", notes)
    f1 = _f1(precision, recall, notes)
    auc = None
    if preds is None:
        notes["auc"] = "not computed: probability scores unavailable"
    else:
        if confusion(preds).to_json() != cm.to_json():
            raise EvaluationError("confusion matrix inconsistent with predictions")
        try:
            _, auc = roc_and_auc(preds)
        except EvaluationError as exc:
            notes["auc"] = f"undefined: {exc}"
    return ClassificationReport(
        accuracy=accuracy, precision=precision, recall=recall, f1=f1, auc=auc, notes=notes
    )


@dataclass(frozen=True)
class ClinicalReport:
    sensitivity: Optional[float]
    specificity: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]
    balance: Optional[float]
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "ppv": self.ppv,
            "npv": self.npv,
            "balance": self.balance,
            "notes": self.notes,
        }


def clinical_report(cm: ConfusionMatrix) -> ClinicalReport:
    """Sensitivity, specificity, PPV, NPV and their balance.

    balance = |sensitivity - specificity| in percentage points, computed over
    the 2-decimal percentage renderings of the two rates so it matches the
    displayed table cells it sits next to.
    """
    notes: dict[str, str] = {}
    sens = _ratio(cm.tp, cm.tp + cm.fn, "sensitivity", notes)
    spec = _ratio(cm.tn, cm.tn + cm.fp, "specificity", notes)
    ppv = _ratio(cm.tp, cm.tp + cm.fp, "ppv", notes)
    npv = _ratio(cm.tn, cm.tn + cm.fn, "npv", notes)
    if sens is None or spec is None:
        notes["balance"] = "undefined: sensitivity or specificity undefined"
        balance = None
    else:
        balance = abs(round(sens * 100.0, 2) - round(spec * 100.0, 2))
        balance = round(balance, 2)
    return ClinicalReport(
        sensitivity=sens, specificity=spec, ppv=ppv, npv=npv, balance=balance, notes=notes
    )


@dataclass(frozen=True)
class ClassMetrics:
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "notes": self.notes,
        }


def _class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    notes: dict[str, str] = {}
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", notes)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", notes)
    f1 = _f1(precision, recall, notes)
    return ClassMetrics(precision=precision, recall=recall, f1=f1, notes=notes)


def per_class_from_confusion(cm: ConfusionMatrix) -> dict[str, ClassMetrics]:
    """NORMAL metrics are the positive-class metrics of the inverted matrix."""
    return {
        NEGATIVE_NAME: _class_metrics(cm.inverted()),
        POSITIVE_NAME: _class_metrics(cm),
    }


def per_class_metrics(preds: PredictionSet) -> dict[str, ClassMetrics]:
    return per_class_from_confusion(confusion(preds))


@dataclass(frozen=True)
class RocCurve:
    """Threshold sweep anchored at (0,0) and (1,1), thresholds descending."""

    thresholds: tuple[float, ...]
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.thresholds) == len(self.fpr) == len(self.tpr)):
            raise EvaluationError("ROC arrays must have equal lengths")
        if any(b > a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise EvaluationError("ROC thresholds must be descending")
        for name, seq in (("fpr", self.fpr), ("tpr", self.tpr)):
            if any(b < a - 1e-12 for a, b in zip(seq, seq[1:])):
                raise EvaluationError(f"ROC {name} must be nondecreasing")
        if self.fpr[0] != 0.0 or self.tpr[0] != 0.0:
            raise EvaluationError("ROC must start at (0, 0)")
        if self.fpr[-1] != 1.0 or self.tpr[-1] != 1.0:
            raise EvaluationError("ROC must end at (1, 1)")


def roc_and_auc(preds: PredictionSet) -> tuple[RocCurve, float]:
    """Sweep unique descending score thresholds; AUC by trapezoidal rule.

    The decision rule at each threshold t is prob >= t, so the lowest score
    always yields the (1, 1) corner; an infinite leading threshold supplies
    (0, 0).
    """
    y_true = np.asarray(preds.y_true, dtype=np.int64)
    y_prob = np.asarray(preds.y_prob, dtype=np.float64)
    n_pos = int((y_true == 1).sum())
    n_neg = int((y_true == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(
            "ROC requires both classes in y_true "
            f"(positives={n_pos}, negatives={n_neg})"
        )

    order = np.argsort(-y_prob, kind="stable")
    sorted_prob = y_prob[order]
    sorted_true = y_true[order]
    tp_cum = np.cumsum(sorted_true)
    fp_cum = np.cumsum(1 - sorted_true)
    # keep the last index of every run of equal scores: that is the state
    # after all records with prob >= that threshold are called positive
    last_of_value = np.nonzero(np.diff(sorted_prob, append=-np.inf))[0]

    thresholds = [math.inf]
    fpr = [0.0]
    tpr = [0.0]
    for i in last_of_value:
        thresholds.append(float(sorted_prob[i]))
        fpr.append(float(fp_cum[i]) / n_neg)
        tpr.append(float(tp_cum[i]) / n_pos)
    curve = RocCurve(thresholds=tuple(thresholds), fpr=tuple(fpr), tpr=tuple(tpr))
    auc = float(_trapezoid(np.asarray(curve.tpr), np.asarray(curve.fpr)))
    return curve, auc


def auc_pairwise(preds: PredictionSet) -> float:
    """Brute-force AUC: P(score_pos > score_neg) + 0.5 P(tie).

    Quadratic in n; exists as an independent oracle for the trapezoidal AUC.
    """
    pos = [p for p, t in zip(preds.y_prob, preds.y_true) if t == 1]
    neg = [p for p, t in zip(preds.y_prob, preds.y_true) if t == 0]
    if not pos or not neg:
        raise EvaluationError("pairwise AUC requires both classes in y_true")
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# Artifact IO: predictions.csv, metrics.json, roc.csv
# ---------------------------------------------------------------------------

def evaluate_predictions(preds: PredictionSet) -> dict:
    """Full metrics payload for one prediction set (the metrics.json schema)."""
    cm = confusion(preds)
    cls_report = classification_report(cm, preds)
    clin_report = clinical_report(cm)
    per_class = per_class_from_confusion(cm)
    return {
        "n": len(preds),
        "confusion": cm.to_json(),
        "classification": cls_report.to_json(),
        "clinical": clin_report.to_json(),
        "per_class": {name: m.to_json() for name, m in per_class.items()},
    }


def write_metrics_json(metrics: dict, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")


def read_metrics_json(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.is_file():
        raise EvaluationError(f"metrics file not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def write_predictions_csv(preds: PredictionSet, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "y_true", "y_prob", "y_pred"])
        for rec_id, t, p, pred in zip(preds.ids, preds.y_true, preds.y_prob, preds.y_pred):
            writer.writerow([rec_id, t, repr(p), pred])


def read_predictions_csv(path: Union[str, Path]) -> PredictionSet:
    path = Path(path)
    if not path.is_file():
        raise EvaluationError(f"predictions file not found: {path}")
    ids: list[str] = []
    y_true: list[int] = []
    y_prob: list[float] = []
    y_pred: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "y_true", "y_prob", "y_pred"]:
            raise EvaluationError(f"unexpected predictions header in {path}")
        for row in reader:
            ids.append(row["id"])
            y_true.append(int(row["y_true"]))
            y_prob.append(float(row["y_prob"]))
            y_pred.append(int(row["y_pred"]))
    return PredictionSet(
        ids=tuple(ids), y_true=tuple(y_true), y_prob=tuple(y_prob), y_pred=tuple(y_pred)
    )


def write_roc_csv(curve: RocCurve, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, f, r in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow(["inf" if math.isinf(t) else repr(t), repr(f), repr(r)])
