"""Prediction combination: simple average, F1-weighted average, majority vote.

Members are aligned per-model prediction sets over the same records in the
same order; any id or label disagreement is fatal rather than silently
reindexed. Every combiner applies the positive tie rule: a combined
probability (or vote fraction) of exactly 0.5 predicts PNEUMONIA.

Weighted averaging takes each member's weight from its validation F1 by
default; weighting by test F1 and then evaluating on test leaks label
information, so that path exists only behind an explicit option.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from .errors import EnsembleError
from .metrics import PredictionSet, read_metrics_json, read_predictions_csv

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MemberPrediction:
    """One model's predictions plus the weight used by weighted averaging."""

    model_name: str
    preds: PredictionSet
    weight: Optional[float] = None


def _check_members(members: Sequence[MemberPrediction]) -> None:
    if len(members) < 2:
        raise EnsembleError(f"an ensemble needs at least 2 members, got {len(members)}")
    first = members[0].preds
    for member in members[1:]:
        if member.preds.ids != first.ids:
            raise EnsembleError(
                f"member {member.model_name!r} ids are not aligned with "
                f"{members[0].model_name!r}"
            )
        if member.preds.y_true != first.y_true:
            raise EnsembleError(
                f"member {member.model_name!r} disagrees on true labels"
            )


def simple_average(members: Sequence[MemberPrediction]) -> PredictionSet:
    """Equal-weight mean of member probabilities, threshold 0.5."""
    _check_members(members)
    n = len(members[0].preds)
    y_prob = [
        sum(m.preds.y_prob[i] for m in members) / len(members) for i in range(n)
    ]
    return PredictionSet.from_probabilities(
        ids=members[0].preds.ids, y_true=members[0].preds.y_true, y_prob=y_prob
    )


def weighted_average(
    members: Sequence[MemberPrediction],
    weights: Optional[Sequence[float]] = None,
) -> PredictionSet:
    """Convex combination of member probabilities.

    Weights default to the members' stored weights (validation F1). They must
    be non-negative and not all zero; they are normalized internally.
    """
    _check_members(members)
    if weights is None:
        missing = [m.model_name for m in members if m.weight is None]
        if missing:
            raise EnsembleError(
                f"members without a weight (evaluate their weight split first): {missing}"
            )
        weights = [m.weight for m in members]  # type: ignore[misc]
    if len(weights) != len(members):
        raise EnsembleError(
            f"{len(weights)} weights for {len(members)} members"
        )
    if any(w < 0 for w in weights):
        raise EnsembleError(f"weights must be non-negative: {list(weights)}")
    total = sum(weights)
    if total == 0:
        raise EnsembleError("weights sum to zero; nothing to average")
    n = len(members[0].preds)
    y_prob = [
        sum(w * m.preds.y_prob[i] for w, m in zip(weights, members)) / total
        for i in range(n)
    ]
    return PredictionSet.from_probabilities(
        ids=members[0].preds.ids, y_true=members[0].preds.y_true, y_prob=y_prob
    )


def majority_vote(members: Sequence[MemberPrediction]) -> PredictionSet:
    """Most-voted class per record; exact ties go to PNEUMONIA.

    The pseudo-probability is the PNEUMONIA vote fraction, which makes the
    ROC of a vote ensemble a coarse step function rather than a real curve.
    """
    _check_members(members)
    n = len(members[0].preds)
    ids = members[0].preds.ids
    y_true = members[0].preds.y_true
    y_prob = []
    y_pred = []
    for i in range(n):
        votes = sum(m.preds.y_pred[i] for m in members)
        y_prob.append(votes / len(members))
        y_pred.append(1 if 2 * votes >= len(members) else 0)
    return PredictionSet(
        ids=ids, y_true=y_true, y_prob=tuple(y_prob), y_pred=tuple(y_pred)
    )


ENSEMBLE_METHODS = {
    "simple": simple_average,
    "weighted": weighted_average,
    "vote": majority_vote,
}


def load_member(
    run_dir: Union[str, Path], weight_source: str = "val"
) -> MemberPrediction:
    """Member from a run directory's test predictions and F1 weight.

    weight_source "val" reads metrics_val.json, "test" reads metrics.json.
    A missing weight file leaves weight=None, which only blocks weighted
    averaging.
    """
    run_dir = Path(run_dir)
    preds = read_predictions_csv(run_dir / "predictions.csv")
    if weight_source not in ("val", "test"):
        raise EnsembleError(f"weight_source must be 'val' or 'test': {weight_source!r}")
    metrics_name = "metrics_val.json" if weight_source == "val" else "metrics.json"
    weight = None
    metrics_path = run_dir / metrics_name
    if metrics_path.is_file():
        weight = read_metrics_json(metrics_path)["classification"]["f1"]
    else:
        logger.warning(
            "no %s in %s; member carries no weight", metrics_name, run_dir
        )
    return MemberPrediction(model_name=run_dir.name, preds=preds, weight=weight)
