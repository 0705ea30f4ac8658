import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from evaluation.utils.clear_mot import (
    ClearMotCounts,
    MatchGate,
    UndefinedMetricError,
    accumulate_clear_mot,
)
from tracking.utils.threading import parallel_map
from tracking.utils.trajectories import TrajectorySet

SWEEP_COLUMNS = [
    "class_id",
    "recall_target",
    "threshold",
    "reachable",
    "motar",
    "motp",
    "recall",
    "fp",
    "fn",
    "ids",
]


@dataclass
class ClassMetrics:
    num_gt: int
    mota: float
    motp: Optional[float]
    recall: float
    fp: int
    fn: int
    ids: int
    frag: int
    amota: Optional[float] = None
    amotp: Optional[float] = None

    @classmethod
    def from_counts(cls, counts: ClearMotCounts, **kwargs) -> "ClassMetrics":
        return cls(
            num_gt=counts.num_gt,
            mota=counts.mota,
            motp=counts.motp,
            recall=counts.recall,
            fp=counts.fp,
            fn=counts.fn,
            ids=counts.ids,
            frag=counts.frag,
            **kwargs,
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MetricsReport:
    """Per-class and overall CLEAR-MOT and AMOTA numbers plus the recall sweep."""

    per_class: dict[int, ClassMetrics]
    overall: ClassMetrics
    sweep: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=SWEEP_COLUMNS)
    )

    def summary_table(self) -> pd.DataFrame:
        rows = {str(c): m.to_dict() for c, m in sorted(self.per_class.items())}
        rows["overall"] = self.overall.to_dict()
        return pd.DataFrame.from_dict(rows, orient="index")


def recall_targets(points: int = 40) -> np.ndarray:
    """Evenly spaced recall targets k / points, k = 1..points."""
    if points < 1:
        raise ValueError(f"The sweep needs at least one point, got {points}.")
    return np.arange(1, points + 1) / points


def motar(counts: ClearMotCounts, recall_target: float, num_gt: int) -> float:
    """Recall-normalized MOTA, clamped to [0, 1]."""
    errors = counts.ids + counts.fp + counts.fn - (1.0 - recall_target) * num_gt
    value = 1.0 - errors / (recall_target * num_gt)
    return float(min(1.0, max(0.0, value)))


def _filter_by_score(tracks: TrajectorySet, threshold: float) -> TrajectorySet:
    return TrajectorySet(tuple(t for t in tracks if t.confidence >= threshold))


def amota_for_class(
    pred_tracks: TrajectorySet,
    gt_tracks: TrajectorySet,
    class_id: int,
    gate: MatchGate,
    points: int = 40,
) -> tuple[ClearMotCounts, float, float, list[dict]]:
    """
    Sweep track-score thresholds for one class.

    The matched-prediction scores at the lowest threshold, sorted in
    descending order, give the threshold that reaches each recall target.
    Targets needing more matches than exist score 0 and contribute the gate
    distance to AMOTP.

    Returns:
        tuple: (counts at the lowest threshold, AMOTA, AMOTP, sweep rows).

    Raises:
        UndefinedMetricError: If the class has no ground truth.
    """
    preds = pred_tracks.of_class(class_id)
    gts = gt_tracks.of_class(class_id)
    counts, scores = accumulate_clear_mot(preds, gts, gate)
    num_gt = counts.num_gt
    if num_gt == 0:
        raise UndefinedMetricError(f"Class {class_id} has no ground truth.")
    tp_scores = sorted(scores, reverse=True)

    rows, motars, motps = [], [], []
    for r in recall_targets(points):
        needed = max(1, math.ceil(r * num_gt - 1e-9))
        row = {"class_id": class_id, "recall_target": float(r)}
        if needed > len(tp_scores):
            row.update(
                threshold=None,
                reachable=False,
                motar=0.0,
                motp=gate.max_distance,
                recall=None,
                fp=None,
                fn=None,
                ids=None,
            )
        else:
            threshold = tp_scores[needed - 1]
            sub, _ = accumulate_clear_mot(_filter_by_score(preds, threshold), gts, gate)
            value = motar(sub, float(r), num_gt)
            motp = sub.motp if sub.motp is not None else gate.max_distance
            row.update(
                threshold=threshold,
                reachable=True,
                motar=value,
                motp=motp,
                recall=sub.recall,
                fp=sub.fp,
                fn=sub.fn,
                ids=sub.ids,
            )
        motars.append(row["motar"])
        motps.append(row["motp"])
        rows.append(row)
    return counts, float(np.mean(motars)), float(np.mean(motps)), rows


def evaluate_tracking(
    pred_tracks: TrajectorySet,
    gt_tracks: TrajectorySet,
    gate: Optional[MatchGate] = None,
    points: int = 40,
    threads: int = 1,
) -> MetricsReport:
    """
    Full evaluation: CLEAR-MOT per class and overall, AMOTA/AMOTP per class.

    Overall AMOTA and AMOTP are means over the classes that have ground
    truth; the overall CLEAR-MOT counters are sums over those classes.

    Raises:
        UndefinedMetricError: If there is no ground truth at all.
    """
    gate = gate or MatchGate()
    classes = gt_tracks.classes
    if not classes or sum(len(t) for t in gt_tracks) == 0:
        raise UndefinedMetricError("Cannot evaluate without ground-truth states.")

    results = parallel_map(
        lambda c: amota_for_class(pred_tracks, gt_tracks, c, gate, points),
        classes,
        threads=threads,
    )
    per_class, total, sweep_rows = {}, ClearMotCounts(), []
    amotas, amotps = [], []
    for class_id, (counts, amota, amotp, rows) in zip(classes, results):
        per_class[class_id] = ClassMetrics.from_counts(
            counts, amota=amota, amotp=amotp
        )
        total = total + counts
        amotas.append(amota)
        amotps.append(amotp)
        sweep_rows.extend(rows)

    # Predictions of classes absent from the ground truth are false positives.
    stray = [t for t in pred_tracks if t.class_id not in set(classes)]
    total.fp += sum(len(t) for t in stray)

    overall = ClassMetrics.from_counts(
        total, amota=float(np.mean(amotas)), amotp=float(np.mean(amotps))
    )
    sweep = pd.DataFrame(sweep_rows, columns=SWEEP_COLUMNS)
    return MetricsReport(per_class=per_class, overall=overall, sweep=sweep)
