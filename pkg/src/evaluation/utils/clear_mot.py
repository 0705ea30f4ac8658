from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from evaluation.utils.assignment import gated_assign
from tracking.utils.geometry import Box3D, center_distance_xy
from tracking.utils.trajectories import TrajectorySet


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined, e.g. MOTA without ground truth."""


@dataclass(frozen=True)
class MatchGate:
    """Pairs farther apart than max_distance (BEV centers) never match."""

    max_distance: float = 2.0
    class_equal: bool = True

    def __post_init__(self):
        if not self.max_distance > 0:
            raise ValueError(
                f"Gate distance must be positive, got {self.max_distance}."
            )

    def allows(self, pred: "FrameObject", gt: "FrameObject") -> bool:
        if self.class_equal and pred.class_id != gt.class_id:
            return False
        return center_distance_xy(pred.box, gt.box) <= self.max_distance


@dataclass(frozen=True)
class FrameObject:
    """One track state seen in one frame."""

    track_id: int
    class_id: int
    box: Box3D
    score: float = 1.0


@dataclass
class FrameMatch:
    matches: list = field(default_factory=list)  # (pred_idx, gt_idx, distance)
    unmatched_preds: list = field(default_factory=list)
    unmatched_gts: list = field(default_factory=list)


@dataclass
class ClearMotCounts:
    num_gt: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    frag: int = 0
    distance_sum: float = 0.0

    @property
    def mota(self) -> float:
        if self.num_gt == 0:
            raise UndefinedMetricError("MOTA is undefined without ground truth.")
        return 1.0 - (self.fp + self.fn + self.ids) / self.num_gt

    @property
    def recall(self) -> float:
        if self.num_gt == 0:
            raise UndefinedMetricError("Recall is undefined without ground truth.")
        return self.tp / self.num_gt

    @property
    def motp(self) -> Optional[float]:
        """Mean matched center distance; None without matches."""
        return self.distance_sum / self.tp if self.tp else None

    def __add__(self, other: "ClearMotCounts") -> "ClearMotCounts":
        return ClearMotCounts(
            num_gt=self.num_gt + other.num_gt,
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            ids=self.ids + other.ids,
            frag=self.frag + other.frag,
            distance_sum=self.distance_sum + other.distance_sum,
        )


def frame_objects(tracks: TrajectorySet) -> dict[int, list[FrameObject]]:
    """Index the states of all tracks by frame, ordered by track id."""
    frames: dict[int, list[FrameObject]] = {}
    for track in sorted(tracks, key=lambda t: t.track_id):
        score = track.confidence
        for state in track.states:
            frames.setdefault(state.frame_index, []).append(
                FrameObject(track.track_id, track.class_id, state.box, score)
            )
    return frames


def match_frame(
    preds: list[FrameObject],
    gts: list[FrameObject],
    gate: MatchGate,
    previous: Optional[dict[int, int]] = None,
) -> FrameMatch:
    """
    Match predictions to ground truth in one frame.

    Args:
        preds (list[FrameObject]): Predicted states.
        gts (list[FrameObject]): Ground-truth states.
        gate (MatchGate): Distance and class gate.
        previous (Optional[dict[int, int]]): GT track id -> pred track id
            matched in the previous frame. Such pairs are kept when they
            still pass the gate, and the rest is solved with the Hungarian
            method over center distances.

    Returns:
        FrameMatch: Matches as (pred index, gt index, distance) plus the
            unmatched indices on both sides.
    """
    previous = previous or {}
    pred_pos = {p.track_id: k for k, p in enumerate(preds)}
    matches = []
    used_p, used_g = set(), set()
    for g_idx, gt in enumerate(gts):
        p_idx = pred_pos.get(previous.get(gt.track_id))
        if p_idx is None or p_idx in used_p:
            continue
        if gate.allows(preds[p_idx], gt):
            dist = center_distance_xy(preds[p_idx].box, gt.box)
            matches.append((p_idx, g_idx, dist))
            used_p.add(p_idx)
            used_g.add(g_idx)

    free_p = [k for k in range(len(preds)) if k not in used_p]
    free_g = [k for k in range(len(gts)) if k not in used_g]
    if free_p and free_g:
        cost = np.array(
            [
                [center_distance_xy(preds[p].box, gts[g].box) for g in free_g]
                for p in free_p
            ]
        )
        allowed = np.array(
            [[gate.allows(preds[p], gts[g]) for g in free_g] for p in free_p]
        )
        for r, c in gated_assign(cost, allowed):
            matches.append((free_p[r], free_g[c], float(cost[r, c])))
            used_p.add(free_p[r])
            used_g.add(free_g[c])

    matches.sort(key=lambda m: m[1])
    return FrameMatch(
        matches=matches,
        unmatched_preds=[k for k in range(len(preds)) if k not in used_p],
        unmatched_gts=[k for k in range(len(gts)) if k not in used_g],
    )


def accumulate_clear_mot(
    pred_tracks: TrajectorySet,
    gt_tracks: TrajectorySet,
    gate: MatchGate,
) -> tuple[ClearMotCounts, list[float]]:
    """
    Run the frame-by-frame CLEAR-MOT accounting.

    IDS is counted when a GT object is matched in two consecutive GT states to
    different tracks. FRAG is counted once per resumed gap (matched, then
    unmatched, then matched again).

    Returns:
        tuple: (counts, confidence of the predicted track of every match).
    """
    preds_by_frame = frame_objects(pred_tracks)
    gts_by_frame = frame_objects(gt_tracks)
    counts = ClearMotCounts()
    matched_scores: list[float] = []

    previous: dict[int, int] = {}
    last_status: dict[int, Optional[int]] = {}  # GT id -> pred id or None
    ever_matched: set[int] = set()

    for frame in sorted(set(preds_by_frame) | set(gts_by_frame)):
        preds = preds_by_frame.get(frame, [])
        gts = gts_by_frame.get(frame, [])
        result = match_frame(preds, gts, gate, previous)

        counts.num_gt += len(gts)
        counts.tp += len(result.matches)
        counts.fp += len(result.unmatched_preds)
        counts.fn += len(result.unmatched_gts)

        current: dict[int, int] = {}
        for p_idx, g_idx, dist in result.matches:
            gt_id, pred_id = gts[g_idx].track_id, preds[p_idx].track_id
            counts.distance_sum += dist
            matched_scores.append(preds[p_idx].score)
            prev = last_status.get(gt_id)
            if prev is not None and prev != pred_id:
                counts.ids += 1
            if gt_id in ever_matched and gt_id in last_status and prev is None:
                counts.frag += 1
            current[gt_id] = pred_id
            ever_matched.add(gt_id)
        for g_idx in result.unmatched_gts:
            last_status[gts[g_idx].track_id] = None
        last_status.update(current)
        previous = current
    return counts, matched_scores


def clear_mot(
    pred_tracks: TrajectorySet,
    gt_tracks: TrajectorySet,
    gate: Optional[MatchGate] = None,
) -> ClearMotCounts:
    """CLEAR-MOT counters of the predicted against the ground-truth tracks."""
    counts, _ = accumulate_clear_mot(pred_tracks, gt_tracks, gate or MatchGate())
    return counts
