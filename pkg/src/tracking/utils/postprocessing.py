import math
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d
from scipy.stats import circmean

from tracking.utils.geometry import (
    Box3D,
    bev_iou,
    box_from_mean_pose,
    signed_yaw_diff,
    wrap_angle,
)
from tracking.utils.trajectories import TrackState, Trajectory, TrajectorySet

DEFAULT_SMOOTHING_WEIGHTS = (0.25, 0.5, 0.25)
PAIRING_MODES = ("all", "consecutive")


def _lerp(a, b, alpha: float) -> tuple[float, ...]:
    return tuple(float(x + alpha * (y - x)) for x, y in zip(a, b))


def interpolate_gaps(t: Trajectory) -> Trajectory:
    """
    Fill every missing frame between the first and last state.

    Center, size, velocity, score and timestamp are interpolated linearly, yaw
    along the shorter arc. Interpolated states carry no detection id.
    """
    if len(t.states) < 2:
        return t
    filled = [t.states[0]]
    for prev, nxt in zip(t.states, t.states[1:]):
        gap = nxt.frame_index - prev.frame_index
        for step in range(1, gap):
            alpha = step / gap
            yaw = wrap_angle(
                prev.box.yaw + alpha * signed_yaw_diff(nxt.box.yaw, prev.box.yaw)
            )
            filled.append(
                TrackState(
                    frame_index=prev.frame_index + step,
                    box=Box3D(
                        center=_lerp(prev.box.center, nxt.box.center, alpha),
                        size=_lerp(prev.box.size, nxt.box.size, alpha),
                        yaw=yaw,
                    ),
                    velocity=_lerp(prev.velocity, nxt.velocity, alpha),
                    score=prev.score + alpha * (nxt.score - prev.score),
                    timestamp=prev.timestamp + alpha * (nxt.timestamp - prev.timestamp),
                )
            )
        filled.append(nxt)
    return t.with_states(filled)


def normalize_yaws(t: Trajectory) -> Trajectory:
    """Wrap every yaw onto [-pi, pi)."""
    return t.with_states(
        TrackState(
            frame_index=s.frame_index,
            box=Box3D(s.box.center, s.box.size, wrap_angle(s.box.yaw)),
            velocity=s.velocity,
            score=s.score,
            timestamp=s.timestamp,
            det_id=s.det_id,
        )
        for s in t.states
    )


def intra_track_bev_iou(t: Trajectory, pairing: str = "all") -> float:
    """
    Stillness measure of a track: the product of BEV IoUs of its state pairs.

    Args:
        t (Trajectory): Track with at least one state.
        pairing (str): "all" uses every unordered pair, "consecutive" only
            neighbouring states.

    Returns:
        float: Value in [0, 1]; 1 for a single-state track.
    """
    if pairing not in PAIRING_MODES:
        raise ValueError(
            f"Unknown pairing '{pairing}', expected one of {PAIRING_MODES}."
        )
    boxes = [s.box for s in t.states]
    pairs = combinations(boxes, 2) if pairing == "all" else zip(boxes, boxes[1:])
    product = 1.0
    for a, b in pairs:
        product *= bev_iou(a, b)
        if product == 0.0:
            break
    return product


def _circular_two_means(yaws: np.ndarray, max_iter: int = 50) -> np.ndarray:
    """Split yaws into two circular clusters seeded at yaws[0] and yaws[0] + pi."""
    centers = [wrap_angle(float(yaws[0])), wrap_angle(float(yaws[0]) + math.pi)]
    labels = np.full(len(yaws), -1)
    for _ in range(max_iter):
        new_labels = np.array(
            [
                0
                if abs(signed_yaw_diff(y, centers[0]))
                <= abs(signed_yaw_diff(y, centers[1]))
                else 1
                for y in yaws
            ]
        )
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in (0, 1):
            members = yaws[labels == k]
            if len(members):
                centers[k] = float(circmean(members, high=math.pi, low=-math.pi))
    return labels


def correct_yaw_flips(
    t: Trajectory, still_iou_min: float = 0.7, pairing: str = "all"
) -> Trajectory:
    """
    Undo heading flips of a still-standing track.

    If the track's intra-track BEV IoU exceeds still_iou_min, its yaws are
    split into two regimes and every yaw is replaced by the circular mean of
    the larger regime (ties go to the regime of the first state).
    """
    if not t.states or intra_track_bev_iou(t, pairing) <= still_iou_min:
        return t
    yaws = np.array([s.box.yaw for s in t.states], dtype=float)
    labels = _circular_two_means(yaws)
    majority = 0 if np.sum(labels == 0) >= np.sum(labels == 1) else 1
    yaw = wrap_angle(
        float(circmean(yaws[labels == majority], high=math.pi, low=-math.pi))
    )
    return t.with_states(
        TrackState(
            frame_index=s.frame_index,
            box=Box3D(s.box.center, s.box.size, yaw),
            velocity=s.velocity,
            score=s.score,
            timestamp=s.timestamp,
            det_id=s.det_id,
        )
        for s in t.states
    )


class _UnionFind:
    def __init__(self, keys):
        self.parent = {k: k for k in keys}

    def find(self, k):
        while self.parent[k] != k:
            self.parent[k] = self.parent[self.parent[k]]
            k = self.parent[k]
        return k

    def union(self, a, b):
        self.parent[self.find(b)] = self.find(a)


def _merge_group(members: list[Trajectory]) -> Trajectory:
    # Earliest track (ties by id) lends its id
    head = min(members, key=lambda t: (t.first_frame, t.track_id))
    states = sorted(
        (s for t in members for s in t.states), key=lambda s: s.frame_index
    )
    return Trajectory(
        track_id=head.track_id, class_id=head.class_id, states=tuple(states)
    )


def _join_pass(
    tracks: list[Trajectory], still_iou_min: float, join_iou_min: float, pairing: str
) -> tuple[list[Trajectory], bool]:
    still = {
        t.track_id: box_from_mean_pose([s.box for s in t.states])
        for t in tracks
        if t.states and intra_track_bev_iou(t, pairing) > still_iou_min
    }
    by_id = {t.track_id: t for t in tracks}
    uf = _UnionFind(by_id)
    group_frames = {t.track_id: set(t.frames) for t in tracks}

    ids = sorted(still)
    for a, b in combinations(ids, 2):
        if by_id[a].class_id != by_id[b].class_id:
            continue
        ra, rb = uf.find(a), uf.find(b)
        if ra == rb or group_frames[ra] & group_frames[rb]:
            continue
        if bev_iou(still[a], still[b]) > join_iou_min:
            uf.union(ra, rb)
            group_frames[ra] |= group_frames.pop(rb)

    groups: dict[int, list[Trajectory]] = {}
    for t in tracks:
        groups.setdefault(uf.find(t.track_id), []).append(t)
    if all(len(g) == 1 for g in groups.values()):
        return tracks, False

    merged = {root: _merge_group(g) for root, g in groups.items()}
    out = []
    for t in tracks:
        root = uf.find(t.track_id)
        if root in merged and merged[root].track_id == t.track_id:
            out.append(merged.pop(root))
    return out, True


def join_still_tracks(
    ts: TrajectorySet,
    still_iou_min: float = 0.7,
    join_iou_min: float = 0.6,
    pairing: str = "all",
) -> TrajectorySet:
    """
    Merge time-disjoint fragments of the same parked object.

    Two same-class tracks are joined when both are still (intra-track BEV IoU
    above still_iou_min), they share no frame, and the BEV IoU of their
    mean-pose boxes exceeds join_iou_min. Merging is transitive and repeats
    until no pair qualifies, so the result is a fixed point. A merged track
    keeps the id of its earliest member and takes that member's position in
    the output.

    Args:
        ts (TrajectorySet): Per-track refined trajectories.
        still_iou_min (float): Stillness gate.
        join_iou_min (float): Mean-pose IoU gate.
        pairing (str): Pairing mode of the stillness measure.

    Returns:
        TrajectorySet: At most as many tracks as the input.
    """
    tracks = list(ts.tracks)
    changed = True
    while changed:
        tracks, changed = _join_pass(tracks, still_iou_min, join_iou_min, pairing)
    return TrajectorySet(tuple(tracks))


def _validate_kernel(window: int, weights: Sequence[float]) -> np.ndarray:
    kernel = np.asarray(weights, dtype=float)
    if window < 1 or window % 2 == 0:
        raise ValueError(
            f"Smoothing window must be a positive odd integer, got {window}."
        )
    if kernel.shape != (window,):
        raise ValueError(
            f"Smoothing needs {window} weights, got {kernel.size}."
        )
    if np.any(kernel < 0) or not np.isclose(kernel.sum(), 1.0, atol=1e-9):
        raise ValueError(
            f"Smoothing weights must be nonnegative and sum to 1, got {list(weights)}."
        )
    return kernel


def smooth_track(
    t: Trajectory,
    window: int = 3,
    weights: Sequence[float] = DEFAULT_SMOOTHING_WEIGHTS,
) -> Trajectory:
    """
    Weighted running average of centers and velocities.

    Near the ends the kernel is renormalised over the taps that exist. Sizes,
    yaws and scores are left untouched.

    Raises:
        ValueError: If the window is not odd or the weights do not form a
            nonnegative kernel summing to 1.
    """
    kernel = _validate_kernel(window, weights)
    if len(t.states) < 2:
        return t

    centers = np.array([s.box.center for s in t.states], dtype=float)
    velocities = np.array([s.velocity for s in t.states], dtype=float)
    norm = correlate1d(np.ones(len(t.states)), kernel, mode="constant", cval=0.0)

    def run(values: np.ndarray) -> np.ndarray:
        summed = correlate1d(values, kernel, axis=0, mode="constant", cval=0.0)
        return summed / norm[:, None]

    centers, velocities = run(centers), run(velocities)
    return t.with_states(
        TrackState(
            frame_index=s.frame_index,
            box=Box3D(tuple(map(float, c)), s.box.size, s.box.yaw),
            velocity=tuple(map(float, v)),
            score=s.score,
            timestamp=s.timestamp,
            det_id=s.det_id,
        )
        for s, c, v in zip(t.states, centers, velocities)
    )


def refine_trajectories(
    ts: TrajectorySet,
    still_iou_min: float = 0.7,
    join_iou_min: float = 0.6,
    smoothing_window: int = 3,
    smoothing_weights: Sequence[float] = DEFAULT_SMOOTHING_WEIGHTS,
    pairing: str = "all",
    interpolate: bool = True,
    correct_yaw: bool = True,
    join_still: bool = True,
    smooth: bool = True,
) -> TrajectorySet:
    """
    Run the refinement chain on one scene's trajectories.

    Order: gap interpolation, yaw normalisation and flip correction per track,
    still-track joining across tracks, then smoothing per track. Each stage
    can be switched off; yaw normalisation always runs.
    """
    _validate_kernel(smoothing_window, smoothing_weights)

    def per_track(t: Trajectory) -> Trajectory:
        if interpolate:
            t = interpolate_gaps(t)
        t = normalize_yaws(t)
        if correct_yaw:
            t = correct_yaw_flips(t, still_iou_min, pairing)
        return t

    refined = TrajectorySet(tuple(per_track(t) for t in ts))
    if join_still:
        refined = join_still_tracks(refined, still_iou_min, join_iou_min, pairing)

    def finish(t: Trajectory) -> Trajectory:
        if interpolate:
            t = interpolate_gaps(t)
        if smooth:
            t = smooth_track(t, smoothing_window, smoothing_weights)
        return t

    return TrajectorySet(tuple(finish(t) for t in refined))
