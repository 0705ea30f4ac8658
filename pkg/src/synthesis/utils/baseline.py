from typing import Sequence

from tracking.utils.features import Detection3D
from tracking.utils.geometry import bev_iou
from tracking.utils.trajectories import TrackState, Trajectory, TrajectorySet


def oracle_greedy_baseline(
    frames: Sequence[Sequence[Detection3D]], iou_min: float = 0.1
) -> TrajectorySet:
    """
    Frame-to-frame greedy association by BEV IoU.

    A track stays open only while it is extended in every frame. Candidate
    (track, detection) pairs of the same class with IoU >= iou_min are taken
    in descending IoU order (ties by track id, then detection id); leftover
    detections open new tracks. There is no motion model and no gap bridging.

    Args:
        frames: Detections per frame, frame index ascending.
        iou_min (float): Minimum BEV IoU between the track's last box and the
            detection.

    Returns:
        TrajectorySet: Tracks with ids in creation order.
    """
    if not 0.0 <= iou_min <= 1.0:
        raise ValueError(f"iou_min must lie in [0, 1], got {iou_min}.")
    tracks: list[list[Detection3D]] = []
    open_tracks: list[int] = []

    for frame_dets in frames:
        dets = sorted(frame_dets, key=lambda d: d.det_id)
        candidates = []
        for t_idx in open_tracks:
            last = tracks[t_idx][-1]
            for d_idx, det in enumerate(dets):
                if det.class_id != last.class_id:
                    continue
                iou = bev_iou(last.box, det.box)
                if iou >= iou_min and iou > 0.0:
                    candidates.append((-iou, t_idx, det.det_id, d_idx))
        candidates.sort()

        used_tracks, used_dets = set(), set()
        for _, t_idx, _, d_idx in candidates:
            if t_idx in used_tracks or d_idx in used_dets:
                continue
            tracks[t_idx].append(dets[d_idx])
            used_tracks.add(t_idx)
            used_dets.add(d_idx)

        next_open = sorted(used_tracks)
        for d_idx, det in enumerate(dets):
            if d_idx not in used_dets:
                tracks.append([det])
                next_open.append(len(tracks) - 1)
        open_tracks = next_open

    return TrajectorySet(
        tuple(
            Trajectory(
                track_id=k,
                class_id=members[0].class_id,
                states=tuple(TrackState.from_detection(d) for d in members),
            )
            for k, members in enumerate(tracks)
        )
    )
