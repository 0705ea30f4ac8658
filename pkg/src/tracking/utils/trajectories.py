from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

from tracking.utils.features import Detection3D
from tracking.utils.geometry import Box3D


@dataclass(frozen=True)
class TrackState:
    frame_index: int
    box: Box3D
    velocity: tuple[float, float]
    score: float
    timestamp: float
    det_id: Optional[int] = None

    @classmethod
    def from_detection(cls, det: Detection3D) -> "TrackState":
        return cls(
            frame_index=det.frame_index,
            box=det.box,
            velocity=det.velocity,
            score=det.score,
            timestamp=det.timestamp,
            det_id=det.det_id,
        )


@dataclass(frozen=True)
class Trajectory:
    """A time-ordered chain of states of one object."""

    track_id: int
    class_id: int
    states: tuple[TrackState, ...]

    def __post_init__(self):
        frames = [s.frame_index for s in self.states]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(
                f"Track {self.track_id} frames must be strictly increasing: {frames}"
            )

    def __len__(self) -> int:
        return len(self.states)

    @property
    def frames(self) -> list[int]:
        return [s.frame_index for s in self.states]

    @property
    def first_frame(self) -> int:
        return self.states[0].frame_index

    @property
    def last_frame(self) -> int:
        return self.states[-1].frame_index

    @property
    def confidence(self) -> float:
        """Mean detection score of the member states."""
        if not self.states:
            return 0.0
        return float(np.mean([s.score for s in self.states]))

    def with_states(self, states) -> "Trajectory":
        return replace(self, states=tuple(states))


@dataclass(frozen=True)
class TrajectorySet:
    tracks: tuple[Trajectory, ...] = ()

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.tracks)

    def __len__(self) -> int:
        return len(self.tracks)

    @property
    def classes(self) -> list[int]:
        return sorted({t.class_id for t in self.tracks})

    def of_class(self, class_id: int) -> "TrajectorySet":
        return TrajectorySet(tuple(t for t in self.tracks if t.class_id == class_id))

    def frame_range(self) -> range:
        frames = [f for t in self.tracks for f in t.frames]
        if not frames:
            return range(0)
        return range(min(frames), max(frames) + 1)

    def sorted_by_id(self) -> "TrajectorySet":
        return TrajectorySet(tuple(sorted(self.tracks, key=lambda t: t.track_id)))


def tracks_from_instances(
    frames: list[list[Detection3D]],
) -> TrajectorySet:
    """
    Group detections by their instance id into trajectories.

    Detections without an instance id are ignored. Track ids are the instance
    ids; used for ground-truth boxes.
    """
    grouped: dict[int, list[Detection3D]] = {}
    for frame in frames:
        for det in frame:
            if det.gt_instance is not None:
                grouped.setdefault(det.gt_instance, []).append(det)
    tracks = []
    for inst in sorted(grouped):
        dets = sorted(grouped[inst], key=lambda d: d.frame_index)
        tracks.append(
            Trajectory(
                track_id=inst,
                class_id=dets[0].class_id,
                states=tuple(TrackState.from_detection(d) for d in dets),
            )
        )
    return TrajectorySet(tuple(tracks))
