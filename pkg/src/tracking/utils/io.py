import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from config import (
    MODALITY_TAGS,
    REPORT_FORMAT_VERSION,
    SCENE_FORMAT_VERSION,
    TRACKS_FORMAT_VERSION,
)
from evaluation.utils.amota import SWEEP_COLUMNS, ClassMetrics, MetricsReport
from tracking.utils.confidence import SceneConfidence
from tracking.utils.features import Detection3D, ModalityEmbedding
from tracking.utils.geometry import Box3D
from tracking.utils.trajectories import (
    TrackState,
    Trajectory,
    TrajectorySet,
    tracks_from_instances,
)

PLOT_DATA_COLUMNS = [
    "scene_id",
    "track_id",
    "class_id",
    "frame",
    "timestamp",
    "x",
    "y",
    "z",
    "w",
    "l",
    "h",
    "yaw",
    "vx",
    "vy",
    "score",
]


class SceneFileError(ValueError):
    """A scene or tracks file could not be parsed; the message starts with path:line."""


@dataclass
class Scene:
    """
    One scene: per-frame detections, optional per-frame ground truth.

    Attributes:
        scene_id (str): Scene name.
        num_frames (int): Frames are indexed 0..num_frames-1.
        frame_period (float): Seconds between frames.
        detections (list[list[Detection3D]]): Detections per frame.
        annotations (list[list[Detection3D]]): Ground-truth states per frame
            with `gt_instance` set; empty lists when there is no ground truth.
        provenance (dict): Detection id -> originating instance id, or None for
            clutter. Only known for generated scenes.
    """

    scene_id: str
    num_frames: int
    frame_period: float = 0.5
    detections: list = field(default_factory=list)
    annotations: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_frames < 0:
            raise ValueError(f"num_frames must be nonnegative, got {self.num_frames}.")
        if not self.detections:
            self.detections = [[] for _ in range(self.num_frames)]
        if not self.annotations:
            self.annotations = [[] for _ in range(self.num_frames)]

    @property
    def has_gt(self) -> bool:
        return any(self.annotations)

    @property
    def gt_tracks(self) -> TrajectorySet:
        return tracks_from_instances(self.annotations)

    def all_detections(self) -> list[Detection3D]:
        return [d for frame in self.detections for d in frame]


# ============================================================
# Scene files
# ============================================================


def _box_fields(box: Box3D) -> dict:
    return {"center": list(box.center), "size": list(box.size), "yaw": box.yaw}


def _detection_record(scene_id: str, det: Detection3D, kind: str, instance) -> dict:
    record = {
        "scene_id": scene_id,
        "kind": kind,
        "frame": det.frame_index,
        "timestamp": det.timestamp,
        "det_id": det.det_id,
        "class_id": det.class_id,
        **_box_fields(det.box),
        "velocity": list(det.velocity),
        "score": det.score,
        "instance": instance,
    }
    if det.modalities:
        record["modalities"] = {
            tag: {"present": emb.present, "vector": emb.vector.tolist()}
            for tag, emb in sorted(det.modalities.items())
        }
    return record


def scene_records(scene: Scene) -> list[dict]:
    """Serialise a scene to its header record followed by det and gt records."""
    records = [
        {
            "kind": "scene",
            "format_version": SCENE_FORMAT_VERSION,
            "scene_id": scene.scene_id,
            "num_frames": scene.num_frames,
            "frame_period": scene.frame_period,
        }
    ]
    for frame in scene.detections:
        for det in frame:
            record = _detection_record(
                scene.scene_id, det, "det", scene.provenance.get(det.det_id)
            )
            if det.det_id not in scene.provenance:
                del record["instance"]
            records.append(record)
    for frame in scene.annotations:
        for gt in frame:
            records.append(_detection_record(scene.scene_id, gt, "gt", gt.gt_instance))
    return records


def write_scenes(path: str | Path, scenes: Iterable[Scene]) -> Path:
    """Write scenes as newline-delimited JSON records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for scene in scenes:
            for record in scene_records(scene):
                f.write(json.dumps(record) + "\n")
    return path


def _parse_modalities(raw: dict, modality_dims: Optional[Mapping[str, int]]) -> dict:
    modalities = {}
    for tag, entry in raw.items():
        if tag not in MODALITY_TAGS:
            raise ValueError(f"unknown modality '{tag}'")
        present = bool(entry.get("present", True))
        vector = entry.get("vector")
        expected = modality_dims.get(tag) if modality_dims else None
        if vector is None:
            if present or expected is None:
                raise ValueError(f"modality '{tag}' has no vector")
            vector = [0.0] * expected
        if expected is not None and len(vector) != expected:
            raise ValueError(
                f"modality '{tag}' vector has length {len(vector)}, expected {expected}"
            )
        modalities[tag] = ModalityEmbedding(tag=tag, vector=vector, present=present)
    return modalities


def _parse_detection(
    record: dict, modality_dims: Optional[Mapping[str, int]]
) -> Detection3D:
    box = Box3D(
        center=tuple(float(v) for v in record["center"]),
        size=tuple(float(v) for v in record["size"]),
        yaw=float(record["yaw"]),
    )
    velocity = tuple(float(v) for v in record["velocity"])
    if len(velocity) != 2:
        raise ValueError("velocity must have two entries")
    instance = record.get("instance")
    return Detection3D(
        det_id=int(record["det_id"]),
        box=box,
        velocity=velocity,
        class_id=int(record["class_id"]),
        score=float(record["score"]),
        timestamp=float(record["timestamp"]),
        frame_index=int(record["frame"]),
        modalities=_parse_modalities(record.get("modalities") or {}, modality_dims),
        gt_instance=int(instance) if record["kind"] == "gt" else None,
    )


def read_scenes(
    path: str | Path, modality_dims: Optional[Mapping[str, int]] = None
) -> list[Scene]:
    """
    Parse a scene file.

    Args:
        path (str | Path): Newline-delimited JSON file.
        modality_dims (Optional[Mapping[str, int]]): When given, every modality
            vector must have the configured width.

    Returns:
        list[Scene]: Scenes in file order; empty for an empty file.

    Raises:
        SceneFileError: On the first malformed record, with "path:line:" prefix.
    """
    path = Path(path)
    scenes: dict[str, Scene] = {}
    seen_ids: dict[tuple[str, str], set] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                kind = record.get("kind")
                if kind == "scene":
                    if record.get("format_version") != SCENE_FORMAT_VERSION:
                        raise ValueError(
                            f"unsupported format version {record.get('format_version')}"
                        )
                    scene_id = str(record["scene_id"])
                    if scene_id in scenes:
                        raise ValueError(f"duplicate scene '{scene_id}'")
                    scenes[scene_id] = Scene(
                        scene_id=scene_id,
                        num_frames=int(record["num_frames"]),
                        frame_period=float(record.get("frame_period", 0.5)),
                    )
                    continue
                if kind not in ("det", "gt"):
                    raise ValueError(f"unknown record kind '{kind}'")
                scene = scenes.get(str(record.get("scene_id")))
                if scene is None:
                    raise ValueError(
                        f"record for undeclared scene '{record.get('scene_id')}'"
                    )
                det = _parse_detection(record, modality_dims)
                if not 0 <= det.frame_index < scene.num_frames:
                    raise ValueError(
                        f"frame {det.frame_index} outside 0..{scene.num_frames - 1}"
                    )
                ids = seen_ids.setdefault((scene.scene_id, kind), set())
                if det.det_id in ids:
                    raise ValueError(f"duplicate {kind} id {det.det_id}")
                ids.add(det.det_id)
                if kind == "det":
                    scene.detections[det.frame_index].append(det)
                    if "instance" in record:
                        instance = record["instance"]
                        scene.provenance[det.det_id] = (
                            None if instance is None else int(instance)
                        )
                else:
                    scene.annotations[det.frame_index].append(det)
            except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
                detail = f"missing field {e}" if isinstance(e, KeyError) else str(e)
                raise SceneFileError(f"{path}:{line_no}: {detail}") from e
    return list(scenes.values())


# ============================================================
# Tracks files
# ============================================================


def write_tracks(path: str | Path, tracks: Mapping[str, TrajectorySet]) -> Path:
    """Write trajectories of several scenes as newline-delimited JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for scene_id, ts in tracks.items():
            header = {
                "kind": "tracks",
                "format_version": TRACKS_FORMAT_VERSION,
                "scene_id": scene_id,
                "num_tracks": len(ts),
            }
            f.write(json.dumps(header) + "\n")
            for track in ts:
                for state in track.states:
                    record = {
                        "kind": "state",
                        "scene_id": scene_id,
                        "track_id": track.track_id,
                        "class_id": track.class_id,
                        "frame": state.frame_index,
                        "timestamp": state.timestamp,
                        **_box_fields(state.box),
                        "velocity": list(state.velocity),
                        "score": state.score,
                        "det_id": state.det_id,
                    }
                    f.write(json.dumps(record) + "\n")
    return path


def read_tracks(path: str | Path) -> dict[str, TrajectorySet]:
    """Parse a tracks file back into one TrajectorySet per scene."""
    path = Path(path)
    order: list[str] = []
    grouped: dict[str, dict[int, tuple[int, list[TrackState]]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                scene_id = str(record["scene_id"])
                if record.get("kind") == "tracks":
                    if record.get("format_version") != TRACKS_FORMAT_VERSION:
                        raise ValueError(
                            f"unsupported format version {record.get('format_version')}"
                        )
                    if scene_id not in grouped:
                        order.append(scene_id)
                        grouped[scene_id] = {}
                    continue
                if scene_id not in grouped:
                    raise ValueError(f"state for undeclared scene '{scene_id}'")
                state = TrackState(
                    frame_index=int(record["frame"]),
                    box=Box3D(
                        center=tuple(float(v) for v in record["center"]),
                        size=tuple(float(v) for v in record["size"]),
                        yaw=float(record["yaw"]),
                    ),
                    velocity=tuple(float(v) for v in record["velocity"]),
                    score=float(record["score"]),
                    timestamp=float(record["timestamp"]),
                    det_id=record.get("det_id"),
                )
                track_id, class_id = int(record["track_id"]), int(record["class_id"])
                entry = grouped[scene_id].setdefault(track_id, (class_id, []))
                entry[1].append(state)
            except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
                detail = f"missing field {e}" if isinstance(e, KeyError) else str(e)
                raise SceneFileError(f"{path}:{line_no}: {detail}") from e

    result = {}
    for scene_id in order:
        tracks = []
        for track_id, (class_id, states) in grouped[scene_id].items():
            try:
                tracks.append(Trajectory(track_id, class_id, tuple(states)))
            except ValueError as e:
                raise SceneFileError(f"{path}: {e}") from e
        result[scene_id] = TrajectorySet(tuple(tracks))
    return result


# ============================================================
# Reports
# ============================================================


def _clean(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, np.generic):
        return value.item()
    return value


def metrics_report_to_dict(report: MetricsReport) -> dict:
    sweep = [
        {k: _clean(v) for k, v in row.items()}
        for row in report.sweep.to_dict(orient="records")
    ]
    return {
        "kind": "metrics",
        "format_version": REPORT_FORMAT_VERSION,
        "per_class": {str(c): m.to_dict() for c, m in report.per_class.items()},
        "overall": report.overall.to_dict(),
        "sweep": sweep,
    }


def metrics_report_from_dict(data: dict) -> MetricsReport:
    if data.get("format_version") != REPORT_FORMAT_VERSION:
        raise ValueError(
            f"Unsupported report format version {data.get('format_version')}."
        )
    return MetricsReport(
        per_class={int(c): ClassMetrics(**m) for c, m in data["per_class"].items()},
        overall=ClassMetrics(**data["overall"]),
        sweep=pd.DataFrame(data.get("sweep", []), columns=SWEEP_COLUMNS),
    )


def write_json(path: str | Path, data: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
    return path


def read_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_metrics_report(path: str | Path, report: MetricsReport) -> Path:
    return write_json(path, metrics_report_to_dict(report))


def read_metrics_report(path: str | Path) -> MetricsReport:
    return metrics_report_from_dict(read_json(path))


def entropy_report_to_dict(
    confidences: Iterable[SceneConfidence],
    direction: Optional[str] = None,
    selected: Optional[Iterable[str]] = None,
) -> dict:
    data = {
        "kind": "entropy",
        "format_version": REPORT_FORMAT_VERSION,
        "scenes": {
            c.scene_id: {
                "batch_entropies": list(c.batch_entropies),
                "scene_entropy": c.scene_entropy,
            }
            for c in confidences
        },
    }
    if direction is not None:
        data["direction"] = direction
        data["selected"] = sorted(selected or [])
    return data


def entropy_report_from_dict(data: dict) -> list[SceneConfidence]:
    if data.get("format_version") != REPORT_FORMAT_VERSION:
        raise ValueError(
            f"Unsupported report format version {data.get('format_version')}."
        )
    return [
        SceneConfidence(scene_id, tuple(entry["batch_entropies"]))
        for scene_id, entry in data["scenes"].items()
    ]


# ============================================================
# Plot data
# ============================================================


def plot_data_frame(scene_id: str, ts: TrajectorySet) -> pd.DataFrame:
    """One row per trajectory state, ready for external plotting."""
    rows = [
        [
            scene_id,
            t.track_id,
            t.class_id,
            s.frame_index,
            s.timestamp,
            *s.box.center,
            *s.box.size,
            s.box.yaw,
            *s.velocity,
            s.score,
        ]
        for t in ts
        for s in t.states
    ]
    return pd.DataFrame(rows, columns=PLOT_DATA_COLUMNS)


def save_csv(df: pd.DataFrame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, encoding="utf-8")


def plot_bev_trajectories(
    ts: TrajectorySet, output_path: str | Path, title: str = "Trajectories"
) -> Path:
    """Save a bird's-eye view plot of all track centers."""
    fig = Figure(figsize=(6, 6))
    ax = fig.subplots()
    for t in ts:
        xs = [s.box.center[0] for s in t.states]
        ys = [s.box.center[1] for s in t.states]
        ax.plot(xs, ys, marker=".", linewidth=1, label=str(t.track_id))
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title)

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output_path)
    return output_path
