import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from config import MODALITY_TAGS, NODE_FEATURE_BASE_DIM
from tracking.utils.geometry import Box3D, signed_yaw_diff


@dataclass(frozen=True, eq=False)
class ModalityEmbedding:
    """
    A precomputed per-detection sensor embedding.

    When `present` is False the vector is a zero placeholder and is ignored
    downstream (the network substitutes a learned absent token).
    """

    tag: str
    vector: np.ndarray
    present: bool = True

    def __post_init__(self):
        if self.tag not in MODALITY_TAGS:
            raise ValueError(
                f"Unknown modality tag '{self.tag}', expected one of {MODALITY_TAGS}."
            )
        vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vector)):
            raise ValueError(f"Modality '{self.tag}' embedding has non-finite entries.")
        object.__setattr__(self, "vector", vector)

    @classmethod
    def absent(cls, tag: str, dim: int) -> "ModalityEmbedding":
        return cls(tag=tag, vector=np.zeros(dim), present=False)


@dataclass(frozen=True)
class Detection3D:
    """
    One 3D box observation in one frame.

    Attributes:
        det_id (int): Identifier unique within a scene; used as the graph node id.
        box (Box3D): Pose and size.
        velocity (tuple[float, float]): (v_x, v_y) in m/s, ego-relative.
        class_id (int): Object category in [0, C).
        score (float): Detection confidence in [0, 1].
        timestamp (float): Seconds, relative to the scene start.
        frame_index (int): Frame number, >= 0.
        modalities (dict): Modality tag -> ModalityEmbedding, missing tags allowed.
        gt_instance (Optional[int]): Ground-truth instance id once matched.
    """

    det_id: int
    box: Box3D
    velocity: tuple[float, float]
    class_id: int
    score: float
    timestamp: float
    frame_index: int
    modalities: dict = field(default_factory=dict, compare=False)
    gt_instance: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"Detection score must lie in [0, 1], got {self.score}.")
        if self.class_id < 0:
            raise ValueError(f"class_id must be nonnegative, got {self.class_id}.")
        if self.frame_index < 0:
            raise ValueError(
                f"frame_index must be nonnegative, got {self.frame_index}."
            )
        if not all(math.isfinite(v) for v in (*self.velocity, self.timestamp)):
            raise ValueError("Detection velocity and timestamp must be finite.")

    def embedding(self, tag: str, dim: int) -> ModalityEmbedding:
        """Return the embedding for a tag, or an absent placeholder of width dim."""
        emb = self.modalities.get(tag)
        if emb is None or not emb.present:
            return ModalityEmbedding.absent(tag, dim)
        if emb.vector.shape[0] != dim:
            raise ValueError(
                f"Detection {self.det_id}: '{tag}' embedding has length "
                f"{emb.vector.shape[0]}, expected {dim}."
            )
        return emb


def node_feature_dim(num_classes: int) -> int:
    return NODE_FEATURE_BASE_DIM + num_classes


def encode_node_3dpm(det: Detection3D, num_classes: int) -> np.ndarray:
    """
    Build the pose-and-motion node vector of one detection.

    Layout: [x, y, z, w, l, h, yaw, v_x, v_y, one-hot(class) (C entries), score, t].

    Raises:
        ValueError: If the class id is outside [0, num_classes).
    """
    if not 0 <= det.class_id < num_classes:
        raise ValueError(
            f"class_id {det.class_id} out of range for {num_classes} classes."
        )
    one_hot = np.zeros(num_classes)
    one_hot[det.class_id] = 1.0
    return np.concatenate(
        [
            np.asarray(det.box.center, dtype=np.float64),
            np.asarray(det.box.size, dtype=np.float64),
            [det.box.yaw],
            np.asarray(det.velocity, dtype=np.float64),
            one_hot,
            [det.score, det.timestamp],
        ]
    )


def encode_nodes(dets: list[Detection3D], num_classes: int) -> np.ndarray:
    """Stack node vectors into an (N, 11 + C) matrix."""
    if not dets:
        return np.zeros((0, node_feature_dim(num_classes)))
    return np.stack([encode_node_3dpm(d, num_classes) for d in dets])


def encode_edge_raw(det_j: Detection3D, det_i: Detection3D) -> np.ndarray:
    """
    Build the five raw edge components for a time-forward edge j -> i.

    Returns [dx, dv, dyaw, ds, dt] where dx is the 3D center distance, dv the
    norm of the velocity difference, dyaw the signed yaw difference of j
    relative to i, ds the log volume ratio and dt the time gap.

    Raises:
        ValueError: If det_j is not strictly earlier than det_i.
    """
    if not det_j.timestamp < det_i.timestamp:
        raise ValueError(
            f"Edge {det_j.det_id} -> {det_i.det_id} is not time-forward "
            f"({det_j.timestamp} >= {det_i.timestamp})."
        )
    dx = float(np.linalg.norm(np.subtract(det_j.box.center, det_i.box.center)))
    dv = float(np.linalg.norm(np.subtract(det_j.velocity, det_i.velocity)))
    dyaw = signed_yaw_diff(det_j.box.yaw, det_i.box.yaw)
    ds = math.log(det_j.box.volume / det_i.box.volume)
    dt = det_i.timestamp - det_j.timestamp
    return np.array([dx, dv, dyaw, ds, dt])


def modality_matrix(
    dets: list[Detection3D], tag: str, dim: int
) -> tuple[np.ndarray, np.ndarray]:
    """
    Collect one modality across detections.

    Returns:
        tuple: (vectors of shape (N, dim), presence mask of shape (N, 1)).
    """
    vectors = np.zeros((len(dets), dim))
    present = np.zeros((len(dets), 1))
    for row, det in enumerate(dets):
        emb = det.embedding(tag, dim)
        if emb.present:
            vectors[row] = emb.vector
            present[row, 0] = 1.0
    return vectors, present


def stacked_modality_features(
    dets: list[Detection3D], tags: list[str], dims: dict[str, int]
) -> np.ndarray:
    """Concatenate present modality vectors (zeros when absent) per detection."""
    blocks = [modality_matrix(dets, tag, dims[tag])[0] for tag in tags]
    if not blocks:
        return np.zeros((len(dets), 0))
    return np.concatenate(blocks, axis=1)

