from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from config import EDGE_FEATURE_DIM
from tracking.utils.features import (
    Detection3D,
    encode_edge_raw,
    encode_node_3dpm,
    node_feature_dim,
)
from tracking.utils.geometry import bev_iou, center_distance_xy

# Weights of the distance, yaw and velocity terms in the kinematic similarity
SIMILARITY_WEIGHTS = (0.5, 0.25, 0.25)


@dataclass(frozen=True)
class Window:
    """A run of consecutive frames [first_frame, first_frame + length)."""

    first_frame: int
    length: int

    @property
    def frames(self) -> range:
        return range(self.first_frame, self.first_frame + self.length)


@dataclass(frozen=True, eq=False)
class GraphNode:
    node_id: int
    detection: Detection3D
    feature: np.ndarray
    frame_index: int
    class_id: int


@dataclass(frozen=True, eq=False)
class GraphEdge:
    edge_id: int
    j: int
    i: int
    feature: np.ndarray
    label: Optional[int] = None


@dataclass(frozen=True, eq=False)
class TrackingGraph:
    """
    Detections of one window plus directed, feature-attributed edges.

    Every edge j -> i runs forward in time between nodes of the same class.
    Node ids are the scene-wide detection ids, so scores from overlapping
    windows can be combined later.
    """

    nodes: tuple[GraphNode, ...]
    edges: tuple[GraphEdge, ...]
    window: Window
    num_classes: int

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def node_position(self) -> dict[int, int]:
        return {node.node_id: pos for pos, node in enumerate(self.nodes)}

    @property
    def detections(self) -> list[Detection3D]:
        return [node.detection for node in self.nodes]

    def node_features(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, node_feature_dim(self.num_classes)))
        return np.stack([node.feature for node in self.nodes])

    def edge_features(self) -> np.ndarray:
        if not self.edges:
            return np.zeros((0, EDGE_FEATURE_DIM))
        return np.stack([edge.feature for edge in self.edges])

    @cached_property
    def _endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        pos = self.node_position
        src = np.array([pos[e.j] for e in self.edges], dtype=np.int64)
        dst = np.array([pos[e.i] for e in self.edges], dtype=np.int64)
        return src, dst

    def edge_endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Row positions of the (earlier j, later i) endpoints of every edge."""
        return self._endpoints

    def edge_labels(self) -> np.ndarray:
        if any(e.label is None for e in self.edges):
            raise ValueError("Graph edges are not labeled; run label_edges first.")
        return np.array([e.label for e in self.edges], dtype=np.float64)

    def edge_pairs(self) -> list[tuple[int, int]]:
        return [(e.j, e.i) for e in self.edges]


@dataclass(frozen=True)
class FrameKnnGraph:
    """Per-node same-frame nearest neighbours (any class, no self-loops)."""

    neighbors: dict = field(default_factory=dict)

    @property
    def pairs(self) -> set[tuple[int, int]]:
        """Undirected neighbour pairs as (smaller id, larger id)."""
        return {
            (min(a, b), max(a, b))
            for a, neighbours in self.neighbors.items()
            for b in neighbours
        }


def sliding_windows(
    scene_frames: Sequence | int,
    length: int = 5,
    stride: int = 1,
    include_partial: bool = False,
) -> list[Window]:
    """
    Cut a scene into overlapping windows of consecutive frames.

    Args:
        scene_frames (Sequence | int): The ordered frames, or their count.
        length (int): Frames per window, >= 2.
        stride (int): Offset between window starts, >= 1.
        include_partial (bool): Append one shorter window covering trailing
            frames that no full window reaches.

    Returns:
        list[Window]: Windows in ascending start order.
    """
    if length < 2:
        raise ValueError(f"Window length must be at least 2, got {length}.")
    if stride < 1:
        raise ValueError(f"Window stride must be at least 1, got {stride}.")
    num_frames = scene_frames if isinstance(scene_frames, int) else len(scene_frames)

    windows = [
        Window(first_frame=start, length=length)
        for start in range(0, num_frames - length + 1, stride)
    ]
    if include_partial and num_frames > 0:
        covered = windows[-1].first_frame + length if windows else 0
        if covered < num_frames:
            start = (
                min(windows[-1].first_frame + stride, num_frames - 1) if windows else 0
            )
            windows.append(Window(first_frame=start, length=num_frames - start))
    return windows


def _kinematic_components(
    det: Detection3D, candidates: list[Detection3D]
) -> np.ndarray:
    rows = []
    for cand in candidates:
        dx, dv, dyaw, _, _ = encode_edge_raw(cand, det)
        rows.append((dx, abs(dyaw), dv))
    return np.array(rows, dtype=np.float64)


def kinematic_similarity(
    det: Detection3D, candidates: list[Detection3D]
) -> np.ndarray:
    """
    Normalized kinematic distance of each past candidate to a detection.

    Each raw component (center distance, |yaw difference|, velocity difference)
    is min-max normalized over the candidate set, combined with weights
    (0.5, 0.25, 0.25) and divided by the largest combined value. Smaller means
    more similar. A lone candidate scores 1; a set of identical candidates
    scores 0 throughout.

    Raises:
        ValueError: If there are no candidates or one is not strictly earlier.
    """
    if not candidates:
        raise ValueError("kinematic_similarity needs at least one candidate.")
    if len(candidates) == 1:
        # Validates the time order as a side effect
        _kinematic_components(det, candidates)
        return np.ones(1)

    raw = _kinematic_components(det, candidates)
    lo = raw.min(axis=0)
    span = raw.max(axis=0) - lo
    normalized = np.divide(
        raw - lo, span, out=np.zeros_like(raw), where=span > 0.0
    )
    combined = normalized @ np.array(SIMILARITY_WEIGHTS)
    top = combined.max()
    if top <= 0.0:
        return np.zeros(len(candidates))
    return combined / top


def select_past_knn(nodes: Sequence[GraphNode], k: int = 40) -> list[tuple[int, int]]:
    """
    Pick incoming edges for every node from its k most similar past candidates.

    Candidates share the node's class and lie in a strictly earlier frame.
    Ties in similarity are broken by (frame_index, node_id) ascending.

    Returns:
        list[tuple[int, int]]: (j, i) node id pairs, ordered by the target
        node's (frame, id) and then by selection rank.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}.")
    ordered = sorted(nodes, key=lambda n: (n.frame_index, n.node_id))
    by_class: dict[int, list[GraphNode]] = {}
    for node in ordered:
        by_class.setdefault(node.class_id, []).append(node)

    pairs = []
    for node in ordered:
        candidates = [
            c
            for c in by_class[node.class_id]
            if c.frame_index < node.frame_index
            and c.detection.timestamp < node.detection.timestamp
        ]
        if not candidates:
            continue
        scores = kinematic_similarity(
            node.detection, [c.detection for c in candidates]
        )
        ranked = sorted(
            zip(scores, candidates),
            key=lambda sc: (sc[0], sc[1].frame_index, sc[1].node_id),
        )
        pairs.extend((cand.node_id, node.node_id) for _, cand in ranked[:k])
    return pairs


def match_detections_to_gt(
    dets: Sequence[Sequence[Detection3D]],
    annotations: Sequence[Sequence[Detection3D]],
    radius: float = 2.0,
    iou_min: float = 0.1,
) -> list[list[Optional[int]]]:
    """
    Greedily match detections to ground-truth boxes frame by frame.

    Pairs must share the class, lie within `radius` meters (BEV center
    distance) and overlap with BEV IoU >= iou_min. Accepted pairs are taken in
    ascending center-distance order, one-to-one.

    Args:
        dets: Per-frame detections.
        annotations: Per-frame ground-truth boxes, `gt_instance` set.
        radius (float): Center-distance gate in meters.
        iou_min (float): Minimum BEV IoU.

    Returns:
        list[list[Optional[int]]]: Matched instance id per detection, aligned
        with `dets`; None for unmatched detections.
    """
    if len(dets) != len(annotations):
        raise ValueError(
            f"Detections cover {len(dets)} frames, annotations {len(annotations)}."
        )
    assignment = []
    for frame_dets, frame_gts in zip(dets, annotations):
        candidates = []
        for d_idx, det in enumerate(frame_dets):
            for g_idx, gt in enumerate(frame_gts):
                if det.class_id != gt.class_id:
                    continue
                dist = center_distance_xy(det.box, gt.box)
                if dist > radius:
                    continue
                if bev_iou(det.box, gt.box) < iou_min:
                    continue
                candidates.append((dist, d_idx, g_idx))
        candidates.sort()

        matched: list[Optional[int]] = [None] * len(frame_dets)
        used_gts = set()
        for _, d_idx, g_idx in candidates:
            if matched[d_idx] is not None or g_idx in used_gts:
                continue
            matched[d_idx] = frame_gts[g_idx].gt_instance
            used_gts.add(g_idx)
        assignment.append(matched)
    return assignment


def assign_gt_instances(
    dets: Sequence[Sequence[Detection3D]],
    annotations: Sequence[Sequence[Detection3D]],
    radius: float = 2.0,
    iou_min: float = 0.1,
) -> list[list[Detection3D]]:
    """Return copies of the detections with their matched instance ids set."""
    matches = match_detections_to_gt(dets, annotations, radius, iou_min)
    return [
        [replace(det, gt_instance=inst) for det, inst in zip(frame_dets, frame_ids)]
        for frame_dets, frame_ids in zip(dets, matches)
    ]


def label_edges(graph: TrackingGraph) -> TrackingGraph:
    """
    Mark each edge active (1) or inactive (0).

    An edge j -> i is active iff both nodes carry the same instance id and that
    instance has no occurrence in a frame strictly between the two nodes.
    """
    occurrences: dict[int, list[int]] = {}
    for node in graph.nodes:
        inst = node.detection.gt_instance
        if inst is not None:
            occurrences.setdefault(inst, []).append(node.frame_index)

    nodes = {node.node_id: node for node in graph.nodes}
    labeled = []
    for edge in graph.edges:
        src, dst = nodes[edge.j], nodes[edge.i]
        inst = src.detection.gt_instance
        label = 0
        if inst is not None and inst == dst.detection.gt_instance:
            between = [
                f
                for f in occurrences[inst]
                if src.frame_index < f < dst.frame_index
            ]
            label = 0 if between else 1
        labeled.append(replace(edge, label=label))
    return replace(graph, edges=tuple(labeled))


def build_frame_knn(graph: TrackingGraph, k_frame: int = 20) -> FrameKnnGraph:
    """
    Connect every node to its k_frame nearest same-frame nodes.

    Distance is the BEV center distance; ties are broken by node id. Classes
    are ignored and self-loops excluded.
    """
    if k_frame < 0:
        raise ValueError(f"k_frame must be nonnegative, got {k_frame}.")
    frames: dict[int, list[GraphNode]] = {}
    for node in graph.nodes:
        frames.setdefault(node.frame_index, []).append(node)

    neighbors = {}
    for members in frames.values():
        for node in members:
            others = sorted(
                (
                    (center_distance_xy(node.detection.box, o.detection.box), o.node_id)
                    for o in members
                    if o.node_id != node.node_id
                ),
            )
            neighbors[node.node_id] = tuple(oid for _, oid in others[:k_frame])
    return FrameKnnGraph(neighbors=neighbors)


def build_tracking_graph(
    detections: Sequence[Detection3D],
    window: Window,
    num_classes: int,
    k_past: int = 40,
    label: bool = False,
) -> TrackingGraph:
    """
    Assemble the graph of one window.

    Args:
        detections: All detections whose frame lies inside the window.
        window (Window): The window being built.
        num_classes (int): Class count C for the one-hot node encoding.
        k_past (int): Incoming edges per node.
        label (bool): Label edges from the detections' instance ids.

    Returns:
        TrackingGraph: The frozen graph.
    """
    in_window = sorted(
        (d for d in detections if d.frame_index in window.frames),
        key=lambda d: (d.frame_index, d.det_id),
    )
    nodes = tuple(
        GraphNode(
            node_id=det.det_id,
            detection=det,
            feature=encode_node_3dpm(det, num_classes),
            frame_index=det.frame_index,
            class_id=det.class_id,
        )
        for det in in_window
    )
    lookup = {node.node_id: node.detection for node in nodes}
    edges = tuple(
        GraphEdge(
            edge_id=edge_id,
            j=j,
            i=i,
            feature=encode_edge_raw(lookup[j], lookup[i]),
        )
        for edge_id, (j, i) in enumerate(select_past_knn(nodes, k_past))
    )
    graph = TrackingGraph(
        nodes=nodes, edges=edges, window=window, num_classes=num_classes
    )
    return label_edges(graph) if label else graph
