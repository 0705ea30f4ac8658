from dataclasses import dataclass, field
from typing import Iterable, Mapping

from tracking.utils.features import Detection3D
from tracking.utils.trajectories import TrackState, Trajectory, TrajectorySet


@dataclass(frozen=True)
class ScoredEdge:
    j: int
    i: int
    score: float
    count: int = 1


@dataclass(frozen=True)
class ScoredEdgeSet:
    """One averaged score per distinct (j, i) edge, ordered by (j, i)."""

    edges: tuple[ScoredEdge, ...] = ()

    def __len__(self) -> int:
        return len(self.edges)

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {(e.j, e.i): e.score for e in self.edges}


@dataclass
class ClusterSet:
    """
    Ordered node chains built by agglomeration.

    Attributes:
        clusters (dict[int, list[int]]): Cluster id -> time-ordered node ids.
            The first node is the leading node, the last the trailing node.
        visited (dict[int, int]): Node id -> id of the cluster holding it.
    """

    clusters: dict = field(default_factory=dict)
    visited: dict = field(default_factory=dict)

    def leading(self, cluster_id: int) -> int:
        return self.clusters[cluster_id][0]

    def trailing(self, cluster_id: int) -> int:
        return self.clusters[cluster_id][-1]


def average_overlapping_scores(
    window_predictions: Iterable[Iterable[tuple[int, int, float]]],
) -> ScoredEdgeSet:
    """
    Average the scores every edge received across overlapping windows.

    Args:
        window_predictions: Per window, (j, i, score) triples with scene-wide
            node ids.

    Returns:
        ScoredEdgeSet: Mean score and contributing-window count per edge.
    """
    sums: dict[tuple[int, int], float] = {}
    counts: dict[tuple[int, int], int] = {}
    for predictions in window_predictions:
        for j, i, score in predictions:
            key = (int(j), int(i))
            sums[key] = sums.get(key, 0.0) + float(score)
            counts[key] = counts.get(key, 0) + 1
    return ScoredEdgeSet(
        tuple(
            ScoredEdge(j=j, i=i, score=sums[key] / counts[key], count=counts[key])
            for key in sorted(sums)
            for j, i in [key]
        )
    )


def agglomerate(
    scored: ScoredEdgeSet,
    theta_min: float = 0.1,
    theta_join: float = 0.5,
) -> ClusterSet:
    """
    Grow trajectories greedily from the highest-scoring edges down.

    Edges below theta_min are dropped. For every remaining edge j -> i, in
    descending score order (ties by (j, i)):

    - neither node visited: start a new cluster [j, i];
    - only i visited: prepend j if i leads its cluster;
    - only j visited: append i if j trails its cluster;
    - both visited: join the two clusters if j trails one, i leads the other
      and the score reaches theta_join.

    Returns:
        ClusterSet: The clusters and the node -> cluster map.
    """
    result = ClusterSet()
    clusters, visited = result.clusters, result.visited
    next_id = 0

    ordered = sorted(
        (e for e in scored.edges if e.score >= theta_min),
        key=lambda e: (-e.score, e.j, e.i),
    )
    for edge in ordered:
        j, i = edge.j, edge.i
        cj, ci = visited.get(j), visited.get(i)
        if cj is None and ci is None:
            clusters[next_id] = [j, i]
            visited[j] = visited[i] = next_id
            next_id += 1
        elif cj is None:
            if clusters[ci][0] == i:
                clusters[ci].insert(0, j)
                visited[j] = ci
        elif ci is None:
            if clusters[cj][-1] == j:
                clusters[cj].append(i)
                visited[i] = cj
        elif (
            cj != ci
            and clusters[cj][-1] == j
            and clusters[ci][0] == i
            and edge.score >= theta_join
        ):
            moved = clusters.pop(ci)
            clusters[cj].extend(moved)
            for node in moved:
                visited[node] = cj
    return result


def finalize_trajectories(
    clusters: ClusterSet,
    all_nodes: Mapping[int, Detection3D],
    singleton_min_score: float = 0.0,
) -> TrajectorySet:
    """
    Turn clusters into trajectories and keep confident leftover detections.

    Cluster tracks come first (in cluster id order), followed by singleton
    tracks for unvisited detections whose score reaches singleton_min_score,
    ordered by (frame, id). Track ids are assigned consecutively from 0.
    """
    tracks = []
    for cluster_id in sorted(clusters.clusters):
        dets = [all_nodes[n] for n in clusters.clusters[cluster_id]]
        tracks.append(
            Trajectory(
                track_id=len(tracks),
                class_id=dets[0].class_id,
                states=tuple(TrackState.from_detection(d) for d in dets),
            )
        )

    leftovers = sorted(
        (
            det
            for node_id, det in all_nodes.items()
            if node_id not in clusters.visited and det.score >= singleton_min_score
        ),
        key=lambda d: (d.frame_index, d.det_id),
    )
    for det in leftovers:
        tracks.append(
            Trajectory(
                track_id=len(tracks),
                class_id=det.class_id,
                states=(TrackState.from_detection(det),),
            )
        )
    return TrajectorySet(tuple(tracks))
