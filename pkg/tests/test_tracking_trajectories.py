import math
from dataclasses import replace

import numpy as np
import pytest

from tracking.utils.clustering import (
    ScoredEdge,
    ScoredEdgeSet,
    agglomerate,
    average_overlapping_scores,
    finalize_trajectories,
)
from tracking.utils.confidence import (
    batch_entropy,
    filter_scenes,
    plot_score_histogram,
    scene_entropy,
)
from tracking.utils.features import Detection3D
from tracking.utils.geometry import Box3D, bev_iou
from tracking.utils.postprocessing import (
    correct_yaw_flips,
    interpolate_gaps,
    intra_track_bev_iou,
    join_still_tracks,
    refine_trajectories,
    smooth_track,
)
from tracking.utils.trajectories import (
    TrackState,
    Trajectory,
    TrajectorySet,
    tracks_from_instances,
)


def make_state(frame, center=(0.0, 0.0, 0.0), yaw=0.0, score=0.8, det_id=None):
    return TrackState(
        frame_index=frame,
        box=Box3D(center=tuple(center), size=(2.0, 4.0, 1.5), yaw=yaw),
        velocity=(0.0, 0.0),
        score=score,
        timestamp=0.5 * frame,
        det_id=det_id,
    )


def make_track(track_id, states, class_id=0):
    return Trajectory(track_id=track_id, class_id=class_id, states=tuple(states))


def node_det(det_id, frame, score=0.9, class_id=0):
    return Detection3D(
        det_id=det_id,
        box=Box3D(center=(float(det_id), 0.0, 0.0), size=(1.0, 1.0, 1.0), yaw=0.0),
        velocity=(0.0, 0.0),
        class_id=class_id,
        score=score,
        timestamp=0.5 * frame,
        frame_index=frame,
    )


def scored(*triples):
    return ScoredEdgeSet(tuple(ScoredEdge(j, i, s) for j, i, s in triples))


def naive_agglomerate(edges, theta_min, theta_join):
    """Straight replay of the greedy rule on a list of chains."""
    chains = []
    for _, j, i in sorted((-s, j, i) for j, i, s in edges if s >= theta_min):
        score = next(s for a, b, s in edges if (a, b) == (j, i))
        holder_j = next((c for c in chains if j in c), None)
        holder_i = next((c for c in chains if i in c), None)
        if holder_j is None and holder_i is None:
            chains.append([j, i])
        elif holder_j is None:
            if holder_i[0] == i:
                holder_i.insert(0, j)
        elif holder_i is None:
            if holder_j[-1] == j:
                holder_j.append(i)
        elif (
            holder_j is not holder_i
            and holder_j[-1] == j
            and holder_i[0] == i
            and score >= theta_join
        ):
            holder_j.extend(holder_i)
            chains.remove(holder_i)
    return sorted(chains)


# ==========================================
# Score averaging tests
# ==========================================


def test_average_overlapping_scores_examples():
    single = average_overlapping_scores([[(0, 1, 0.7)]])
    assert single.as_dict() == {(0, 1): pytest.approx(0.7)}

    repeated = average_overlapping_scores([[(0, 1, 0.6)], [(0, 1, 0.8)], [(0, 1, 1.0)]])
    assert repeated.edges[0].score == pytest.approx(0.8)
    assert repeated.edges[0].count == 3

    disjoint = average_overlapping_scores([[(0, 1, 0.2)], [(2, 3, 0.9)]])
    assert disjoint.as_dict() == {(0, 1): 0.2, (2, 3): 0.9}


def test_average_overlapping_scores_ignores_window_order():
    windows = [[(0, 1, 0.1), (1, 2, 0.4)], [(1, 2, 0.6)], [(0, 1, 0.3)]]
    forward = average_overlapping_scores(windows)
    backward = average_overlapping_scores(list(reversed(windows)))
    assert forward.as_dict() == pytest.approx(backward.as_dict())


# ==========================================
# Agglomeration tests
# ==========================================


def test_agglomerate_chain():
    result = agglomerate(scored((0, 1, 0.9), (1, 2, 0.8), (0, 2, 0.3)))
    assert list(result.clusters.values()) == [[0, 1, 2]]


def test_agglomerate_conflict_leaves_node_unvisited():
    result = agglomerate(scored((0, 2, 0.9), (1, 2, 0.8)))
    assert list(result.clusters.values()) == [[0, 2]]
    assert 1 not in result.visited


def test_agglomerate_join():
    edges = scored((0, 1, 0.9), (2, 3, 0.85), (1, 2, 0.7))
    assert list(agglomerate(edges, theta_join=0.5).clusters.values()) == [
        [0, 1, 2, 3]
    ]
    assert sorted(agglomerate(edges, theta_join=0.8).clusters.values()) == [
        [0, 1],
        [2, 3],
    ]


def test_agglomerate_drops_low_scores():
    result = agglomerate(scored((0, 1, 0.05)), theta_min=0.1)
    assert result.clusters == {}


def test_agglomerate_matches_naive_replay():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        num_nodes = int(rng.integers(2, 13))
        frames = {n: int(rng.integers(0, 5)) for n in range(num_nodes)}
        pairs = [
            (j, i) for j in frames for i in frames if frames[j] < frames[i]
        ]
        if not pairs:
            continue
        rng.shuffle(pairs)
        # Scores on a coarse grid so that ties are exercised
        edges = [
            (int(j), int(i), float(rng.integers(0, 11)) / 10.0)
            for j, i in pairs[:30]
        ]
        result = agglomerate(scored(*edges), theta_min=0.1, theta_join=0.5)
        assert sorted(result.clusters.values()) == naive_agglomerate(
            edges, 0.1, 0.5
        )

        members = [n for chain in result.clusters.values() for n in chain]
        assert len(members) == len(set(members))
        for cid, chain in result.clusters.items():
            assert all(frames[a] < frames[b] for a, b in zip(chain, chain[1:]))
            assert all(result.visited[n] == cid for n in chain)


# ==========================================
# Finalization tests
# ==========================================


def test_finalize_singletons_only():
    nodes = {n: node_det(n, n) for n in range(3)}
    ts = finalize_trajectories(agglomerate(ScoredEdgeSet()), nodes, 0.5)
    assert [len(t) for t in ts] == [1, 1, 1]
    assert [t.track_id for t in ts] == [0, 1, 2]


def test_finalize_drops_low_score_singletons():
    nodes = {0: node_det(0, 0, score=0.2), 1: node_det(1, 1, score=0.7)}
    ts = finalize_trajectories(agglomerate(ScoredEdgeSet()), nodes, 0.5)
    assert [t.states[0].det_id for t in ts] == [1]


def test_finalize_clusters_before_singletons():
    nodes = {
        0: node_det(0, 0),
        1: node_det(1, 1),
        2: node_det(2, 0),
        3: node_det(3, 1, score=0.1),
    }
    clusters = agglomerate(scored((0, 1, 0.9)))
    ts = finalize_trajectories(clusters, nodes, 0.5)
    assert [[s.det_id for s in t.states] for t in ts] == [[0, 1], [2]]
    assert ts.tracks[0].confidence == pytest.approx(0.9)


def test_tracks_from_instances_groups_by_instance():
    def gt(det_id, frame, inst):
        det = node_det(det_id, frame)
        return replace(det, gt_instance=inst)

    frames = [[gt(0, 0, 5), gt(1, 0, 2)], [gt(2, 1, 5), node_det(3, 1)]]
    ts = tracks_from_instances(frames)
    assert [t.track_id for t in ts] == [2, 5]
    assert ts.tracks[1].frames == [0, 1]


def test_trajectory_rejects_unordered_frames():
    with pytest.raises(ValueError):
        make_track(0, [make_state(2), make_state(1)])


# ==========================================
# Post-processing tests
# ==========================================


def test_interpolate_gaps_midpoint():
    t = make_track(0, [make_state(0), make_state(2, center=(2.0, 0.0, 0.0))])
    filled = interpolate_gaps(t)
    assert filled.frames == [0, 1, 2]
    assert filled.states[1].box.center == pytest.approx((1.0, 0.0, 0.0))
    assert filled.states[1].det_id is None


def test_interpolate_gaps_no_gap_is_identity():
    t = make_track(0, [make_state(0), make_state(1)])
    assert interpolate_gaps(t) == t


def test_interpolate_gaps_yaw_shortest_arc():
    t = make_track(0, [make_state(0, yaw=0.1), make_state(2, yaw=0.3)])
    assert interpolate_gaps(t).states[1].box.yaw == pytest.approx(0.2)

    across = make_track(
        0, [make_state(0, yaw=math.pi - 0.1), make_state(2, yaw=-math.pi + 0.1)]
    )
    mid = interpolate_gaps(across).states[1].box.yaw
    assert abs(abs(mid) - math.pi) < 1e-9


def test_intra_track_bev_iou_examples():
    static = make_track(0, [make_state(f) for f in range(6)])
    assert intra_track_bev_iou(static) == pytest.approx(1.0)

    split = make_track(0, [make_state(0), make_state(1, center=(50.0, 0.0, 0.0))])
    assert intra_track_bev_iou(split) == 0.0

    centers = [(0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (1.0, 0.3, 0.0)]
    hand = make_track(0, [make_state(f, c) for f, c in enumerate(centers)])
    boxes = [s.box for s in hand.states]
    expected = (
        bev_iou(boxes[0], boxes[1])
        * bev_iou(boxes[0], boxes[2])
        * bev_iou(boxes[1], boxes[2])
    )
    assert intra_track_bev_iou(hand) == pytest.approx(expected)
    assert intra_track_bev_iou(hand, "consecutive") == pytest.approx(
        bev_iou(boxes[0], boxes[1]) * bev_iou(boxes[1], boxes[2])
    )


def test_correct_yaw_flips_majority_regime():
    yaws = [0.1, 0.1 + math.pi, 0.1, 0.1, 0.1 - math.pi]
    t = make_track(0, [make_state(f, yaw=y) for f, y in enumerate(yaws)])
    fixed = correct_yaw_flips(t)
    for s in fixed.states:
        assert s.box.yaw == pytest.approx(0.1)
        assert -math.pi <= s.box.yaw < math.pi


def test_correct_yaw_flips_skips_moving_track():
    states = [
        make_state(f, center=(3.0 * f, 0.0, 0.0), yaw=y)
        for f, y in enumerate([0.1, 0.1 + math.pi, 0.1])
    ]
    t = make_track(0, states)
    assert correct_yaw_flips(t) == t


def test_correct_yaw_flips_single_regime():
    t = make_track(0, [make_state(f, yaw=0.4) for f in range(4)])
    assert [s.box.yaw for s in correct_yaw_flips(t).states] == pytest.approx(
        [0.4] * 4
    )


def test_join_still_tracks_examples():
    early = make_track(0, [make_state(f) for f in range(3)])
    late = make_track(1, [make_state(f, (0.1, 0.0, 0.0)) for f in range(5, 8)])
    joined = join_still_tracks(TrajectorySet((early, late)))
    assert len(joined) == 1
    assert joined.tracks[0].track_id == 0
    assert joined.tracks[0].frames == [0, 1, 2, 5, 6, 7]

    apart = make_track(1, [make_state(f, (0.0, 3.0, 0.0)) for f in range(5, 8)])
    assert len(join_still_tracks(TrajectorySet((early, apart)))) == 2

    moving = make_track(
        1, [make_state(f, (3.0 * (f - 5), 0.0, 0.0)) for f in range(5, 8)]
    )
    assert len(join_still_tracks(TrajectorySet((early, moving)))) == 2


def test_join_still_tracks_skips_overlapping_time():
    a = make_track(0, [make_state(f) for f in range(3)])
    b = make_track(1, [make_state(f) for f in range(2, 5)])
    assert len(join_still_tracks(TrajectorySet((a, b)))) == 2


def test_join_still_tracks_transitive_and_idempotent():
    parts = [
        make_track(k, [make_state(f) for f in range(3 * k, 3 * k + 2)])
        for k in range(3)
    ]
    once = join_still_tracks(TrajectorySet(tuple(reversed(parts))))
    assert len(once) == 1
    assert once.tracks[0].track_id == 0
    assert join_still_tracks(once) == once


def test_smooth_track_examples():
    constant = make_track(0, [make_state(f, (1.0, 2.0, 0.0)) for f in range(4)])
    assert [s.box.center for s in smooth_track(constant).states] == [
        pytest.approx((1.0, 2.0, 0.0))
    ] * 4

    single = make_track(0, [make_state(0, (5.0, 0.0, 0.0))])
    assert smooth_track(single) == single

    bump = make_track(
        0, [make_state(f, (x, 0.0, 0.0)) for f, x in enumerate([0.0, 3.0, 0.0])]
    )
    xs = [s.box.center[0] for s in smooth_track(bump).states]
    assert xs == pytest.approx([1.0, 1.5, 1.0])


def test_smooth_track_rejects_bad_kernel():
    t = make_track(0, [make_state(0), make_state(1)])
    with pytest.raises(ValueError):
        smooth_track(t, window=2, weights=(0.5, 0.5))
    with pytest.raises(ValueError):
        smooth_track(t, window=3, weights=(0.5, 0.5, 0.5))


def test_refine_trajectories_keeps_count_and_fills_frames():
    a = make_track(
        0, [make_state(f, (2.0 * f, 0.0, 0.0)) for f in (0, 1, 4, 5)], class_id=0
    )
    b = make_track(1, [make_state(f, (0.0, 20.0, 0.0)) for f in (2, 6)], class_id=1)
    refined = refine_trajectories(TrajectorySet((a, b)))
    assert len(refined) == 2
    assert refined.tracks[0].frames == list(range(6))
    assert refined.tracks[1].frames == list(range(2, 7))


def test_refine_trajectories_stages_can_be_disabled():
    a = make_track(0, [make_state(0), make_state(3)])
    refined = refine_trajectories(
        TrajectorySet((a,)), interpolate=False, smooth=False, join_still=False
    )
    assert refined.tracks[0].frames == [0, 3]


# ==========================================
# Confidence tests
# ==========================================


def test_batch_entropy_examples():
    assert batch_entropy([0.3, 0.3, 0.3, 0.3]) == pytest.approx(1.0)
    assert batch_entropy([1.0, 0.0, 0.0, 0.0]) == 0.0
    expected = 1.5 * math.log(2) / math.log(3)
    assert batch_entropy([0.5, 0.25, 0.25]) == pytest.approx(expected)
    assert expected == pytest.approx(0.946, abs=1e-3)


def test_batch_entropy_degenerate_inputs():
    assert batch_entropy([]) == 0.0
    assert batch_entropy([0.7]) == 0.0
    assert batch_entropy([0.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        batch_entropy([0.5, -0.1])


def test_batch_entropy_scale_and_permutation_invariant():
    rng = np.random.default_rng(4)
    scores = rng.uniform(0, 1, size=12)
    h = batch_entropy(scores)
    assert 0.0 <= h <= 1.0
    assert batch_entropy(scores * 7.5) == pytest.approx(h)
    assert batch_entropy(rng.permutation(scores)) == pytest.approx(h)


def test_scene_entropy_is_mean_of_windows():
    conf = scene_entropy([[1.0, 1.0], [1.0, 0.0]], scene_id="s")
    assert conf.batch_entropies == pytest.approx((1.0, 0.0))
    assert conf.scene_entropy == pytest.approx(0.5)


def test_filter_scenes_examples():
    assert filter_scenes({"A": 0.6, "B": 0.8}) == {"B"}
    assert filter_scenes({"A": 0.6, "B": 0.8}, "below-mean") == {"A"}
    assert filter_scenes({"A": 0.4}) == set()
    assert filter_scenes({"A": 0.5, "B": 0.5, "C": 0.5}) == set()
    with pytest.raises(ValueError):
        filter_scenes({"A": 0.5}, "sideways")


def test_plot_score_histogram_writes_file(tmp_path):
    out = plot_score_histogram(
        [0.1, 0.5, 0.9, 0.95], tmp_path / "plots" / "hist.png", labels=[0, 0, 1, 1]
    )
    assert out.exists()
    assert out.stat().st_size > 0
