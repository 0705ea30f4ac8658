import itertools

import numpy as np
import pytest

from evaluation.utils.amota import (
    SWEEP_COLUMNS,
    amota_for_class,
    evaluate_tracking,
    motar,
    recall_targets,
)
from evaluation.utils.assignment import gated_assign, hungarian_assign
from evaluation.utils.clear_mot import (
    ClearMotCounts,
    FrameObject,
    MatchGate,
    UndefinedMetricError,
    clear_mot,
    match_frame,
)
from evaluation.utils.edges import edge_average_precision
from tracking.utils.geometry import Box3D
from tracking.utils.trajectories import TrackState, Trajectory, TrajectorySet


def make_state(frame, x, y=0.0, score=1.0):
    return TrackState(
        frame_index=frame,
        box=Box3D(center=(x, y, 0.0), size=(2.0, 4.0, 1.5), yaw=0.0),
        velocity=(0.0, 0.0),
        score=score,
        timestamp=0.5 * frame,
    )


def make_track(track_id, frames, x, class_id=0, score=1.0):
    return Trajectory(
        track_id=track_id,
        class_id=class_id,
        states=tuple(make_state(f, x, score=score) for f in frames),
    )


def brute_force_cost(cost):
    cost = np.asarray(cost)
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    rows, cols = cost.shape
    perms = np.array(list(itertools.permutations(range(cols), rows)))
    return float(cost[np.arange(rows), perms].sum(axis=1).min())


@pytest.fixture
def hand_traced_scene():
    """Two objects over three frames with one switch, one miss and one FP."""
    gt = TrajectorySet(
        (
            make_track(100, [0, 1, 2], x=0.0),
            make_track(200, [0, 1, 2], x=20.0),
        )
    )
    preds = TrajectorySet(
        (
            make_track(1, [0, 1], x=0.0),
            make_track(2, [2], x=0.0),
            make_track(3, [0, 1], x=20.0),
            make_track(4, [0], x=100.0),
        )
    )
    return preds, gt


# ==========================================
# Assignment tests
# ==========================================


def test_hungarian_assign_matches_brute_force():
    rng = np.random.default_rng(2024)
    for n in range(500):
        shape = tuple(rng.integers(1, 8, size=2))
        if n % 2:
            cost = rng.integers(0, 4, size=shape).astype(float)
        else:
            cost = rng.uniform(0.0, 10.0, size=shape)
        pairs, total = hungarian_assign(cost)

        assert len(pairs) == min(shape)
        assert len({r for r, _ in pairs}) == len(pairs)
        assert len({c for _, c in pairs}) == len(pairs)
        assert total == pytest.approx(sum(cost[r, c] for r, c in pairs))
        assert total == pytest.approx(brute_force_cost(cost), abs=1e-9)


def test_hungarian_assign_empty_matrix():
    assert hungarian_assign(np.zeros((0, 3))) == ([], 0.0)


def test_hungarian_assign_rejects_non_finite_costs():
    with pytest.raises(ValueError, match="finite"):
        hungarian_assign([[1.0, np.inf], [0.0, 2.0]])


def test_gated_assign_never_returns_disallowed_pairs():
    cost = np.array([[0.0, 5.0], [1.0, 9.0]])
    allowed = np.array([[False, True], [True, False]])

    assert gated_assign(cost, allowed) == [(0, 1), (1, 0)]


def test_gated_assign_nothing_allowed():
    assert gated_assign(np.ones((2, 2)), np.zeros((2, 2), dtype=bool)) == []


# ==========================================
# CLEAR-MOT tests
# ==========================================


def test_match_gate_validation_and_class_check():
    with pytest.raises(ValueError):
        MatchGate(max_distance=0.0)

    gate = MatchGate(max_distance=2.0)
    box = Box3D(center=(0.0, 0.0, 0.0), size=(1.0, 1.0, 1.0), yaw=0.0)
    far = Box3D(center=(3.0, 0.0, 0.0), size=(1.0, 1.0, 1.0), yaw=0.0)

    assert gate.allows(FrameObject(1, 0, box), FrameObject(2, 0, box))
    assert not gate.allows(FrameObject(1, 0, box), FrameObject(2, 1, box))
    assert not gate.allows(FrameObject(1, 0, far), FrameObject(2, 0, box))
    assert MatchGate(class_equal=False).allows(
        FrameObject(1, 0, box), FrameObject(2, 1, box)
    )


def test_match_frame_keeps_previous_pairing():
    box = Box3D(center=(0.0, 0.0, 0.0), size=(1.0, 1.0, 1.0), yaw=0.0)
    closer = Box3D(center=(0.1, 0.0, 0.0), size=(1.0, 1.0, 1.0), yaw=0.0)
    farther = Box3D(center=(1.0, 0.0, 0.0), size=(1.0, 1.0, 1.0), yaw=0.0)
    preds = [FrameObject(7, 0, closer), FrameObject(8, 0, farther)]
    gts = [FrameObject(100, 0, box)]

    fresh = match_frame(preds, gts, MatchGate())
    kept = match_frame(preds, gts, MatchGate(), previous={100: 8})

    assert [m[0] for m in fresh.matches] == [0]
    assert [m[0] for m in kept.matches] == [1]
    assert kept.unmatched_preds == [0]


def test_clear_mot_hand_traced_scene(hand_traced_scene):
    preds, gt = hand_traced_scene

    counts = clear_mot(preds, gt)

    assert counts.num_gt == 6
    assert counts.tp == 5
    assert counts.fp == 1
    assert counts.fn == 1
    assert counts.ids == 1
    assert counts.frag == 0
    assert counts.mota == pytest.approx(0.5)
    assert counts.motp == pytest.approx(0.0)


def test_clear_mot_counts_fragmentation():
    gt = TrajectorySet((make_track(100, [0, 1, 2, 3], x=0.0),))
    preds = TrajectorySet((make_track(1, [0, 2, 3], x=0.0),))

    counts = clear_mot(preds, gt)

    assert counts.fn == 1
    assert counts.ids == 0
    assert counts.frag == 1


def test_clear_mot_perfect_tracking():
    gt = TrajectorySet(
        (make_track(100, range(5), x=0.0), make_track(200, range(5), x=10.0))
    )
    preds = TrajectorySet(
        (make_track(1, range(5), x=0.0), make_track(2, range(5), x=10.0))
    )

    counts = clear_mot(preds, gt)

    assert counts.mota == 1.0
    assert counts.recall == 1.0
    assert counts.ids == counts.frag == counts.fp == counts.fn == 0


def test_clear_mot_counts_undefined_without_ground_truth():
    counts = ClearMotCounts()

    with pytest.raises(UndefinedMetricError):
        counts.mota
    with pytest.raises(UndefinedMetricError):
        counts.recall
    assert counts.motp is None


def test_clear_mot_counts_add():
    a = ClearMotCounts(num_gt=3, tp=2, fp=1, fn=1, ids=0, frag=1, distance_sum=0.5)
    b = ClearMotCounts(num_gt=2, tp=2, fp=0, fn=0, ids=1, frag=0, distance_sum=1.5)

    total = a + b

    assert (total.num_gt, total.tp, total.fp, total.fn) == (5, 4, 1, 1)
    assert (total.ids, total.frag) == (1, 1)
    assert total.motp == pytest.approx(0.5)


# ==========================================
# AMOTA tests
# ==========================================


def test_recall_targets():
    targets = recall_targets(40)

    assert len(targets) == 40
    assert targets[0] == pytest.approx(0.025)
    assert targets[-1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        recall_targets(0)


def test_motar_is_clamped():
    perfect = ClearMotCounts(num_gt=10, tp=5, fn=5)
    awful = ClearMotCounts(num_gt=10, fp=100)

    assert motar(perfect, 0.5, 10) == 1.0
    assert motar(awful, 0.5, 10) == 0.0


def test_amota_perfect_tracking_is_one():
    gt = TrajectorySet(
        (make_track(100, range(4), x=0.0), make_track(200, range(4), x=10.0))
    )
    preds = TrajectorySet(
        (
            make_track(1, range(4), x=0.0, score=0.9),
            make_track(2, range(4), x=10.0, score=0.6),
        )
    )

    report = evaluate_tracking(preds, gt)

    assert report.overall.mota == 1.0
    assert report.overall.amota == pytest.approx(1.0)
    assert report.overall.amotp == pytest.approx(0.0)


def test_amota_empty_predictions_is_zero():
    gt = TrajectorySet((make_track(100, range(4), x=0.0),))

    report = evaluate_tracking(TrajectorySet(), gt)

    assert report.overall.amota == 0.0
    assert report.overall.mota == 0.0
    assert report.overall.fn == 4
    assert report.sweep["reachable"].sum() == 0


def test_amota_sweep_filters_low_score_tracks():
    gt = TrajectorySet((make_track(100, range(3), x=0.0),))
    preds = TrajectorySet(
        (
            make_track(1, range(3), x=0.0, score=0.9),
            make_track(2, range(3), x=50.0, score=0.2),
        )
    )

    counts, amota, _, rows = amota_for_class(preds, gt, 0, MatchGate(), points=10)

    # The false track only hurts at the lowest threshold.
    assert counts.fp == 3
    assert amota == pytest.approx(1.0)
    assert {row["threshold"] for row in rows} == {0.9}


def test_amota_for_class_without_ground_truth_raises():
    preds = TrajectorySet((make_track(1, range(3), x=0.0),))
    gt = TrajectorySet((make_track(100, range(3), x=0.0, class_id=1),))

    with pytest.raises(UndefinedMetricError):
        amota_for_class(preds, gt, 0, MatchGate())


def test_evaluate_tracking_without_ground_truth_raises():
    preds = TrajectorySet((make_track(1, range(3), x=0.0),))

    with pytest.raises(UndefinedMetricError):
        evaluate_tracking(preds, TrajectorySet())


def test_evaluate_tracking_report_layout(hand_traced_scene):
    preds, gt = hand_traced_scene
    stray = make_track(9, [0, 1], x=-40.0, class_id=3)
    preds = TrajectorySet(preds.tracks + (stray,))

    report = evaluate_tracking(preds, gt, points=8)
    table = report.summary_table()

    assert list(report.per_class) == [0]
    assert report.per_class[0].mota == pytest.approx(0.5)
    assert report.overall.fp == report.per_class[0].fp + 2
    assert list(report.sweep.columns) == SWEEP_COLUMNS
    assert len(report.sweep) == 8
    assert list(table.index) == ["0", "overall"]
    assert 0.0 <= report.overall.amota <= 1.0


def test_evaluate_tracking_same_result_across_threads(hand_traced_scene):
    preds, gt = hand_traced_scene
    gt = TrajectorySet(gt.tracks + (make_track(300, range(3), x=5.0, class_id=1),))

    single = evaluate_tracking(preds, gt, threads=1)
    multi = evaluate_tracking(preds, gt, threads=3)

    assert single.summary_table().equals(multi.summary_table())
    assert single.sweep.equals(multi.sweep)


# ==========================================
# Edge AP tests
# ==========================================


def test_edge_average_precision_known_value():
    ap = edge_average_precision([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])

    assert ap == pytest.approx(0.8333, abs=1e-4)


def test_edge_average_precision_perfect_ranking():
    assert edge_average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == pytest.approx(1.0)


def test_edge_average_precision_errors():
    with pytest.raises(ValueError, match="labels"):
        edge_average_precision([0.1, 0.2], [1])
    with pytest.raises(UndefinedMetricError):
        edge_average_precision([0.1, 0.2], [0, 0])
