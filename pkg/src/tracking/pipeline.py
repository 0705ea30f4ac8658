from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from evaluation.utils.amota import MetricsReport, evaluate_tracking
from evaluation.utils.clear_mot import MatchGate, UndefinedMetricError
from evaluation.utils.edges import edge_average_precision
from model.network import ModelParams, build_model_params, predict_edge_scores
from model.training import (
    TrainingResult,
    TrainingWindow,
    category_counts,
    train_toy,
)
from synthesis.utils.baseline import oracle_greedy_baseline
from tracking.utils.checkpointing import (
    resume_from_checkpoint,
    write_training_checkpoint,
)
from tracking.utils.clustering import (
    ScoredEdgeSet,
    agglomerate,
    average_overlapping_scores,
    finalize_trajectories,
)
from tracking.utils.confidence import SceneConfidence, scene_entropy
from tracking.utils.graphbuild import (
    FrameKnnGraph,
    TrackingGraph,
    assign_gt_instances,
    build_frame_knn,
    build_tracking_graph,
    sliding_windows,
)
from tracking.utils.io import Scene
from tracking.utils.postprocessing import refine_trajectories
from tracking.utils.settings import PipelineConfig, check_hparams_match
from tracking.utils.threading import parallel_map
from tracking.utils.trajectories import Trajectory, TrajectorySet

WindowGraph = tuple[TrackingGraph, FrameKnnGraph]


@dataclass
class SceneResult:
    scene_id: str
    tracks: TrajectorySet
    raw_tracks: TrajectorySet
    scored_edges: ScoredEdgeSet
    window_scores: list = field(default_factory=list)
    confidence: Optional[SceneConfidence] = None


@dataclass
class PipelineResult:
    scenes: list[SceneResult]
    metrics: Optional[MetricsReport] = None

    @property
    def tracks(self) -> dict[str, TrajectorySet]:
        return {r.scene_id: r.tracks for r in self.scenes}

    @property
    def confidences(self) -> list[SceneConfidence]:
        return [r.confidence for r in self.scenes]


# ============================================================
# Graph construction
# ============================================================


def labeled_detections(scene: Scene, config: PipelineConfig) -> list:
    """Detections with ground-truth instance ids from the frame-wise matching."""
    return assign_gt_instances(
        scene.detections,
        scene.annotations,
        radius=config.graph.gt_radius,
        iou_min=config.graph.gt_iou_min,
    )


def build_scene_graphs(
    scene: Scene, config: PipelineConfig, label: bool = False
) -> list[WindowGraph]:
    """One (graph, frame k-NN graph) pair per sliding window of the scene."""
    g = config.graph
    frames = labeled_detections(scene, config) if label else scene.detections
    detections = [d for frame in frames for d in frame]
    graphs = []
    for window in sliding_windows(
        scene.num_frames, g.window_length, g.stride, g.include_partial_windows
    ):
        graph = build_tracking_graph(
            detections,
            window,
            config.model.num_classes,
            k_past=g.k_past,
            label=label,
        )
        graphs.append((graph, build_frame_knn(graph, g.k_frame)))
    return graphs


# ============================================================
# Inference, clustering, post-processing
# ============================================================


def infer_scene(
    graphs: Sequence[WindowGraph], params: ModelParams
) -> list[list[tuple[int, int, float]]]:
    """Edge scores of every window, in window order."""
    return [predict_edge_scores(graph, knn, params) for graph, knn in graphs]


def cluster_scene(
    scene: Scene, scored: ScoredEdgeSet, config: PipelineConfig
) -> TrajectorySet:
    c = config.clustering
    clusters = agglomerate(scored, c.theta_min, c.theta_join)
    nodes = {det.det_id: det for det in scene.all_detections()}
    return finalize_trajectories(clusters, nodes, c.singleton_min_score)


def postprocess(tracks: TrajectorySet, config: PipelineConfig) -> TrajectorySet:
    p = config.postprocessing
    if not p.enabled:
        return tracks
    return refine_trajectories(
        tracks,
        still_iou_min=p.still_iou_min,
        join_iou_min=p.join_iou_min,
        smoothing_window=p.smoothing_window,
        smoothing_weights=p.smoothing_weights,
        pairing=p.intra_iou_pairing,
        interpolate=p.interpolate,
        correct_yaw=p.correct_yaw,
        join_still=p.join_still,
        smooth=p.smooth,
    )


def track_scene(
    scene: Scene, params: ModelParams, config: PipelineConfig
) -> SceneResult:
    """Graphs, edge scores, clustering and refinement of one scene."""
    graphs = build_scene_graphs(scene, config)
    predictions = infer_scene(graphs, params)
    scored = average_overlapping_scores(predictions)
    raw = cluster_scene(scene, scored, config)
    window_scores = [[s for _, _, s in window] for window in predictions]
    return SceneResult(
        scene_id=scene.scene_id,
        tracks=postprocess(raw, config),
        raw_tracks=raw,
        scored_edges=scored,
        window_scores=window_scores,
        confidence=scene_entropy(window_scores, scene.scene_id),
    )


# ============================================================
# Evaluation across scenes
# ============================================================


def stack_scenes(parts: Sequence[tuple[TrajectorySet, int]]) -> TrajectorySet:
    """
    Concatenate per-scene trajectories along time.

    Each scene's frames are shifted past the previous scenes' frames and its
    track ids past the previous scenes' ids, so scenes never interact.
    """
    tracks, frame_offset, id_offset = [], 0, 0
    for ts, num_frames in parts:
        for t in sorted(ts, key=lambda t: t.track_id):
            states = tuple(
                replace(s, frame_index=s.frame_index + frame_offset) for s in t.states
            )
            tracks.append(Trajectory(t.track_id + id_offset, t.class_id, states))
        frame_offset += num_frames
        id_offset += max((t.track_id for t in ts), default=-1) + 1
    return TrajectorySet(tuple(tracks))


def evaluate_scenes(
    predictions: Mapping[str, TrajectorySet],
    scenes: Sequence[Scene],
    config: PipelineConfig,
) -> MetricsReport:
    """
    Evaluate predicted tracks of several scenes against their ground truth.

    Raises:
        UndefinedMetricError: If none of the scenes has ground truth.
    """
    pred = stack_scenes(
        [(predictions.get(s.scene_id, TrajectorySet()), s.num_frames) for s in scenes]
    )
    gt = stack_scenes([(s.gt_tracks, s.num_frames) for s in scenes])
    e = config.evaluation
    return evaluate_tracking(
        pred,
        gt,
        MatchGate(e.gate_distance, e.class_equal),
        points=e.sweep_points,
        threads=config.runtime.threads,
    )


def run_pipeline(
    config: PipelineConfig,
    scenes: Sequence[Scene],
    params: ModelParams,
    evaluate: bool = True,
) -> PipelineResult:
    """
    Track every scene and evaluate where ground truth exists.

    Scenes run on `config.runtime.threads` threads; results keep scene order.

    Raises:
        ConfigError: If the weights do not match the configured architecture.
    """
    check_hparams_match(config.model_hparams(), params.hparams)
    results = parallel_map(
        lambda scene: track_scene(scene, params, config),
        scenes,
        threads=config.runtime.threads,
    )
    metrics = None
    with_gt = [s for s in scenes if s.has_gt]
    if evaluate and with_gt:
        predicted = {r.scene_id: r.tracks for r in results}
        metrics = evaluate_scenes(predicted, with_gt, config)
    return PipelineResult(scenes=list(results), metrics=metrics)


def run_baseline(
    config: PipelineConfig, scenes: Sequence[Scene], iou_min: float = 0.1
) -> PipelineResult:
    """Greedy BEV-IoU tracking of every scene, evaluated like the pipeline."""
    results = []
    for s in scenes:
        tracks = oracle_greedy_baseline(s.detections, iou_min)
        results.append(
            SceneResult(s.scene_id, tracks, tracks, scored_edges=ScoredEdgeSet())
        )
    with_gt = [s for s in scenes if s.has_gt]
    metrics = None
    if with_gt:
        predicted = {r.scene_id: r.tracks for r in results}
        metrics = evaluate_scenes(predicted, with_gt, config)
    return PipelineResult(scenes=results, metrics=metrics)


# ============================================================
# Training
# ============================================================


def training_windows(
    scenes: Sequence[Scene], config: PipelineConfig
) -> list[TrainingWindow]:
    """Labeled window graphs of all scenes, with per-class annotation counts."""
    counts = category_counts(
        (gt for s in scenes for frame in s.annotations for gt in frame),
        config.model.num_classes,
    )
    graphs = parallel_map(
        lambda s: build_scene_graphs(s, config, label=True),
        scenes,
        threads=config.runtime.threads,
    )
    return [
        TrainingWindow.from_graph(graph, knn, counts)
        for scene_graphs in graphs
        for graph, knn in scene_graphs
    ]


def edge_ap(params: ModelParams, windows: Sequence[TrainingWindow]) -> Optional[float]:
    """Average precision over all edges of the windows; None without active edges."""
    scores, labels = [], []
    for w in windows:
        if w.graph.num_edges == 0:
            continue
        predicted = predict_edge_scores(w.graph, w.frame_knn, params)
        scores.extend(s for _, _, s in predicted)
        labels.extend(w.labels.tolist())
    try:
        return edge_average_precision(scores, labels)
    except UndefinedMetricError:
        return None


def split_scenes(
    scenes: Sequence[Scene], val_fraction: float
) -> tuple[list[Scene], list[Scene]]:
    """Deterministic split: the last ceil(fraction * n) scenes validate."""
    n_val = int(np.ceil(val_fraction * len(scenes))) if len(scenes) > 1 else 0
    cut = len(scenes) - n_val
    return list(scenes[:cut]), list(scenes[cut:])


def train_model(
    config: PipelineConfig,
    train_scenes: Sequence[Scene],
    checkpoint_path: Optional[Path] = None,
    resume: bool = False,
    stop_flag=None,
    initial: Optional[ModelParams] = None,
) -> TrainingResult:
    """
    Train the edge classifier on labeled scenes.

    With a checkpoint path, weights are written after every epoch; with
    `resume`, a valid checkpoint supplies the starting parameters, the
    completed epoch count and the loss trace.
    """
    hparams = config.model_hparams()
    params = initial or build_model_params(hparams)
    start_epoch, trace = 0, []
    if resume and checkpoint_path is not None:
        restored = resume_from_checkpoint(checkpoint_path, hparams)
        if restored is not None:
            params, start_epoch, trace = restored
            print(f"Resuming from epoch {start_epoch}.")

    windows = training_windows(train_scenes, config)
    print(f"Training on {len(windows)} windows from {len(train_scenes)} scenes.")

    on_epoch_end: Optional[Callable] = None
    if checkpoint_path is not None:

        def on_epoch_end(epoch, current, loss_trace):
            write_training_checkpoint(checkpoint_path, current, epoch, loss_trace)

    t = config.training
    return train_toy(
        params,
        windows,
        epochs=t.epochs,
        lr=t.lr,
        momentum=t.momentum,
        beta=t.beta,
        use_class_balancing=t.use_class_balancing,
        grad_clip_norm=t.grad_clip_norm,
        shuffle_seed=t.shuffle_seed,
        stop_flag=stop_flag,
        on_epoch_end=on_epoch_end,
        start_epoch=start_epoch,
        loss_trace=trace,
        show_progress=config.runtime.show_progress,
    )


# ============================================================
# Ablation
# ============================================================

DEFAULT_ABLATION_VARIANTS = (
    ("L=0", {"mp_steps": 0}),
    ("L=2", {"mp_steps": 2}),
    ("L=6", {"mp_steps": 6}),
    ("stacked", {"mp_steps": 6, "attention_mode": "stacked"}),
    ("no-frame-gat", {"mp_steps": 6, "use_frame_gat": False}),
)


def run_ablation(
    config: PipelineConfig,
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    variants: Sequence[tuple[str, dict]] = DEFAULT_ABLATION_VARIANTS,
) -> pd.DataFrame:
    """
    Train one model per variant and report validation AMOTA and edge AP.

    Each variant overrides keys of the `model` section.
    """
    rows = []
    for name, changes in tqdm(
        variants, desc="Variants", disable=not config.runtime.show_progress
    ):
        variant = replace(config, model=replace(config.model, **changes))
        training = train_model(variant, train_scenes)
        trained = training.params
        val_windows = training_windows(val_scenes, variant)
        result = run_pipeline(variant, val_scenes, trained)
        rows.append(
            {
                "variant": name,
                "amota": result.metrics.overall.amota if result.metrics else None,
                "mota": result.metrics.overall.mota if result.metrics else None,
                "edge_ap": edge_ap(trained, val_windows),
                "final_loss": training.loss_trace[-1] if training.loss_trace else None,
            }
        )
    return pd.DataFrame(rows)
