import argparse
import threading
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

from config import INTERIM_DIR, PROCESSED_DIR, RAW_DIR, TRAINING_CHECKPOINT_PATH
from evaluation.utils.clear_mot import UndefinedMetricError
from model.components.autodiff import NonFiniteError, ShapeError, count_parameters
from model.network import ModelParams
from model.training import TrainingDivergedError
from model.utils.io import WeightsFileError, load_weights, save_weights
from synthesis.utils.scene import generate_dataset, scene_config_from_settings
from tracking.pipeline import (
    PipelineResult,
    build_scene_graphs,
    cluster_scene,
    edge_ap,
    evaluate_scenes,
    infer_scene,
    postprocess,
    run_ablation,
    run_baseline,
    run_pipeline,
    split_scenes,
    train_model,
    training_windows,
)
from tracking.utils.clustering import (
    ScoredEdge,
    ScoredEdgeSet,
    average_overlapping_scores,
)
from tracking.utils.confidence import (
    filter_scenes,
    plot_score_histogram,
    scene_entropy,
)
from tracking.utils.io import (
    Scene,
    SceneFileError,
    entropy_report_to_dict,
    plot_bev_trajectories,
    plot_data_frame,
    read_scenes,
    read_tracks,
    save_csv,
    write_json,
    write_metrics_report,
    write_scenes,
    write_tracks,
)
from tracking.utils.settings import (
    ConfigError,
    PipelineConfig,
    check_hparams_match,
    load_config,
)
from tracking.utils.threading import StopFlag, listen_for_quit

EDGE_COLUMNS = ["scene_id", "j", "i", "score", "count"]

# CLI flag destination -> dotted config key
OVERRIDE_FLAGS = {
    "threads": "runtime.threads",
    "window_length": "graph.window_length",
    "stride": "graph.stride",
    "k_past": "graph.k_past",
    "k_frame": "graph.k_frame",
    "mp_steps": "model.mp_steps",
    "heads": "model.heads",
    "attention_mode": "model.attention_mode",
    "beta": "training.beta",
    "epochs": "training.epochs",
    "lr": "training.lr",
    "theta_min": "clustering.theta_min",
    "theta_join": "clustering.theta_join",
    "singleton_min_score": "clustering.singleton_min_score",
    "gate": "evaluation.gate_distance",
    "sweep_points": "evaluation.sweep_points",
    "num_scenes": "synthesis.num_scenes",
    "seed": "synthesis.seed",
    "p_fn": "synthesis.p_fn",
    "fp_rate": "synthesis.fp_rate",
    "direction": "runtime.filter_direction",
}

HANDLED_ERRORS = (
    SceneFileError,
    WeightsFileError,
    ConfigError,
    UndefinedMetricError,
    TrainingDivergedError,
    NonFiniteError,
    ShapeError,
    FileNotFoundError,
    ValueError,
)


# ============================================================
# Argument parsing
# ============================================================


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML config file.")
    parser.add_argument("--threads", type=int, help="Scene-level worker threads.")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars.")


def _graph_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--window-length", dest="window_length", type=int)
    parser.add_argument("--stride", type=int)
    parser.add_argument("--k-past", dest="k_past", type=int)
    parser.add_argument("--k-frame", dest="k_frame", type=int)


def _cluster_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--theta-min", dest="theta_min", type=float)
    parser.add_argument("--theta-join", dest="theta_join", type=float)
    parser.add_argument(
        "--singleton-min-score", dest="singleton_min_score", type=float
    )


def _eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--gate", type=float, help="Center-distance gate (m).")
    parser.add_argument("--sweep-points", dest="sweep_points", type=int)


def _model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mp-steps", dest="mp_steps", type=int)
    parser.add_argument("--heads", type=int)
    parser.add_argument(
        "--attention-mode",
        dest="attention_mode",
        choices=["cross_edge", "stacked", "none"],
    )


def _synth_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--num-scenes", dest="num_scenes", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--p-fn", dest="p_fn", type=float)
    parser.add_argument("--fp-rate", dest="fp_rate", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphtrack",
        description="Offline graph-based 3D multi-object tracking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate synthetic scenes.")
    _common(p)
    _synth_flags(p)
    p.add_argument("--frames", type=int)
    p.add_argument("--out", type=Path, default=RAW_DIR / "synthetic_scenes.jsonl")

    p = sub.add_parser("build-graphs", help="Summarise window graphs.")
    _common(p)
    _graph_flags(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--label", action="store_true", help="Label edges from GT.")
    p.add_argument("--out", type=Path, default=INTERIM_DIR / "graphs.csv")

    p = sub.add_parser("train-toy", help="Train the edge classifier.")
    _common(p)
    _graph_flags(p)
    _model_flags(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--val-scenes", type=Path, help="Held-out scenes.")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--checkpoint", type=Path, default=TRAINING_CHECKPOINT_PATH)
    p.add_argument("--resume", action="store_true")
    p.add_argument(
        "--listen", action="store_true", help="Stop early when 'q' is typed."
    )
    p.add_argument("--out", type=Path, default=PROCESSED_DIR / "model.weights")

    p = sub.add_parser("infer", help="Score edges with trained weights.")
    _common(p)
    _graph_flags(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out", type=Path, default=INTERIM_DIR / "edges.csv")

    p = sub.add_parser("cluster", help="Cluster scored edges into tracks.")
    _common(p)
    _cluster_flags(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--edges", type=Path, required=True)
    p.add_argument("--out", type=Path, default=INTERIM_DIR / "raw_tracks.jsonl")

    p = sub.add_parser("postprocess", help="Refine trajectories.")
    _common(p)
    p.add_argument("--tracks", type=Path, required=True)
    p.add_argument("--out", type=Path, default=PROCESSED_DIR / "tracks.jsonl")

    p = sub.add_parser("eval", help="Evaluate tracks against ground truth.")
    _common(p)
    _eval_flags(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--tracks", type=Path, required=True)
    p.add_argument("--out", type=Path, default=PROCESSED_DIR / "metrics.json")

    p = sub.add_parser("entropy", help="Scene confidence from edge scores.")
    _common(p)
    _graph_flags(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--direction", choices=["above-mean", "below-mean"])
    p.add_argument("--histogram", type=Path, help="Write a score histogram PNG.")
    p.add_argument("--out", type=Path, default=PROCESSED_DIR / "entropy.json")

    p = sub.add_parser("pipeline", help="Run the whole pipeline end to end.")
    _common(p)
    _graph_flags(p)
    _cluster_flags(p)
    _eval_flags(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--plots", action="store_true", help="Write BEV plots.")
    p.add_argument("--out-dir", dest="out_dir", type=Path, default=PROCESSED_DIR)

    p = sub.add_parser("baseline", help="Greedy BEV-IoU tracker and its metrics.")
    _common(p)
    _eval_flags(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--iou-min", dest="iou_min", type=float, default=0.1)
    p.add_argument(
        "--out-dir", dest="out_dir", type=Path, default=PROCESSED_DIR / "baseline"
    )

    p = sub.add_parser("ablation", help="Train and compare model variants.")
    _common(p)
    _synth_flags(p)
    p.add_argument("--num-val", dest="num_val", type=int, default=10)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", type=Path, default=PROCESSED_DIR / "ablation.csv")
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        key: getattr(args, dest)
        for dest, key in OVERRIDE_FLAGS.items()
        if getattr(args, dest, None) is not None
    }
    if getattr(args, "frames", None) is not None:
        overrides["synthesis.frames"] = args.frames
    if getattr(args, "quiet", False):
        overrides["runtime.show_progress"] = False
    return load_config(args.config, overrides)


# ============================================================
# Helpers
# ============================================================


def _load_scenes(path: Path, config: PipelineConfig) -> list[Scene]:
    print(f"Loading scenes from: {path}")
    scenes = read_scenes(path, config.model.modality_dims)
    print(f"Loaded {len(scenes)} scenes.")
    return scenes


def _load_params(path: Path, config: PipelineConfig) -> ModelParams:
    print(f"Loading weights from: {path}")
    params, _ = load_weights(path)
    check_hparams_match(config.model_hparams(), params.hparams)
    return params


def _print_metrics(result: PipelineResult) -> None:
    if result.metrics is None:
        print("No ground truth, skipping evaluation.")
        return
    print(result.metrics.summary_table().to_string())


def _write_pipeline_outputs(
    result: PipelineResult, scenes: Sequence[Scene], out_dir: Path, plots: bool
) -> None:
    write_tracks(out_dir / "tracks.jsonl", result.tracks)
    if result.metrics is not None:
        write_metrics_report(out_dir / "metrics.json", result.metrics)
    for scene_result in result.scenes:
        frame = plot_data_frame(scene_result.scene_id, scene_result.tracks)
        save_csv(frame, out_dir / "plot_data" / f"{scene_result.scene_id}.csv")
        if plots:
            plot_bev_trajectories(
                scene_result.tracks,
                out_dir / "plots" / f"{scene_result.scene_id}.png",
                title=scene_result.scene_id,
            )
    print(f"Wrote outputs for {len(scenes)} scenes to: {out_dir}")


# ============================================================
# Subcommands
# ============================================================


def cmd_synth(args, config: PipelineConfig) -> int:
    s = config.synthesis
    base = scene_config_from_settings(s, config.model.modality_dims)
    scenes = generate_dataset(base, s.num_scenes)
    write_scenes(args.out, scenes)
    print(f"Wrote {len(scenes)} scenes to: {args.out}")
    return 0


def cmd_build_graphs(args, config: PipelineConfig) -> int:
    rows = []
    for scene in _load_scenes(args.scenes, config):
        for graph, knn in build_scene_graphs(scene, config, label=args.label):
            labels = graph.edge_labels() if args.label else None
            rows.append(
                {
                    "scene_id": scene.scene_id,
                    "first_frame": graph.window.first_frame,
                    "length": graph.window.length,
                    "nodes": graph.num_nodes,
                    "edges": graph.num_edges,
                    "frame_pairs": len(knn.pairs),
                    "active_edges": int(labels.sum()) if labels is not None else None,
                }
            )
    save_csv(pd.DataFrame(rows), args.out)
    print(f"Wrote {len(rows)} window summaries to: {args.out}")
    return 0


def cmd_train_toy(args, config: PipelineConfig) -> int:
    scenes = _load_scenes(args.scenes, config)
    if args.val_scenes is not None:
        train, val = scenes, _load_scenes(args.val_scenes, config)
    else:
        train, val = split_scenes(scenes, config.training.val_fraction)

    stop_flag = None
    if args.listen:
        stop_flag = StopFlag()
        listener_thread = threading.Thread(
            target=listen_for_quit, args=(stop_flag,), daemon=True
        )
        listener_thread.start()

    result = train_model(
        config,
        train,
        checkpoint_path=args.checkpoint,
        resume=args.resume,
        stop_flag=stop_flag,
    )
    if result.stopped_early:
        print("\nExiting after current epoch due to user request.")
    save_weights(
        args.out, result.params, extra={"loss_trace": list(result.loss_trace)}
    )
    print(f"Saved weights to: {args.out}")
    print(f"Model parameters: {count_parameters(result.params.tensors.values())}")

    if val:
        ap = edge_ap(result.params, training_windows(val, config))
        if ap is None:
            print("Validation split has no active edges.")
        else:
            print(f"Validation edge AP: {ap:.4f}")
    return 0


def cmd_infer(args, config: PipelineConfig) -> int:
    scenes = _load_scenes(args.scenes, config)
    params = _load_params(args.weights, config)
    rows = []
    for scene in scenes:
        scored = average_overlapping_scores(
            infer_scene(build_scene_graphs(scene, config), params)
        )
        rows.extend(
            [scene.scene_id, e.j, e.i, e.score, e.count] for e in scored.edges
        )
    save_csv(pd.DataFrame(rows, columns=EDGE_COLUMNS), args.out)
    print(f"Wrote {len(rows)} scored edges to: {args.out}")
    return 0


def _read_edges(path: Path) -> dict[str, ScoredEdgeSet]:
    df = pd.read_csv(path, dtype={"scene_id": str})
    missing = set(EDGE_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing edge columns {sorted(missing)}")
    grouped = {}
    for scene_id, part in df.groupby("scene_id", sort=False):
        grouped[scene_id] = ScoredEdgeSet(
            tuple(
                ScoredEdge(int(r.j), int(r.i), float(r.score), int(r.count))
                for r in part.sort_values(["j", "i"]).itertuples()
            )
        )
    return grouped


def cmd_cluster(args, config: PipelineConfig) -> int:
    scenes = _load_scenes(args.scenes, config)
    edges = _read_edges(args.edges)
    tracks = {
        scene.scene_id: cluster_scene(
            scene, edges.get(scene.scene_id, ScoredEdgeSet()), config
        )
        for scene in scenes
    }
    write_tracks(args.out, tracks)
    print(f"Wrote {sum(len(t) for t in tracks.values())} tracks to: {args.out}")
    return 0


def cmd_postprocess(args, config: PipelineConfig) -> int:
    tracks = {
        scene_id: postprocess(ts, config)
        for scene_id, ts in read_tracks(args.tracks).items()
    }
    write_tracks(args.out, tracks)
    print(f"Wrote refined tracks to: {args.out}")
    return 0


def cmd_eval(args, config: PipelineConfig) -> int:
    scenes = [s for s in _load_scenes(args.scenes, config) if s.has_gt]
    report = evaluate_scenes(read_tracks(args.tracks), scenes, config)
    print(report.summary_table().to_string())
    write_metrics_report(args.out, report)
    print(f"Wrote metrics to: {args.out}")
    return 0


def cmd_entropy(args, config: PipelineConfig) -> int:
    scenes = _load_scenes(args.scenes, config)
    params = _load_params(args.weights, config)
    confidences, all_scores = [], []
    for scene in scenes:
        predictions = infer_scene(build_scene_graphs(scene, config), params)
        window_scores = [[s for _, _, s in window] for window in predictions]
        all_scores.extend(s for window in window_scores for s in window)
        confidences.append(scene_entropy(window_scores, scene.scene_id))

    direction = config.runtime.filter_direction
    entropies = {c.scene_id: c.scene_entropy for c in confidences}
    selected = filter_scenes(entropies, direction)
    for c in confidences:
        mark = "*" if c.scene_id in selected else " "
        print(f"{mark} {c.scene_id}: H = {c.scene_entropy:.4f}")
    write_json(args.out, entropy_report_to_dict(confidences, direction, selected))
    if args.histogram is not None:
        plot_score_histogram(all_scores, args.histogram)
        print(f"Wrote histogram to: {args.histogram}")
    print(f"Wrote entropy report to: {args.out}")
    return 0


def cmd_pipeline(args, config: PipelineConfig) -> int:
    scenes = _load_scenes(args.scenes, config)
    params = _load_params(args.weights, config)
    result = run_pipeline(config, scenes, params)
    _print_metrics(result)
    _write_pipeline_outputs(result, scenes, args.out_dir, args.plots)
    write_json(
        args.out_dir / "entropy.json", entropy_report_to_dict(result.confidences)
    )
    return 0


def cmd_baseline(args, config: PipelineConfig) -> int:
    scenes = _load_scenes(args.scenes, config)
    result = run_baseline(config, scenes, args.iou_min)
    _print_metrics(result)
    _write_pipeline_outputs(result, scenes, args.out_dir, plots=False)
    return 0


def cmd_ablation(args, config: PipelineConfig) -> int:
    s = config.synthesis
    base = scene_config_from_settings(s, config.model.modality_dims)
    train = generate_dataset(base, s.num_scenes)
    val = generate_dataset(base, args.num_val, first_seed=s.seed + s.num_scenes)
    table = run_ablation(config, train, val)
    print(table.to_string(index=False))
    save_csv(table, args.out)
    print(f"Wrote ablation table to: {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "build-graphs": cmd_build_graphs,
    "train-toy": cmd_train_toy,
    "infer": cmd_infer,
    "cluster": cmd_cluster,
    "postprocess": cmd_postprocess,
    "eval": cmd_eval,
    "entropy": cmd_entropy,
    "pipeline": cmd_pipeline,
    "baseline": cmd_baseline,
    "ablation": cmd_ablation,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        status = COMMANDS[args.command](args, config)
    except HANDLED_ERRORS as e:
        print(f"[ERROR] {e}")
        return 1
    print("Done.")
    return status


if __name__ == "__main__":
    raise SystemExit(main())
