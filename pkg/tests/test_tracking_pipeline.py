import json
from dataclasses import replace

import pandas as pd
import pytest

from config import CONFIG_ENV_VAR
from model.components.autodiff import count_parameters
from model.network import build_model_params
from model.utils.io import save_weights
from synthesis.utils.scene import generate_dataset, scene_config_from_settings
from tracking.cli import main
from tracking.pipeline import (
    build_scene_graphs,
    run_ablation,
    run_baseline,
    run_pipeline,
    split_scenes,
    stack_scenes,
    track_scene,
    train_model,
)
from tracking.utils.geometry import Box3D
from tracking.utils.graphbuild import Window
from tracking.utils.io import Scene, read_json, read_tracks, write_scenes
from tracking.utils.settings import ConfigError, load_config
from tracking.utils.trajectories import TrackState, Trajectory, TrajectorySet

SMALL_CONFIG = """\
graph:
  window_length: 3
  k_past: 6
  k_frame: 3
model:
  num_classes: 3
  hidden_dim: 4
  mp_steps: 1
  heads: 1
  head_dim: 2
  modality_tokens: 2
  modality_dims: {camera: 4, lidar: 4, radar: 4}
training:
  epochs: 2
  lr: 0.05
evaluation:
  sweep_points: 5
synthesis:
  num_scenes: 2
  frames: 6
  object_count: [2, 3]
  fp_rate: 1.0
runtime:
  show_progress: false
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    return path


@pytest.fixture
def small_config(config_path):
    return load_config(config_path)


@pytest.fixture
def scenes(small_config):
    s = small_config.synthesis
    base = scene_config_from_settings(s, small_config.model.modality_dims)
    return generate_dataset(base, s.num_scenes)


@pytest.fixture
def params(small_config):
    return build_model_params(small_config.model_hparams())


def make_track(track_id, frames):
    return Trajectory(
        track_id=track_id,
        class_id=0,
        states=tuple(
            TrackState(
                frame_index=f,
                box=Box3D(center=(0.0, 0.0, 0.5), size=(1.0, 1.0, 1.0), yaw=0.0),
                velocity=(0.0, 0.0),
                score=0.5,
                timestamp=0.5 * f,
            )
            for f in frames
        ),
    )


def read_json_lines(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


# ==========================================
# Pipeline helper tests
# ==========================================


def test_stack_scenes_separates_scenes():
    first = TrajectorySet((make_track(0, [0, 1]), make_track(3, [2])))
    second = TrajectorySet((make_track(0, [0]),))

    stacked = stack_scenes([(first, 4), (second, 2)])

    assert [t.track_id for t in stacked] == [0, 3, 4]
    assert [t.frames for t in stacked] == [[0, 1], [2], [4]]


def test_split_scenes():
    train, val = split_scenes(list("abcde"), 0.2)

    assert (train, val) == (list("abcd"), ["e"])
    assert split_scenes(["a"], 0.5) == (["a"], [])


def test_build_scene_graphs_covers_scene(small_config, scenes):
    graphs = build_scene_graphs(scenes[0], small_config, label=True)

    assert [g.window.first_frame for g, _ in graphs] == [0, 1, 2, 3]
    for graph, knn in graphs:
        assert len(graph.edge_labels()) == graph.num_edges
        assert all(len(n) <= 3 for n in knn.neighbors.values())


def test_default_config_builds_no_partial_windows(monkeypatch, scenes):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
    short = replace(
        scenes[0],
        num_frames=4,
        detections=scenes[0].detections[:4],
        annotations=scenes[0].annotations[:4],
    )
    config = load_config()
    with_tail = load_config(overrides={"graph.include_partial_windows": True})

    assert config.graph.window_length == 5
    assert build_scene_graphs(short, config) == []
    assert [g.window for g, _ in build_scene_graphs(short, with_tail)] == [
        Window(first_frame=0, length=4)
    ]


# ==========================================
# Tracking tests
# ==========================================


def test_track_scene_without_detections(small_config, params):
    scene = Scene(scene_id="empty", num_frames=4)

    result = track_scene(scene, params, small_config)

    assert len(result.tracks) == 0
    assert result.scored_edges.edges == ()
    assert result.confidence.scene_entropy == 0.0


def test_raw_tracks_partition_detections(small_config, scenes, params):
    result = track_scene(scenes[0], params, small_config)
    members = [s.det_id for t in result.raw_tracks for s in t.states]

    assert sorted(members) == sorted(d.det_id for d in scenes[0].all_detections())
    for track in result.tracks:
        assert track.frames == sorted(set(track.frames))


def test_run_pipeline_is_deterministic_across_threads(small_config, scenes, params):
    threaded = replace(
        small_config, runtime=replace(small_config.runtime, threads=3)
    )

    single = run_pipeline(small_config, scenes, params)
    multi = run_pipeline(threaded, scenes, params)

    assert [r.scene_id for r in multi.scenes] == [s.scene_id for s in scenes]
    assert single.tracks == multi.tracks
    assert single.metrics.overall == multi.metrics.overall
    assert [c.scene_entropy for c in single.confidences] == [
        c.scene_entropy for c in multi.confidences
    ]


def test_run_pipeline_without_ground_truth(small_config, scenes, params):
    no_gt = [replace(s, annotations=[]) for s in scenes]

    result = run_pipeline(small_config, no_gt, params)

    assert result.metrics is None
    assert len(result.scenes) == 2


def test_run_pipeline_rejects_foreign_weights(small_config, scenes):
    other = build_model_params(replace(small_config.model_hparams(), mp_steps=2))

    with pytest.raises(ConfigError):
        run_pipeline(small_config, scenes, other)


def test_run_baseline_reports_metrics(small_config, scenes):
    result = run_baseline(small_config, scenes)

    assert result.metrics is not None
    assert 0.0 <= result.metrics.overall.amota <= 1.0
    assert set(result.tracks) == {s.scene_id for s in scenes}


# ==========================================
# Training tests
# ==========================================


def test_train_model_writes_and_resumes_checkpoint(tmp_path, small_config, scenes):
    checkpoint = tmp_path / "ckpt.weights"

    first = train_model(small_config, scenes, checkpoint_path=checkpoint)
    resumed = train_model(
        small_config, scenes, checkpoint_path=checkpoint, resume=True
    )

    assert checkpoint.exists()
    assert len(first.loss_trace) == 2
    assert resumed.loss_trace == first.loss_trace
    for name, tensor in first.params.tensors.items():
        assert (resumed.params.tensors[name].data == tensor.data).all()


def test_run_ablation_table(small_config, scenes):
    config = replace(small_config, training=replace(small_config.training, epochs=1))
    variants = (("L=0", {"mp_steps": 0}), ("L=1", {"mp_steps": 1}))

    table = run_ablation(config, scenes[:1], scenes[1:], variants)

    assert list(table["variant"]) == ["L=0", "L=1"]
    assert list(table.columns) == ["variant", "amota", "mota", "edge_ap", "final_loss"]


# ==========================================
# Command line tests
# ==========================================


def test_cli_end_to_end(tmp_path, config_path, capsys):
    scenes_path = tmp_path / "scenes.jsonl"
    weights = tmp_path / "model.weights"
    out_dir = tmp_path / "out"
    common = ["--config", str(config_path), "--quiet"]

    assert main(["synth", *common, "--out", str(scenes_path)]) == 0
    assert main(
        [
            "train-toy",
            *common,
            "--scenes",
            str(scenes_path),
            "--checkpoint",
            str(tmp_path / "ckpt.weights"),
            "--out",
            str(weights),
        ]
    ) == 0
    assert main(
        [
            "pipeline",
            *common,
            "--scenes",
            str(scenes_path),
            "--weights",
            str(weights),
            "--out-dir",
            str(out_dir),
        ]
    ) == 0
    out = capsys.readouterr().out
    hparams = load_config(config_path).model_hparams()
    expected = count_parameters(build_model_params(hparams).tensors.values())

    assert "Wrote 2 scenes to:" in out
    assert f"Model parameters: {expected}" in out
    assert out.count("Done.") == 3
    assert set(read_tracks(out_dir / "tracks.jsonl")) == {
        "synth-00000",
        "synth-00001",
    }
    assert read_json(out_dir / "metrics.json")["kind"] == "metrics"
    assert (out_dir / "plot_data" / "synth-00000.csv").exists()
    assert (out_dir / "entropy.json").exists()


def test_cli_stepwise_commands(tmp_path, config_path, scenes, capsys):
    scenes_path = str(write_scenes(tmp_path / "scenes.jsonl", scenes))
    weights = tmp_path / "model.weights"
    save_weights(weights, build_model_params(load_config(config_path).model_hparams()))
    weights = str(weights)
    common = ["--config", str(config_path), "--quiet"]
    names = ("g.csv", "e.csv", "r.jsonl", "t.jsonl", "m.json", "h.png", "h.json")
    out = {name: str(tmp_path / name) for name in (*names, "base")}

    steps = [
        ["build-graphs", "--scenes", scenes_path, "--label", "--out", out["g.csv"]],
        ["infer", "--scenes", scenes_path, "--weights", weights, "--out", out["e.csv"]],
        ["cluster", "--scenes", scenes_path, "--edges", out["e.csv"]]
        + ["--out", out["r.jsonl"]],
        ["postprocess", "--tracks", out["r.jsonl"], "--out", out["t.jsonl"]],
        ["eval", "--scenes", scenes_path, "--tracks", out["t.jsonl"]]
        + ["--out", out["m.json"]],
        ["entropy", "--scenes", scenes_path, "--weights", weights]
        + ["--histogram", out["h.png"], "--out", out["h.json"]],
        ["baseline", "--scenes", scenes_path, "--out-dir", out["base"]],
    ]
    for command, *rest in steps:
        assert main([command, *common, *rest]) == 0, capsys.readouterr().out

    graphs = pd.read_csv(tmp_path / "g.csv")
    assert list(graphs["scene_id"].unique()) == ["synth-00000", "synth-00001"]
    assert (graphs["active_edges"] <= graphs["edges"]).all()
    assert read_json(tmp_path / "m.json")["kind"] == "metrics"
    assert set(read_json(tmp_path / "h.json")["scenes"]) == {
        "synth-00000",
        "synth-00001",
    }
    assert (tmp_path / "h.png").exists()
    assert (tmp_path / "base" / "tracks.jsonl").exists()


def test_cli_reports_missing_scene_file(tmp_path, config_path, capsys):
    status = main(
        [
            "pipeline",
            "--config",
            str(config_path),
            "--scenes",
            str(tmp_path / "missing.jsonl"),
            "--weights",
            str(tmp_path / "missing.weights"),
        ]
    )

    out = capsys.readouterr().out
    assert status == 1
    assert "[ERROR]" in out
    assert "Done." not in out


def test_cli_reports_config_errors(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("graph:\n  k_pats: 3\n", encoding="utf-8")

    status = main(["synth", "--config", str(path), "--out", str(tmp_path / "s")])

    assert status == 1
    assert "[ERROR] Unknown keys in section 'graph'" in capsys.readouterr().out


def test_cli_overrides_reach_config(tmp_path, config_path):
    out = tmp_path / "scenes.jsonl"

    status = main(
        [
            "synth",
            "--config",
            str(config_path),
            "--num-scenes",
            "1",
            "--seed",
            "5",
            "--frames",
            "3",
            "--out",
            str(out),
        ]
    )

    assert status == 0
    header = read_json_lines(out)[0]
    assert header["scene_id"] == "synth-00005"
    assert header["num_frames"] == 3