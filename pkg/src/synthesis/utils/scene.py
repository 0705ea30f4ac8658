import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from config import DEFAULT_MODALITY_DIMS, MODALITY_TAGS, SYNTHETIC_CLASSES_PATH
from tracking.utils.features import Detection3D, ModalityEmbedding
from tracking.utils.geometry import Box3D, wrap_angle
from tracking.utils.io import Scene


@dataclass(frozen=True)
class ClassPrior:
    """Spawn weight, mean size (w, l, h) and speed prior of one category."""

    class_id: int
    name: str
    spawn_weight: float
    size: tuple[float, float, float]
    size_sigma: float = 0.0
    speed: tuple[float, float] = (0.0, 0.0)


def load_class_priors(path: str | Path = SYNTHETIC_CLASSES_PATH) -> tuple:
    """Load class priors from a YAML list."""
    with open(path, "r", encoding="utf-8") as f:
        entries = yaml.safe_load(f) or []
    return tuple(
        ClassPrior(
            class_id=int(e["class_id"]),
            name=str(e.get("name", e["class_id"])),
            spawn_weight=float(e["spawn_weight"]),
            size=tuple(float(v) for v in e["size"]),
            size_sigma=float(e.get("size_sigma", 0.0)),
            speed=tuple(float(v) for v in e.get("speed", (0.0, 0.0))),
        )
        for e in entries
    )


# Tag -> (presence probability at zero range, decay range in m)
DEFAULT_PRESENCE = {
    "camera": (0.95, 80.0),
    "lidar": (1.0, 120.0),
    "radar": (0.9, 60.0),
}


@dataclass(frozen=True)
class SceneConfig:
    """
    Parameters of one generated scene.

    Attributes:
        seed (int): Seed of the scene's random generator.
        frames (int): Frame count.
        frame_period (float): Seconds between frames.
        classes (tuple[ClassPrior, ...]): Category priors.
        object_count (tuple[int, int]): Inclusive range of object instances.
        extent (float): Objects and clutter live in [-extent, extent]^2 (m).
        center_sigma, yaw_sigma, velocity_sigma (float): Detection noise.
        score_true, score_clutter (tuple[float, float]): Beta distribution
            parameters of true and clutter detection scores.
        p_fn (float): Probability of missing a ground-truth state.
        fp_rate (float): Mean clutter detections per frame (Poisson).
        p_yaw_flip (float): Probability of a detection heading flipped by pi.
        turn_rate_sigma (float): Spread of the per-object turn rate (rad/s).
        modality_presence (dict): Tag -> (presence at zero range, range scale
            in m); presence decays as p0 * exp(-range / scale).
        modality_dims (dict): Embedding width per tag.
        embedding_noise (float): Noise added to instance prototypes.
        clutter_prototypes (int): Size of the clutter prototype pool.
    """

    seed: int = 0
    frames: int = 40
    frame_period: float = 0.5
    classes: tuple = field(default_factory=load_class_priors)
    object_count: tuple[int, int] = (4, 10)
    extent: float = 50.0
    center_sigma: float = 0.15
    yaw_sigma: float = 0.05
    velocity_sigma: float = 0.3
    score_true: tuple[float, float] = (6.0, 2.0)
    score_clutter: tuple[float, float] = (2.0, 4.0)
    p_fn: float = 0.15
    fp_rate: float = 2.0
    p_yaw_flip: float = 0.05
    turn_rate_sigma: float = 0.03
    modality_presence: dict = field(default_factory=lambda: dict(DEFAULT_PRESENCE))
    modality_dims: dict = field(default_factory=lambda: dict(DEFAULT_MODALITY_DIMS))
    embedding_noise: float = 0.3
    clutter_prototypes: int = 8

    def __post_init__(self):
        for name in ("p_fn", "p_yaw_flip"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}.")
        for name in (
            "center_sigma",
            "yaw_sigma",
            "velocity_sigma",
            "turn_rate_sigma",
            "embedding_noise",
            "fp_rate",
        ):
            if getattr(self, name) < 0:
                raise ValueError(
                    f"{name} must be nonnegative, got {getattr(self, name)}."
                )
        if self.frames < 1:
            raise ValueError(f"frames must be at least 1, got {self.frames}.")
        if not self.frame_period > 0 or not self.extent > 0:
            raise ValueError("frame_period and extent must be positive.")
        lo, hi = self.object_count
        if not 0 <= lo <= hi:
            raise ValueError(f"Invalid object_count range {self.object_count}.")
        if not self.classes:
            raise ValueError("At least one class prior is required.")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids) or min(ids) < 0:
            raise ValueError(f"Class ids must be unique and nonnegative, got {ids}.")
        weights = [c.spawn_weight for c in self.classes]
        if min(weights) < 0 or sum(weights) <= 0:
            raise ValueError("Spawn weights must be nonnegative with positive sum.")
        if self.clutter_prototypes < 1:
            raise ValueError("clutter_prototypes must be at least 1.")
        for a, b in (self.score_true, self.score_clutter):
            if a <= 0 or b <= 0:
                raise ValueError("Score Beta parameters must be positive.")
        for tag, (p0, scale) in self.modality_presence.items():
            if tag not in MODALITY_TAGS:
                raise ValueError(f"Unknown modality '{tag}'.")
            if not 0.0 <= p0 <= 1.0 or not scale > 0:
                raise ValueError(
                    f"Modality '{tag}' presence needs p0 in [0, 1] "
                    "and a positive scale."
                )
            if self.modality_dims.get(tag, 0) < 1:
                raise ValueError(f"Modality '{tag}' needs a positive dimension.")


@dataclass
class SyntheticScene(Scene):
    """A generated scene together with the configuration that produced it."""

    config: Optional[SceneConfig] = None


@dataclass
class _Instance:
    instance_id: int
    prior: ClassPrior
    size: tuple[float, float, float]
    first_frame: int
    last_frame: int
    position: np.ndarray
    heading: float
    speed: float
    turn_rate: float
    prototypes: dict


def _spawn_instances(cfg: SceneConfig, rng: np.random.Generator) -> list[_Instance]:
    lo, hi = cfg.object_count
    weights = np.array([c.spawn_weight for c in cfg.classes], dtype=float)
    weights /= weights.sum()
    instances = []
    for k in range(int(rng.integers(lo, hi + 1))):
        prior = cfg.classes[int(rng.choice(len(cfg.classes), p=weights))]
        jitter = 1.0 + prior.size_sigma * rng.standard_normal(3)
        size = tuple(float(s * max(j, 0.5)) for s, j in zip(prior.size, jitter))
        first = int(rng.integers(0, max(1, cfg.frames // 2)))
        length = int(rng.integers(max(1, cfg.frames // 2), cfg.frames + 1))
        instances.append(
            _Instance(
                instance_id=k,
                prior=prior,
                size=size,
                first_frame=first,
                last_frame=min(cfg.frames - 1, first + length - 1),
                position=rng.uniform(-cfg.extent, cfg.extent, size=2),
                heading=float(rng.uniform(-math.pi, math.pi)),
                speed=float(max(0.0, rng.normal(*prior.speed))),
                turn_rate=float(rng.normal(0.0, cfg.turn_rate_sigma)),
                prototypes={
                    tag: rng.standard_normal(cfg.modality_dims[tag])
                    for tag in sorted(cfg.modality_presence)
                },
            )
        )
    return instances


def _ground_truth_states(cfg: SceneConfig, inst: _Instance) -> list[dict]:
    """Constant-speed, gently turning motion from first to last frame."""
    states = []
    position, heading = inst.position.copy(), inst.heading
    dt = cfg.frame_period
    for frame in range(inst.first_frame, inst.last_frame + 1):
        velocity = inst.speed * np.array([math.cos(heading), math.sin(heading)])
        states.append(
            {
                "frame": frame,
                "center": (
                    float(position[0]),
                    float(position[1]),
                    inst.size[2] / 2.0,
                ),
                "yaw": wrap_angle(heading),
                "velocity": (float(velocity[0]), float(velocity[1])),
            }
        )
        heading += inst.turn_rate * dt
        position = position + velocity * dt
    return states


def _embeddings(
    cfg: SceneConfig,
    rng: np.random.Generator,
    center: tuple[float, float, float],
    prototypes: dict,
) -> dict:
    distance = math.hypot(center[0], center[1])
    modalities = {}
    for tag in sorted(cfg.modality_presence):
        p0, scale = cfg.modality_presence[tag]
        present = bool(rng.random() < p0 * math.exp(-distance / scale))
        noise = cfg.embedding_noise * rng.standard_normal(cfg.modality_dims[tag])
        if present:
            modalities[tag] = ModalityEmbedding(tag, prototypes[tag] + noise)
        else:
            modalities[tag] = ModalityEmbedding.absent(tag, cfg.modality_dims[tag])
    return modalities


def generate_scene(cfg: SceneConfig, scene_id: str = "") -> SyntheticScene:
    """
    Generate ground-truth trajectories and corrupted detections.

    The scene is a pure function of the config: the same seed yields the same
    scene. Detections are the ground-truth states plus Gaussian noise, dropped
    with p_fn and flipped by pi with p_yaw_flip. Clutter is drawn uniformly in
    the scene extent with a random class and embeddings from a clutter
    prototype pool.

    Returns:
        SyntheticScene: Detections, annotations and exact provenance.
    """
    rng = np.random.default_rng(cfg.seed)
    scene_id = scene_id or f"synth-{cfg.seed:05d}"
    instances = _spawn_instances(cfg, rng)
    clutter_pool = {
        tag: rng.standard_normal((cfg.clutter_prototypes, cfg.modality_dims[tag]))
        for tag in sorted(cfg.modality_presence)
    }

    per_frame: dict[int, list[tuple[_Instance, dict]]] = {}
    for inst in instances:
        for state in _ground_truth_states(cfg, inst):
            per_frame.setdefault(state["frame"], []).append((inst, state))

    detections = [[] for _ in range(cfg.frames)]
    annotations = [[] for _ in range(cfg.frames)]
    provenance: dict[int, Optional[int]] = {}
    next_det, next_gt = 0, 0
    a_true, b_true = cfg.score_true
    a_fp, b_fp = cfg.score_clutter

    for frame in range(cfg.frames):
        timestamp = frame * cfg.frame_period
        for inst, state in per_frame.get(frame, []):
            gt_box = Box3D(state["center"], inst.size, state["yaw"])
            annotations[frame].append(
                Detection3D(
                    det_id=next_gt,
                    box=gt_box,
                    velocity=state["velocity"],
                    class_id=inst.prior.class_id,
                    score=1.0,
                    timestamp=timestamp,
                    frame_index=frame,
                    gt_instance=inst.instance_id,
                )
            )
            next_gt += 1

            # Noise is drawn for missed states too; draw order ignores p_fn.
            missed = rng.random() < cfg.p_fn
            offset = cfg.center_sigma * rng.standard_normal(3)
            yaw = state["yaw"] + cfg.yaw_sigma * rng.standard_normal()
            if rng.random() < cfg.p_yaw_flip:
                yaw += math.pi
            v_noise = cfg.velocity_sigma * rng.standard_normal(2)
            score = float(rng.beta(a_true, b_true))
            center = tuple(float(c + o) for c, o in zip(state["center"], offset))
            modalities = _embeddings(cfg, rng, center, inst.prototypes)
            if missed:
                continue
            detections[frame].append(
                Detection3D(
                    det_id=next_det,
                    box=Box3D(center, inst.size, wrap_angle(yaw)),
                    velocity=tuple(
                        float(v + n) for v, n in zip(state["velocity"], v_noise)
                    ),
                    class_id=inst.prior.class_id,
                    score=score,
                    timestamp=timestamp,
                    frame_index=frame,
                    modalities=modalities,
                )
            )
            provenance[next_det] = inst.instance_id
            next_det += 1

        for _ in range(int(rng.poisson(cfg.fp_rate))):
            prior = cfg.classes[int(rng.integers(len(cfg.classes)))]
            xy = rng.uniform(-cfg.extent, cfg.extent, size=2)
            center = (float(xy[0]), float(xy[1]), prior.size[2] / 2.0)
            prototypes = {
                tag: pool[int(rng.integers(len(pool)))]
                for tag, pool in clutter_pool.items()
            }
            velocity = rng.normal(0.0, 1.0, size=2)
            detections[frame].append(
                Detection3D(
                    det_id=next_det,
                    box=Box3D(
                        center, prior.size, float(rng.uniform(-math.pi, math.pi))
                    ),
                    velocity=(float(velocity[0]), float(velocity[1])),
                    class_id=prior.class_id,
                    score=float(rng.beta(a_fp, b_fp)),
                    timestamp=timestamp,
                    frame_index=frame,
                    modalities=_embeddings(cfg, rng, center, prototypes),
                )
            )
            provenance[next_det] = None
            next_det += 1

    return SyntheticScene(
        scene_id=scene_id,
        num_frames=cfg.frames,
        frame_period=cfg.frame_period,
        detections=detections,
        annotations=annotations,
        provenance=provenance,
        config=cfg,
    )


def generate_dataset(
    base: SceneConfig, num_scenes: int, first_seed: Optional[int] = None
) -> list[SyntheticScene]:
    """Scenes with consecutive seeds starting at first_seed (default base.seed)."""
    start = base.seed if first_seed is None else first_seed
    return [
        generate_scene(replace(base, seed=seed), scene_id=f"synth-{seed:05d}")
        for seed in range(start, start + num_scenes)
    ]


def scene_config_from_settings(
    settings, modality_dims: dict, seed: Optional[int] = None
) -> SceneConfig:
    """Build a SceneConfig from the `synthesis` config section."""
    return SceneConfig(
        seed=settings.seed if seed is None else seed,
        frames=settings.frames,
        frame_period=settings.frame_period,
        object_count=tuple(settings.object_count),
        p_fn=settings.p_fn,
        fp_rate=settings.fp_rate,
        p_yaw_flip=settings.p_yaw_flip,
        center_sigma=settings.center_sigma,
        yaw_sigma=settings.yaw_sigma,
        velocity_sigma=settings.velocity_sigma,
        embedding_noise=settings.embedding_noise,
        modality_presence={
            tag: p for tag, p in DEFAULT_PRESENCE.items() if tag in modality_dims
        },
        modality_dims=dict(modality_dims),
    )
