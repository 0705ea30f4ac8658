import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from config import (
    CONFIG_ENV_VAR,
    DEFAULT_CONFIG_PATH,
    DEFAULT_MODALITY_DIMS,
    MODALITY_TAGS,
)
from model.network import ATTENTION_MODES, HIDDEN_ACTIVATIONS, ModelHparams
from tracking.utils.confidence import FILTER_DIRECTIONS
from tracking.utils.postprocessing import DEFAULT_SMOOTHING_WEIGHTS, PAIRING_MODES


class ConfigError(ValueError):
    """Out-of-range, unknown or mismatched configuration values."""


@dataclass(frozen=True)
class GraphSettings:
    window_length: int = 5
    stride: int = 1
    k_past: int = 40
    k_frame: int = 20
    include_partial_windows: bool = False
    gt_radius: float = 2.0
    gt_iou_min: float = 0.1


@dataclass(frozen=True)
class ModelSettings:
    num_classes: int = 3
    hidden_dim: int = 64
    mp_steps: int = 6
    heads: int = 2
    head_dim: int = 8
    modality_tokens: int = 4
    modality_dims: dict = field(default_factory=lambda: dict(DEFAULT_MODALITY_DIMS))
    modalities: tuple = MODALITY_TAGS
    attention_mode: str = "cross_edge"
    use_frame_gat: bool = True
    hidden_activation: str = "relu"
    seed: int = 0


@dataclass(frozen=True)
class TrainingSettings:
    epochs: int = 30
    lr: float = 1e-4
    momentum: float = 0.9
    beta: float = 0.8
    use_class_balancing: bool = True
    grad_clip_norm: Optional[float] = 5.0
    shuffle_seed: Optional[int] = 0
    val_fraction: float = 0.2


@dataclass(frozen=True)
class ClusteringSettings:
    theta_min: float = 0.1
    theta_join: float = 0.5
    singleton_min_score: float = 0.0


@dataclass(frozen=True)
class PostprocessingSettings:
    enabled: bool = True
    interpolate: bool = True
    correct_yaw: bool = True
    join_still: bool = True
    smooth: bool = True
    still_iou_min: float = 0.7
    join_iou_min: float = 0.6
    smoothing_window: int = 3
    smoothing_weights: tuple = DEFAULT_SMOOTHING_WEIGHTS
    intra_iou_pairing: str = "all"


@dataclass(frozen=True)
class EvaluationSettings:
    gate_distance: float = 2.0
    class_equal: bool = True
    sweep_points: int = 40


@dataclass(frozen=True)
class SynthesisSettings:
    seed: int = 0
    num_scenes: int = 10
    frames: int = 40
    frame_period: float = 0.5
    object_count: tuple = (4, 10)
    p_fn: float = 0.15
    fp_rate: float = 2.0
    p_yaw_flip: float = 0.05
    center_sigma: float = 0.15
    yaw_sigma: float = 0.05
    velocity_sigma: float = 0.3
    embedding_noise: float = 0.3


@dataclass(frozen=True)
class RuntimeSettings:
    threads: int = 1
    filter_direction: str = "above-mean"
    show_progress: bool = True


SECTIONS = {
    "graph": GraphSettings,
    "model": ModelSettings,
    "training": TrainingSettings,
    "clustering": ClusteringSettings,
    "postprocessing": PostprocessingSettings,
    "evaluation": EvaluationSettings,
    "synthesis": SynthesisSettings,
    "runtime": RuntimeSettings,
}


@dataclass(frozen=True)
class PipelineConfig:
    graph: GraphSettings = field(default_factory=GraphSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    clustering: ClusteringSettings = field(default_factory=ClusteringSettings)
    postprocessing: PostprocessingSettings = field(
        default_factory=PostprocessingSettings
    )
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    synthesis: SynthesisSettings = field(default_factory=SynthesisSettings)
    runtime: RuntimeSettings = field(default_factory=RuntimeSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_hparams(self) -> ModelHparams:
        m = self.model
        return ModelHparams(
            num_classes=m.num_classes,
            hidden_dim=m.hidden_dim,
            mp_steps=m.mp_steps,
            heads=m.heads,
            head_dim=m.head_dim,
            modality_tokens=m.modality_tokens,
            modality_dims=dict(m.modality_dims),
            modalities=tuple(m.modalities),
            attention_mode=m.attention_mode,
            use_frame_gat=m.use_frame_gat,
            hidden_activation=m.hidden_activation,
            seed=m.seed,
        )


# ============================================================
# Loading and merging
# ============================================================


def _coerce(current: Any, value: Any) -> Any:
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    return value


def _merge_section(section, values: Mapping[str, Any], name: str):
    known = {f.name for f in fields(section)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {sorted(unknown)}")
    updates = {k: _coerce(getattr(section, k), v) for k, v in values.items()}
    return replace(section, **updates)


def merge_config(config: PipelineConfig, data: Mapping[str, Any]) -> PipelineConfig:
    """Overlay a nested mapping {section: {key: value}} onto a config."""
    updates = {}
    for name, values in (data or {}).items():
        if name not in SECTIONS:
            raise ConfigError(f"Unknown config section '{name}'.")
        if values is None:
            continue
        if not isinstance(values, Mapping):
            raise ConfigError(f"Config section '{name}' must be a mapping.")
        updates[name] = _merge_section(getattr(config, name), values, name)
    return replace(config, **updates)


def apply_overrides(
    config: PipelineConfig, overrides: Mapping[str, Any]
) -> PipelineConfig:
    """
    Apply dotted overrides such as {"graph.k_past": 10}; None values are skipped.
    """
    nested: dict[str, dict] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if not name:
            raise ConfigError(f"Override '{key}' must look like 'section.key'.")
        nested.setdefault(section, {})[name] = value
    return merge_config(config, nested)


def _read_yaml(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a mapping of sections.")
    return data


def load_config(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    defaults_path: Optional[Path] = DEFAULT_CONFIG_PATH,
) -> PipelineConfig:
    """
    Build the pipeline configuration.

    Precedence, lowest first: built-in defaults (dataclass defaults overlaid
    with `defaults_path`), the user config file (`path`, else the file named by
    the GRAPHTRACK_CONFIG environment variable), then `overrides`.

    Raises:
        ConfigError: On unknown keys, unreadable files or out-of-range values.
    """
    config = PipelineConfig()
    if defaults_path is not None and Path(defaults_path).exists():
        config = merge_config(config, _read_yaml(Path(defaults_path)))
    user_path = path or os.environ.get(CONFIG_ENV_VAR)
    if user_path:
        print(f"Loading config from: {user_path}")
        config = merge_config(config, _read_yaml(Path(user_path)))
    if overrides:
        config = apply_overrides(config, overrides)
    validate_config(config)
    return config


# ============================================================
# Validation
# ============================================================


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def validate_config(config: PipelineConfig) -> None:
    """Enforce the documented value ranges."""
    g, m, t = config.graph, config.model, config.training
    _require(g.window_length >= 2, "graph.window_length must be >= 2.")
    _require(g.stride >= 1, "graph.stride must be >= 1.")
    _require(g.k_past >= 1, "graph.k_past must be >= 1.")
    _require(g.k_frame >= 0, "graph.k_frame must be >= 0.")
    _require(g.gt_radius > 0, "graph.gt_radius must be positive.")
    _require(0.0 <= g.gt_iou_min <= 1.0, "graph.gt_iou_min must lie in [0, 1].")

    _require(m.num_classes >= 1, "model.num_classes must be >= 1.")
    _require(m.mp_steps >= 0, "model.mp_steps must be >= 0.")
    _require(
        m.attention_mode in ATTENTION_MODES,
        f"model.attention_mode must be one of {ATTENTION_MODES}.",
    )
    _require(
        m.hidden_activation in HIDDEN_ACTIVATIONS,
        f"model.hidden_activation must be one of {HIDDEN_ACTIVATIONS}.",
    )
    try:
        config.model_hparams()
    except ValueError as e:
        raise ConfigError(f"Invalid model settings: {e}") from e

    _require(t.epochs >= 0, "training.epochs must be >= 0.")
    _require(t.lr > 0, "training.lr must be positive.")
    _require(0.0 <= t.momentum < 1.0, "training.momentum must lie in [0, 1).")
    _require(0.0 <= t.beta < 1.0, "training.beta must lie in [0, 1).")
    _require(0.0 <= t.val_fraction < 1.0, "training.val_fraction must lie in [0, 1).")

    c = config.clustering
    _require(0.0 <= c.theta_min <= 1.0, "clustering.theta_min must lie in [0, 1].")
    _require(0.0 <= c.theta_join <= 1.0, "clustering.theta_join must lie in [0, 1].")
    _require(
        0.0 <= c.singleton_min_score <= 1.0,
        "clustering.singleton_min_score must lie in [0, 1].",
    )

    p = config.postprocessing
    _require(
        0.0 <= p.still_iou_min <= 1.0,
        "postprocessing.still_iou_min must lie in [0, 1].",
    )
    _require(
        0.0 <= p.join_iou_min <= 1.0, "postprocessing.join_iou_min must lie in [0, 1]."
    )
    _require(
        p.smoothing_window >= 1 and p.smoothing_window % 2 == 1,
        "postprocessing.smoothing_window must be odd and positive.",
    )
    _require(
        len(p.smoothing_weights) == p.smoothing_window,
        "postprocessing.smoothing_weights must have smoothing_window entries.",
    )
    _require(
        p.intra_iou_pairing in PAIRING_MODES,
        f"postprocessing.intra_iou_pairing must be one of {PAIRING_MODES}.",
    )

    e = config.evaluation
    _require(e.gate_distance > 0, "evaluation.gate_distance must be positive.")
    _require(e.sweep_points >= 1, "evaluation.sweep_points must be >= 1.")

    s = config.synthesis
    _require(s.num_scenes >= 0, "synthesis.num_scenes must be >= 0.")
    _require(0.0 <= s.p_fn <= 1.0, "synthesis.p_fn must lie in [0, 1].")
    _require(0.0 <= s.p_yaw_flip <= 1.0, "synthesis.p_yaw_flip must lie in [0, 1].")
    _require(s.fp_rate >= 0, "synthesis.fp_rate must be >= 0.")

    r = config.runtime
    _require(r.threads >= 1, "runtime.threads must be >= 1.")
    _require(
        r.filter_direction in FILTER_DIRECTIONS,
        f"runtime.filter_direction must be one of {FILTER_DIRECTIONS}.",
    )


_HPARAM_KEYS = (
    "num_classes",
    "hidden_dim",
    "mp_steps",
    "heads",
    "head_dim",
    "modality_tokens",
    "modality_dims",
    "modalities",
    "attention_mode",
    "use_frame_gat",
    "hidden_activation",
)


def check_hparams_match(expected: ModelHparams, found: ModelHparams) -> None:
    """
    Raise ConfigError when weights were trained with another architecture.

    The initialisation seed is not compared.
    """
    a, b = expected.to_dict(), found.to_dict()
    diffs = [
        f"{k}: config {a[k]!r} vs weights {b[k]!r}"
        for k in _HPARAM_KEYS
        if a[k] != b[k]
    ]
    if diffs:
        raise ConfigError("Weights do not match the configuration: " + "; ".join(diffs))
