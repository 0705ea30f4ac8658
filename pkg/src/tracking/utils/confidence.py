import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from matplotlib.figure import Figure

FILTER_DIRECTIONS = ("above-mean", "below-mean")


@dataclass(frozen=True)
class SceneConfidence:
    """Per-window entropies of one scene and their mean."""

    scene_id: str
    batch_entropies: tuple[float, ...] = field(default_factory=tuple)

    @property
    def scene_entropy(self) -> float:
        if not self.batch_entropies:
            return 0.0
        return float(np.mean(self.batch_entropies))


def batch_entropy(scores: Sequence[float]) -> float:
    """
    Normalised Shannon entropy of one window's edge-score distribution.

    Scores are normalised to sum to 1 and H = -sum(z ln z) / ln|E|, with
    0 ln 0 taken as 0. A window with at most one edge, or with only zero
    scores, has entropy 0.

    Raises:
        ValueError: If any score is negative or not finite.
    """
    values = np.asarray(scores, dtype=float).reshape(-1)
    if not np.all(np.isfinite(values)):
        raise ValueError("Edge scores must be finite.")
    if np.any(values < 0):
        raise ValueError(f"Edge scores must be nonnegative, got min {values.min()}.")
    total = values.sum()
    if values.size <= 1 or total <= 0.0:
        return 0.0
    z = values[values > 0] / total
    h = float(-np.sum(z * np.log(z)) / math.log(values.size))
    return min(1.0, max(0.0, h))


def scene_entropy(
    window_scores: Sequence[Sequence[float]], scene_id: str = ""
) -> SceneConfidence:
    """Entropy of every window of a scene; the scene entropy is their mean."""
    return SceneConfidence(
        scene_id=scene_id,
        batch_entropies=tuple(batch_entropy(s) for s in window_scores),
    )


def filter_scenes(
    scene_entropies: Mapping[str, float], direction: str = "above-mean"
) -> set[str]:
    """
    Keep scenes whose entropy lies strictly on one side of the mean.

    Args:
        scene_entropies (Mapping[str, float]): Scene id -> scene entropy.
        direction (str): "above-mean" or "below-mean". Ties with the mean are
            always excluded.

    Returns:
        set[str]: Ids of the kept scenes.
    """
    if direction not in FILTER_DIRECTIONS:
        raise ValueError(
            f"Unknown filter direction '{direction}', "
            f"expected one of {FILTER_DIRECTIONS}."
        )
    if not scene_entropies:
        return set()
    mean = float(np.mean(list(scene_entropies.values())))
    # Entropies within rounding of the mean count as ties
    off_mean = {
        s: h
        for s, h in scene_entropies.items()
        if not math.isclose(h, mean, abs_tol=1e-12)
    }
    if direction == "above-mean":
        return {s for s, h in off_mean.items() if h > mean}
    return {s for s, h in off_mean.items() if h < mean}


def plot_score_histogram(
    scores: Sequence[float],
    output_path: Path,
    labels: Optional[Sequence[int]] = None,
    bins: int = 20,
    title: str = "Edge scores",
) -> Path:
    """
    Save a log-scaled histogram of predicted edge scores.

    When edge labels are given, active and inactive edges are drawn as two
    stacked series.
    """
    values = np.asarray(scores, dtype=float)
    edges = np.linspace(0.0, 1.0, bins + 1)

    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    if labels is None:
        ax.hist(values, bins=edges, color="tab:blue")
    else:
        mask = np.asarray(labels) > 0
        ax.hist(
            [values[mask], values[~mask]],
            bins=edges,
            stacked=True,
            color=["tab:green", "tab:red"],
            label=["active", "inactive"],
        )
        ax.legend()
    ax.set_yscale("log")
    ax.set_xlabel("score")
    ax.set_ylabel("edges")
    ax.set_title(title)

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output_path)
    return output_path
