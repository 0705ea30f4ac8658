from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from tqdm import tqdm

from model.components import autodiff as ad
from model.components.autodiff import NonFiniteError, Tape, Tensor, backward
from model.components.optim import clip_grad_norm, sgd_step
from model.network import ModelParams, forward
from tracking.utils.features import Detection3D
from tracking.utils.graphbuild import FrameKnnGraph, TrackingGraph


class TrainingDivergedError(RuntimeError):
    """Raised when the loss or the parameters stop being finite."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(f"Training diverged in epoch {epoch}. {message}".strip())


def class_balance_weights(counts: Sequence[float], beta: float = 0.8) -> np.ndarray:
    """
    Per-edge weights (1 - beta) / (1 - beta ** n).

    Counts below 1 are treated as 1, so an unseen category gets weight 1.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}.")
    n = np.maximum(np.asarray(counts, dtype=float), 1.0)
    return (1.0 - beta) / (1.0 - beta**n)


def class_balanced_loss(
    scores: Tensor,
    labels: Sequence[float],
    edge_category_counts: Sequence[float],
    beta: float = 0.8,
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    Class-balanced binary cross entropy averaged over the edges of a window.

    Args:
        scores (Tensor): (E, 1) predicted edge scores.
        labels (Sequence[float]): 0/1 edge labels.
        edge_category_counts (Sequence[float]): Training-set object count of
            each edge's category.
        beta (float): Balancing hyperparameter.

    Returns:
        Tensor: (1, 1) loss; 0 for an empty edge set.
    """
    weights = class_balance_weights(edge_category_counts, beta)
    return ad.weighted_binary_cross_entropy(scores, labels, weights, tape=tape)


def category_counts(
    annotations: Iterable[Detection3D], num_classes: int
) -> dict[int, int]:
    """Absolute frequency of ground-truth annotations per class."""
    counts = {c: 0 for c in range(num_classes)}
    for det in annotations:
        counts[det.class_id] = counts.get(det.class_id, 0) + 1
    return counts


@dataclass(frozen=True, eq=False)
class TrainingWindow:
    """One labeled window graph with everything the loss needs."""

    graph: TrackingGraph
    frame_knn: FrameKnnGraph
    labels: np.ndarray
    edge_counts: np.ndarray

    @classmethod
    def from_graph(
        cls,
        graph: TrackingGraph,
        frame_knn: FrameKnnGraph,
        counts: Mapping[int, int],
    ) -> "TrainingWindow":
        classes = {node.node_id: node.class_id for node in graph.nodes}
        edge_counts = np.array(
            [counts.get(classes[e.j], 1) for e in graph.edges], dtype=float
        )
        return cls(graph, frame_knn, graph.edge_labels(), edge_counts)


@dataclass
class TrainingResult:
    params: ModelParams
    loss_trace: list = field(default_factory=list)
    stopped_early: bool = False


EpochCallback = Callable[[int, ModelParams, list], None]


def train_toy(
    params: ModelParams,
    windows: Sequence[TrainingWindow],
    epochs: int,
    lr: float,
    momentum: float = 0.9,
    beta: float = 0.8,
    use_class_balancing: bool = True,
    grad_clip_norm: Optional[float] = None,
    shuffle_seed: Optional[int] = None,
    stop_flag=None,
    on_epoch_end: Optional[EpochCallback] = None,
    start_epoch: int = 0,
    loss_trace: Optional[list] = None,
    show_progress: bool = True,
) -> TrainingResult:
    """
    Train the edge classifier with SGD, one step per window.

    Args:
        params (ModelParams): Initial parameters.
        windows (Sequence[TrainingWindow]): Labeled training windows.
        epochs (int): Total epoch count (including `start_epoch` already done).
        lr (float): Learning rate.
        momentum (float): SGD momentum.
        beta (float): Class-balancing hyperparameter.
        use_class_balancing (bool): If False every edge has weight 1.
        grad_clip_norm (Optional[float]): Global gradient norm cap.
        shuffle_seed (Optional[int]): Shuffle window order per epoch with this
            seed; fixed order when None.
        stop_flag: Object with `is_requested()`; checked after every epoch.
        on_epoch_end (Optional[EpochCallback]): Called with (epoch, params,
            loss trace) after every epoch, e.g. to write a checkpoint.
        start_epoch (int): First epoch to run when resuming.
        loss_trace (Optional[list]): Loss trace of the epochs already run.
        show_progress (bool): Show tqdm bars.

    Returns:
        TrainingResult: Final parameters and the per-epoch mean loss.

    Raises:
        ValueError: If there is nothing to train on.
        TrainingDivergedError: If the loss or a parameter becomes non-finite.
    """
    if not windows:
        raise ValueError("train_toy needs at least one training window.")
    trace = list(loss_trace or [])
    velocity = None
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    stopped = False

    for epoch in tqdm(
        range(start_epoch, epochs), desc="Epochs", disable=not show_progress
    ):
        order = range(len(windows))
        if rng is not None:
            order = rng.permutation(len(windows))
        losses = []
        for idx in order:
            window = windows[idx]
            if window.graph.num_edges == 0:
                continue
            counts = window.edge_counts
            if not use_class_balancing:
                counts = np.ones(window.graph.num_edges)
            try:
                tape = Tape()
                scores = forward(window.graph, window.frame_knn, params, tape)
                loss = class_balanced_loss(scores, window.labels, counts, beta, tape)
                grads = backward(tape, loss, params.named_parameters())
                grads, _ = clip_grad_norm(grads, grad_clip_norm)
                new_tensors, velocity = sgd_step(
                    params.named_parameters(), grads, lr, momentum, velocity
                )
            except NonFiniteError as err:
                raise TrainingDivergedError(epoch, str(err)) from err
            params = params.with_tensors(new_tensors)
            losses.append(loss.item())

        epoch_loss = float(np.mean(losses)) if losses else 0.0
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, "Mean loss is not finite.")
        trace.append(epoch_loss)
        if show_progress:
            tqdm.write(f"[train_toy] epoch {epoch + 1}/{epochs} loss {epoch_loss:.5f}")
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, trace)
        if stop_flag is not None and stop_flag.is_requested():
            stopped = True
            break

    return TrainingResult(params=params, loss_trace=trace, stopped_early=stopped)
