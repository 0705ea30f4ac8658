from typing import Sequence

import numpy as np
from sklearn.metrics import average_precision_score

from evaluation.utils.clear_mot import UndefinedMetricError


def edge_average_precision(scores: Sequence[float], labels: Sequence[float]) -> float:
    """
    Average precision of edge scores against 0/1 edge labels.

    Raises:
        ValueError: If the inputs differ in length.
        UndefinedMetricError: If there is no active (label 1) edge.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(
            f"Got {scores.size} scores but {labels.size} labels for edge AP."
        )
    if not np.any(labels > 0.5):
        raise UndefinedMetricError("Edge AP is undefined without active edges.")
    return float(average_precision_score(labels > 0.5, scores))
