import numpy as np
from scipy.optimize import linear_sum_assignment

# Cost used for disallowed pairs; pairs solved at this cost are discarded.
DISALLOWED_COST = 1e6


def hungarian_assign(cost) -> tuple[list[tuple[int, int]], float]:
    """
    Minimum-cost one-to-one assignment.

    Args:
        cost: (R, C) matrix of finite costs. Disallowed pairs carry
            DISALLOWED_COST.

    Returns:
        tuple: (row-sorted list of (row, col) pairs over min(R, C) rows or
            columns, total cost of those pairs).

    Raises:
        ValueError: If the matrix is not 2D or holds non-finite entries.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return [], 0.0
    if cost.ndim != 2:
        raise ValueError(f"Cost matrix must be 2D, got shape {cost.shape}.")
    if not np.all(np.isfinite(cost)):
        raise ValueError("Cost matrix must be finite; use DISALLOWED_COST instead.")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return pairs, float(cost[rows, cols].sum())


def gated_assign(cost, allowed) -> list[tuple[int, int]]:
    """Assign over allowed pairs only; disallowed pairs never appear in the result."""
    cost = np.asarray(cost, dtype=float)
    allowed = np.asarray(allowed, dtype=bool)
    if cost.size == 0 or not allowed.any():
        return []
    masked = np.where(allowed, cost, DISALLOWED_COST)
    pairs, _ = hungarian_assign(masked)
    return [(r, c) for r, c in pairs if allowed[r, c]]
