from typing import Callable, Mapping, Optional

import numpy as np

from model.components.autodiff import Tape, Tensor, backward

LossFn = Callable[[Mapping[str, Tensor], Optional[Tape]], Tensor]


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    f: LossFn,
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> float:
    """
    Compare tape gradients with central finite differences.

    Args:
        f: Deterministic loss function f(params, tape) returning a (1, 1) tensor.
        params: Named parameters to check.
        step (float): Perturbation size.
        max_entries (Optional[int]): If set, check at most this many randomly
            chosen entries per parameter.
        rng (Optional[np.random.Generator]): Entry sampler (seeded default).
        floor (float): Lower bound of the relative-error denominator, so that
            two vanishing gradients compare as equal.

    Returns:
        float: Largest relative discrepancy over the checked entries.
    """
    rng = rng or np.random.default_rng(0)
    tape = Tape()
    loss = f(params, tape)
    analytic = backward(tape, loss, params)

    worst = 0.0
    for name, param in params.items():
        flat_size = param.data.size
        entries = np.arange(flat_size)
        if max_entries is not None and flat_size > max_entries:
            entries = np.sort(rng.choice(flat_size, size=max_entries, replace=False))
        for flat in entries:
            idx = np.unravel_index(flat, param.shape)
            values = {}
            for sign in (1.0, -1.0):
                data = param.data.copy()
                data[idx] += sign * step
                shifted = dict(params)
                shifted[name] = Tensor(data, name=name)
                values[sign] = f(shifted, None).item()
            numeric = (values[1.0] - values[-1.0]) / (2.0 * step)
            err = relative_error(float(analytic[name][idx]), numeric, floor)
            worst = max(worst, err)
    return worst
