from typing import Mapping, Optional

import numpy as np

from model.components.autodiff import ShapeError, Tensor


def clip_grad_norm(
    grads: Mapping[str, np.ndarray], max_norm: Optional[float]
) -> tuple[dict[str, np.ndarray], float]:
    """
    Rescale gradients so their global L2 norm does not exceed max_norm.

    Returns:
        tuple: (possibly rescaled gradients, norm before clipping).
    """
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or max_norm <= 0 or total <= max_norm:
        return dict(grads), total
    factor = max_norm / total
    return {name: g * factor for name, g in grads.items()}, total


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    velocity: Optional[Mapping[str, np.ndarray]] = None,
) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """
    One step of SGD with momentum.

    velocity <- momentum * velocity + grad
    param    <- param - lr * velocity

    Args:
        params (Mapping[str, Tensor]): Current parameters.
        grads (Mapping[str, np.ndarray]): Gradient per parameter name.
        lr (float): Learning rate.
        momentum (float): Momentum coefficient.
        velocity (Optional[Mapping[str, np.ndarray]]): Previous velocity;
            zeros when omitted.

    Returns:
        tuple: (new parameters, new velocity). Inputs are not modified.

    Raises:
        ShapeError: If a gradient is missing or its shape differs from its parameter.
    """
    new_params: dict[str, Tensor] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, param in params.items():
        if name not in grads:
            raise ShapeError(f"No gradient for parameter '{name}'.")
        grad = np.asarray(grads[name], dtype=float)
        if grad.shape != param.shape:
            raise ShapeError(
                f"Gradient for '{name}' has shape {grad.shape}, expected {param.shape}."
            )
        prev = np.zeros(param.shape) if velocity is None else velocity[name]
        v = momentum * prev + grad
        new_velocity[name] = v
        new_params[name] = Tensor(param.data - lr * v, name=name)
    return new_params, new_velocity
