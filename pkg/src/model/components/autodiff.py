from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes do not chain."""


class NonFiniteError(ValueError):
    """Raised when an operation produces NaN or Inf."""


class TapeStateError(RuntimeError):
    """Raised when a tape is used out of order."""


class Tensor:
    """
    An immutable 2D array of float64 values.

    Scalars are stored as (1, 1) and vectors as single rows. Parameters are
    ordinary tensors with a name; gradients live on the Tape, never on the
    tensor, so trained parameters can be shared between threads.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ShapeError(f"Tensor must be at most 2D, got shape {arr.shape}.")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(
                f"Tensor{' ' + name if name else ''} contains NaN or Inf."
            )
        arr.setflags(write=False)
        self.data = arr
        self.name = name

    @classmethod
    def zeros(cls, rows: int, cols: int, name: Optional[str] = None) -> "Tensor":
        return cls(np.zeros((rows, cols)), name=name)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a (1, 1) tensor, got {self.data.shape}.")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """
    Records the ops of one forward pass for reverse-mode differentiation.

    A tape is single-use: after `backward` it holds the gradients and refuses
    further recording.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._grads: dict[int, np.ndarray] = {}
        self._done = False

    def __len__(self) -> int:
        return len(self._records)

    @property
    def done(self) -> bool:
        return self._done

    def record(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        if self._done:
            raise TapeStateError("Cannot record on a tape after backward().")
        self._records.append(_Record(out, parents, backward))

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the loss with respect to t; zeros if t did not take part."""
        if not self._done:
            raise TapeStateError("Gradients are only available after backward().")
        g = self._grads.get(id(t))
        return np.zeros(t.shape) if g is None else g


def backward(
    tape: Tape,
    loss: Tensor,
    params: Optional[Mapping[str, Tensor]] = None,
    seed: float = 1.0,
) -> dict[str, np.ndarray]:
    """
    Propagate gradients from a scalar loss back through the tape.

    Records are visited in reverse creation order, which is a reverse
    topological order because every op is recorded after its inputs exist.

    Args:
        tape (Tape): Tape holding the forward pass that produced `loss`.
        loss (Tensor): A (1, 1) tensor recorded on the tape.
        params (Optional[Mapping[str, Tensor]]): Named tensors to report.
        seed (float): Upstream gradient of the loss.

    Returns:
        dict[str, np.ndarray]: Gradient per named parameter, zeros for
            parameters that did not take part in the forward pass.

    Raises:
        TapeStateError: If nothing was recorded, the tape was already used, or
            the loss does not come from this tape.
        ShapeError: If the loss is not a scalar.
    """
    if tape.done:
        raise TapeStateError("backward() already ran on this tape.")
    if not tape._records:
        raise TapeStateError("backward() called before any forward op was recorded.")
    if loss.shape != (1, 1):
        raise ShapeError(f"Loss must be a (1, 1) tensor, got {loss.shape}.")
    if not any(rec.out is loss for rec in tape._records):
        raise TapeStateError("The loss tensor was not produced on this tape.")

    grads: dict[int, np.ndarray] = {id(loss): np.full((1, 1), float(seed))}
    for rec in reversed(tape._records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        for parent, pg in zip(rec.parents, rec.backward(g)):
            if pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg)

    tape._grads = grads
    tape._done = True
    if params is None:
        return {}
    return {name: tape.grad(t) for name, t in params.items()}


# ============================================================
# Helpers
# ============================================================


def _emit(
    tape: Optional[Tape],
    data: np.ndarray,
    parents: tuple,
    grad_fn: Callable,
    op: str,
) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced NaN or Inf.")
    out = Tensor(data)
    if tape is not None:
        tape.record(out, parents, grad_fn)
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, int]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast."
        ) from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def constant(values) -> Tensor:
    return Tensor(values)


# ============================================================
# Arithmetic
# ============================================================


def matmul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} does not chain.")
    return _emit(
        tape,
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _emit(
        tape,
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return _emit(
        tape,
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    shape = _broadcast_shape(a, b, "mul")

    def grad_fn(g):
        ga = np.broadcast_to(g * b.data, shape)
        gb = np.broadcast_to(g * a.data, shape)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(tape, a.data * b.data, (a, b), grad_fn, "mul")


def scale(a: Tensor, factor: float, tape: Optional[Tape] = None) -> Tensor:
    return _emit(tape, a.data * factor, (a,), lambda g: (g * factor,), "scale")


def reshape(a: Tensor, rows: int, cols: int, tape: Optional[Tape] = None) -> Tensor:
    """Row-major reshape."""
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as ({rows}, {cols}).")
    return _emit(
        tape,
        a.data.reshape(rows, cols).copy(),
        (a,),
        lambda g: (g.reshape(a.shape),),
        "reshape",
    )


def transpose(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return _emit(tape, a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def sum_all(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return _emit(
        tape,
        np.array([[a.data.sum()]]),
        (a,),
        lambda g: (np.full(a.shape, g[0, 0]),),
        "sum_all",
    )


def mean_all(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Mean over all entries; an empty tensor has mean 0."""
    n = a.data.size
    if n == 0:
        return _emit(
            tape, np.zeros((1, 1)), (a,), lambda g: (np.zeros(a.shape),), "mean_all"
        )
    return _emit(
        tape,
        np.array([[a.data.mean()]]),
        (a,),
        lambda g: (np.full(a.shape, g[0, 0] / n),),
        "mean_all",
    )


def sum_cols(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Row-wise sum, (n, d) -> (n, 1)."""
    return _emit(
        tape,
        a.data.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
        "sum_cols",
    )


# ============================================================
# Activations
# ============================================================


def relu(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    mask = a.data > 0
    return _emit(tape, a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2, tape: Optional[Tape] = None) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return _emit(tape, a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    s = expit(a.data)
    return _emit(tape, s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def identity(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return a


ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "identity")


def activate(
    a: Tensor, activation: str, slope: float = 0.2, tape: Optional[Tape] = None
) -> Tensor:
    if activation == "relu":
        return relu(a, tape)
    if activation == "leaky_relu":
        return leaky_relu(a, slope, tape)
    if activation == "sigmoid":
        return sigmoid(a, tape)
    if activation == "identity":
        return a
    raise ValueError(
        f"Unknown activation '{activation}', expected one of {ACTIVATIONS}."
    )


def softmax_rows(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    if a.data.size == 0:
        raise ShapeError("softmax_rows needs a nonempty tensor.")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(tape, s, (a,), grad_fn, "softmax_rows")


# ============================================================
# Structure: concatenation, gathers and scatters
# ============================================================


def concat(
    tensors: Sequence[Tensor], axis: int = 1, tape: Optional[Tape] = None
) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor.")
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise ShapeError(
            f"concat along axis {axis}: mismatched shapes {[t.shape for t in tensors]}."
        )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(
        tape,
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        grad_fn,
        "concat",
    )


def gather_rows(a: Tensor, index: np.ndarray, tape: Optional[Tape] = None) -> Tensor:
    """Select rows by index (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.rows):
        raise ShapeError(f"gather_rows: index out of range for {a.rows} rows.")

    def grad_fn(g):
        out = np.zeros(a.shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit(tape, a.data[index].reshape(-1, a.cols), (a,), grad_fn, "gather_rows")


def scatter_add_rows(
    a: Tensor, index: np.ndarray, num_rows: int, tape: Optional[Tape] = None
) -> Tensor:
    """Sum rows of `a` into `num_rows` output rows; row r of a goes to index[r]."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (a.rows,):
        raise ShapeError(
            f"scatter_add_rows: {index.shape[0]} indices for {a.rows} rows."
        )
    if index.size and (index.min() < 0 or index.max() >= num_rows):
        raise ShapeError(f"scatter_add_rows: index out of range for {num_rows} rows.")
    out = np.zeros((num_rows, a.cols))
    np.add.at(out, index, a.data)
    return _emit(
        tape,
        out,
        (a,),
        lambda g: (g[index].reshape(a.shape),),
        "scatter_add_rows",
    )


def segment_softmax(
    logits: Tensor, segments: np.ndarray, num_segments: int, tape: Optional[Tape] = None
) -> Tensor:
    """
    Softmax of a column of logits within each segment.

    Args:
        logits (Tensor): (n, 1) scores.
        segments (np.ndarray): Segment id in [0, num_segments) for every row.
        num_segments (int): Number of segments.

    Returns:
        Tensor: (n, 1) weights summing to 1 inside every nonempty segment.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if logits.cols != 1 or segments.shape != (logits.rows,):
        raise ShapeError(
            f"segment_softmax needs (n, 1) logits and n segment ids, "
            f"got {logits.shape} and {segments.shape}."
        )
    if logits.rows == 0:
        return _emit(
            tape, np.zeros((0, 1)), (logits,), lambda g: (g,), "segment_softmax"
        )
    x = logits.data[:, 0]
    peak = np.full(num_segments, -np.inf)
    np.maximum.at(peak, segments, x)
    e = np.exp(x - peak[segments])
    totals = np.zeros(num_segments)
    np.add.at(totals, segments, e)
    s = e / totals[segments]

    def grad_fn(g):
        gs = g[:, 0] * s
        seg_sum = np.zeros(num_segments)
        np.add.at(seg_sum, segments, gs)
        return ((gs - s * seg_sum[segments]).reshape(-1, 1),)

    return _emit(tape, s.reshape(-1, 1), (logits,), grad_fn, "segment_softmax")


# ============================================================
# Losses
# ============================================================


def weighted_binary_cross_entropy(
    probs: Tensor,
    targets: np.ndarray,
    weights: np.ndarray,
    eps: float = 1e-12,
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    Mean of w * BCE(p, y) over rows, with probabilities clamped to [eps, 1-eps].

    Returns 0 for an empty input.
    """
    y = np.asarray(targets, dtype=float).reshape(-1, 1)
    w = np.asarray(weights, dtype=float).reshape(-1, 1)
    if probs.cols != 1 or y.shape[0] != probs.rows or w.shape[0] != probs.rows:
        raise ShapeError(
            f"BCE: probabilities {probs.shape}, {y.shape[0]} targets and "
            f"{w.shape[0]} weights must align."
        )
    n = probs.rows
    if n == 0:
        return _emit(
            tape, np.zeros((1, 1)), (probs,), lambda g: (np.zeros((0, 1)),), "bce"
        )
    p = probs.data
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    value = np.array([[float((w * loss).sum() / n)]])
    inside = (p > eps) & (p < 1.0 - eps)

    def grad_fn(g):
        d = w * (-y / pc + (1.0 - y) / (1.0 - pc)) / n
        return (g[0, 0] * d * inside,)

    return _emit(tape, value, (probs,), grad_fn, "bce")


def count_parameters(params: Iterable[Tensor]) -> int:
    """Total number of scalar entries in a collection of tensors."""
    return int(sum(t.data.size for t in params))
