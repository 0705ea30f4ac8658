import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from model.components import autodiff as ad
from model.components.autodiff import ShapeError, Tape, Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ============================================================
# Dense layers and MLPs
# ============================================================


@dataclass(frozen=True)
class Dense:
    weight: Tensor
    bias: Tensor
    activation: str = "relu"
    slope: float = 0.2

    def __post_init__(self):
        if self.bias.shape != (1, self.weight.cols):
            raise ShapeError(
                f"Bias shape {self.bias.shape} does not match "
                f"weight {self.weight.shape}."
            )
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"Unknown activation '{self.activation}'.")


@dataclass(frozen=True)
class Mlp:
    """A chain of dense layers; consecutive widths must match."""

    layers: tuple[Dense, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("An Mlp needs at least one layer.")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.cols != nxt.weight.rows:
                raise ShapeError(
                    f"Mlp widths do not chain: "
                    f"{prev.weight.shape} -> {nxt.weight.shape}."
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.rows

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.cols

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        for k, layer in enumerate(self.layers):
            params[f"{prefix}.{k}.weight"] = layer.weight
            params[f"{prefix}.{k}.bias"] = layer.bias
        return params

    @classmethod
    def from_parameters(
        cls, prefix: str, params: dict, activations: Sequence[str]
    ) -> "Mlp":
        return cls(
            tuple(
                Dense(params[f"{prefix}.{k}.weight"], params[f"{prefix}.{k}.bias"], act)
                for k, act in enumerate(activations)
            )
        )


def init_mlp(
    rng: np.random.Generator,
    dims: Sequence[int],
    activations: Sequence[str],
    prefix: str = "mlp",
) -> Mlp:
    """
    Build an Mlp with Xavier-uniform weights and zero biases.

    Args:
        rng (np.random.Generator): Source of randomness.
        dims (Sequence[int]): Widths [in, hidden..., out].
        activations (Sequence[str]): One activation per layer.
        prefix (str): Name prefix of the parameter tensors.
    """
    if len(activations) != len(dims) - 1:
        raise ValueError(
            f"{len(dims) - 1} layers need as many activations, got {len(activations)}."
        )
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        layers.append(
            Dense(
                weight=Tensor(
                    xavier_uniform(rng, fan_in, fan_out), name=f"{prefix}.{k}.weight"
                ),
                bias=Tensor(np.zeros((1, fan_out)), name=f"{prefix}.{k}.bias"),
                activation=activations[k],
            )
        )
    return Mlp(tuple(layers))


def mlp_forward(m: Mlp, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if x.cols != m.in_dim:
        raise ShapeError(f"Mlp expects {m.in_dim} input columns, got {x.cols}.")
    for layer in m.layers:
        x = ad.add(ad.matmul(x, layer.weight, tape), layer.bias, tape)
        x = ad.activate(x, layer.activation, layer.slope, tape)
    return x


# ============================================================
# Multi-head attention
# ============================================================


@dataclass(frozen=True)
class MhaParams:
    """
    Per-head query/key/value projections and the output projection.

    Attributes:
        wq, wk, wv (tuple[Tensor, ...]): One (in, d_k) matrix per head.
        wo (Tensor): (heads * d_k, out) output projection.
    """

    wq: tuple[Tensor, ...]
    wk: tuple[Tensor, ...]
    wv: tuple[Tensor, ...]
    wo: Tensor

    def __post_init__(self):
        if not (len(self.wq) == len(self.wk) == len(self.wv) >= 1):
            raise ValueError(
                "MhaParams needs the same positive number of Q, K and V heads."
            )
        widths = {t.cols for t in (*self.wq, *self.wk, *self.wv)}
        if len(widths) != 1:
            raise ShapeError(f"All head projections must share d_k, got {widths}.")
        if self.wo.rows != self.heads * self.d_k:
            raise ShapeError(
                f"W^O expects {self.wo.rows} inputs, "
                f"heads give {self.heads * self.d_k}."
            )

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def d_k(self) -> int:
        return self.wq[0].cols

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        for u in range(self.heads):
            params[f"{prefix}.wq.{u}"] = self.wq[u]
            params[f"{prefix}.wk.{u}"] = self.wk[u]
            params[f"{prefix}.wv.{u}"] = self.wv[u]
        params[f"{prefix}.wo"] = self.wo
        return params

    @classmethod
    def from_parameters(cls, prefix: str, params: dict, heads: int) -> "MhaParams":
        return cls(
            wq=tuple(params[f"{prefix}.wq.{u}"] for u in range(heads)),
            wk=tuple(params[f"{prefix}.wk.{u}"] for u in range(heads)),
            wv=tuple(params[f"{prefix}.wv.{u}"] for u in range(heads)),
            wo=params[f"{prefix}.wo"],
        )


def init_mha(
    rng: np.random.Generator,
    in_dim: int,
    d_k: int,
    heads: int,
    out_dim: int,
    prefix: str = "mha",
) -> MhaParams:
    def proj(kind, u):
        return Tensor(xavier_uniform(rng, in_dim, d_k), name=f"{prefix}.{kind}.{u}")

    return MhaParams(
        wq=tuple(proj("wq", u) for u in range(heads)),
        wk=tuple(proj("wk", u) for u in range(heads)),
        wv=tuple(proj("wv", u) for u in range(heads)),
        wo=Tensor(xavier_uniform(rng, heads * d_k, out_dim), name=f"{prefix}.wo"),
    )


def _check_qkv(p: MhaParams, q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.cols != p.wq[0].rows or k.cols != p.wk[0].rows or v.cols != p.wv[0].rows:
        raise ShapeError(
            f"Attention inputs {q.shape}, {k.shape}, {v.shape} do not match the "
            f"projection inputs {p.wq[0].rows}, {p.wk[0].rows}, {p.wv[0].rows}."
        )
    if k.rows != v.rows:
        raise ShapeError(f"Keys ({k.rows} rows) and values ({v.rows} rows) differ.")


def multihead_attention(
    p: MhaParams, q: Tensor, k: Tensor, v: Tensor, tape: Optional[Tape] = None
) -> Tensor:
    """Concat_u(Softmax((Q W_u^Q)(K W_u^K)^T / sqrt(d_k)) V W_u^V) W^O."""
    _check_qkv(p, q, k, v)
    inv_sqrt = 1.0 / math.sqrt(p.d_k)
    heads = []
    for u in range(p.heads):
        qu = ad.matmul(q, p.wq[u], tape)
        ku = ad.matmul(k, p.wk[u], tape)
        vu = ad.matmul(v, p.wv[u], tape)
        logits = ad.scale(ad.matmul(qu, ad.transpose(ku, tape), tape), inv_sqrt, tape)
        heads.append(ad.matmul(ad.softmax_rows(logits, tape), vu, tape))
    return ad.matmul(ad.concat(heads, axis=1, tape=tape), p.wo, tape)


def attention_pairs(
    query_groups: np.ndarray, key_groups: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    Every (query row, key row) pair that shares a group id.

    Pairs are ordered by query row, then key row.
    """
    query_groups = np.asarray(query_groups, dtype=np.int64)
    key_groups = np.asarray(key_groups, dtype=np.int64)
    keys_by_group: dict[int, np.ndarray] = {}
    for g in np.unique(key_groups):
        keys_by_group[int(g)] = np.flatnonzero(key_groups == g)
    empty = np.zeros(0, dtype=np.int64)
    q_idx, k_idx = [], []
    for row, g in enumerate(query_groups):
        keys = keys_by_group.get(int(g), empty)
        q_idx.append(np.full(keys.size, row, dtype=np.int64))
        k_idx.append(keys)
    if not q_idx:
        return empty, empty
    return np.concatenate(q_idx), np.concatenate(k_idx)


def grouped_multihead_attention(
    p: MhaParams,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    pairs: tuple[np.ndarray, np.ndarray],
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    Multi-head attention restricted to precomputed (query, key) pairs.

    Equivalent to running `multihead_attention` separately on every group
    of rows, but batched over all groups at once. Queries without any key
    produce a zero row before the output projection.
    """
    _check_qkv(p, q, k, v)
    q_idx, k_idx = pairs
    inv_sqrt = 1.0 / math.sqrt(p.d_k)
    heads = []
    for u in range(p.heads):
        qu = ad.gather_rows(ad.matmul(q, p.wq[u], tape), q_idx, tape)
        ku = ad.gather_rows(ad.matmul(k, p.wk[u], tape), k_idx, tape)
        vu = ad.gather_rows(ad.matmul(v, p.wv[u], tape), k_idx, tape)
        logits = ad.scale(ad.sum_cols(ad.mul(qu, ku, tape), tape), inv_sqrt, tape)
        alpha = ad.segment_softmax(logits, q_idx, q.rows, tape)
        heads.append(ad.scatter_add_rows(ad.mul(alpha, vu, tape), q_idx, q.rows, tape))
    return ad.matmul(ad.concat(heads, axis=1, tape=tape), p.wo, tape)
