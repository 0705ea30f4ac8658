from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from config import DEFAULT_MODALITY_DIMS, EDGE_FEATURE_DIM, MODALITY_TAGS
from model.components import autodiff as ad
from model.components.autodiff import Tape, Tensor
from model.components.layers import (
    MhaParams,
    Mlp,
    attention_pairs,
    grouped_multihead_attention,
    init_mha,
    init_mlp,
    mlp_forward,
    xavier_uniform,
)
from tracking.utils.features import (
    modality_matrix,
    node_feature_dim,
    stacked_modality_features,
)
from tracking.utils.graphbuild import FrameKnnGraph, TrackingGraph

ATTENTION_MODES = ("cross_edge", "stacked", "none")
HIDDEN_ACTIVATIONS = ("relu", "sigmoid", "leaky_relu")

# Fixed input scaling of the raw node vector blocks:
# position, size, yaw, velocity, (one-hot untouched), score, window-relative time
_POSITION_SCALE = 50.0
_SIZE_SCALE = 5.0
_VELOCITY_SCALE = 10.0
_TIME_SCALE = 2.0
# Raw edge components [dx, dv, dyaw, ds, dt]
_EDGE_SCALE = np.array([10.0, 5.0, np.pi, 1.0, _TIME_SCALE])


@dataclass(frozen=True)
class ModelHparams:
    """
    Architecture hyperparameters; stored in the weights file header.

    Attributes:
        num_classes (int): Category count C.
        hidden_dim (int): Width D_h of node and edge embeddings.
        mp_steps (int): Number of message passing steps L (0 allowed).
        heads (int): Attention heads per modality.
        head_dim (int): Key width d_k of every head.
        modality_tokens (int): Each modality vector is split into this many
            equal-width tokens that attend to the other endpoint's tokens.
        modality_dims (dict): Embedding width per modality tag.
        modalities (tuple[str, ...]): Enabled modality tags.
        attention_mode (str): "cross_edge", "stacked" (modality vectors
            appended to node features) or "none" (pose and motion only).
        use_frame_gat (bool): Run the frame-wise GAT after every step.
        hidden_activation (str): Activation inside every MLP.
        seed (int): Initialisation seed.
    """

    num_classes: int
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
    gat_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}.")
        if self.hidden_dim < 1 or self.heads < 1 or self.head_dim < 1:
            raise ValueError("hidden_dim, heads and head_dim must be positive.")
        if self.mp_steps < 0:
            raise ValueError(f"mp_steps must be >= 0, got {self.mp_steps}.")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(
                f"Unknown attention_mode '{self.attention_mode}', "
                f"expected one of {ATTENTION_MODES}."
            )
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(
                f"Unknown hidden_activation '{self.hidden_activation}', "
                f"expected one of {HIDDEN_ACTIVATIONS}."
            )
        for tag in self.modalities:
            if tag not in MODALITY_TAGS:
                raise ValueError(f"Unknown modality '{tag}'.")
            dim = self.modality_dims.get(tag)
            if dim is None or dim < 1:
                raise ValueError(f"Modality '{tag}' needs a positive dimension.")
            if dim % self.modality_tokens:
                raise ValueError(
                    f"Modality '{tag}' dimension {dim} is not divisible into "
                    f"{self.modality_tokens} tokens."
                )

    @property
    def node_input_dim(self) -> int:
        extra = 0
        if self.attention_mode == "stacked":
            extra = sum(self.modality_dims[t] for t in self.modalities)
        return node_feature_dim(self.num_classes) + extra

    @property
    def attention_input_dim(self) -> int:
        if self.attention_mode != "cross_edge":
            return EDGE_FEATURE_DIM
        modal = sum(self.modality_dims[t] for t in self.modalities)
        return EDGE_FEATURE_DIM + 2 * modal

    def to_dict(self) -> dict:
        out = asdict(self)
        out["modalities"] = list(self.modalities)
        out["modality_dims"] = {k: int(v) for k, v in self.modality_dims.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelHparams":
        return cls(**data)


def mlp_layouts(h: ModelHparams) -> dict[str, tuple[list[int], list[str]]]:
    """Widths and activations of every MLP in the network, in a fixed order."""
    d, act = h.hidden_dim, h.hidden_activation
    two = [act, act]
    return {
        "node_enc": ([h.node_input_dim, d, d], two),
        "edge_enc": ([EDGE_FEATURE_DIM, d, d], two),
        "att_enc": ([h.attention_input_dim, d, d], two),
        "edge_update": ([4 * d, d, d], two),
        "node_past": ([3 * d, d, d], two),
        "node_fut": ([3 * d, d, d], two),
        "node_combine": ([2 * d, d, d], two),
        "classifier": ([d, d, 1], [act, "identity"]),
    }


@dataclass(frozen=True)
class ModelParams:
    """Hyperparameters plus every trainable tensor, keyed by name."""

    hparams: ModelHparams
    tensors: dict

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def with_tensors(self, tensors: dict[str, Tensor]) -> "ModelParams":
        missing = set(self.tensors) ^ set(tensors)
        if missing:
            raise ValueError(f"Parameter names differ: {sorted(missing)}.")
        for name, t in tensors.items():
            if t.shape != self.tensors[name].shape:
                raise ad.ShapeError(
                    f"Parameter '{name}' has shape {t.shape}, "
                    f"expected {self.tensors[name].shape}."
                )
        return replace(self, tensors=dict(tensors))

    def mlp(self, prefix: str) -> Mlp:
        _, activations = mlp_layouts(self.hparams)[prefix]
        return Mlp.from_parameters(prefix, self.tensors, activations)

    def mha(self, tag: str) -> MhaParams:
        return MhaParams.from_parameters(f"mha.{tag}", self.tensors, self.hparams.heads)


def build_model_params(hparams: ModelHparams) -> ModelParams:
    """Initialise all tensors from the hparams seed in a fixed order."""
    rng = np.random.default_rng(hparams.seed)
    tensors: dict[str, Tensor] = {}
    for prefix, (dims, activations) in mlp_layouts(hparams).items():
        mlp = init_mlp(rng, dims, activations, prefix)
        tensors.update(mlp.named_parameters(prefix))

    if hparams.attention_mode == "cross_edge":
        for tag in hparams.modalities:
            width = hparams.modality_dims[tag] // hparams.modality_tokens
            mha = init_mha(
                rng, width, hparams.head_dim, hparams.heads, width, f"mha.{tag}"
            )
            tensors.update(mha.named_parameters(f"mha.{tag}"))
            tensors[f"absent.{tag}"] = Tensor(
                rng.normal(0.0, 0.1, size=(1, hparams.modality_dims[tag])),
                name=f"absent.{tag}",
            )

    if hparams.use_frame_gat:
        d = hparams.hidden_dim
        tensors["gat.theta"] = Tensor(xavier_uniform(rng, d, d), name="gat.theta")
        tensors["gat.w"] = Tensor(xavier_uniform(rng, d, d), name="gat.w")
        tensors["gat.a"] = Tensor(xavier_uniform(rng, 2 * d, 1), name="gat.a")
    return ModelParams(hparams=hparams, tensors=tensors)


@dataclass(frozen=True)
class MpState:
    """Node and edge embeddings at one message passing step."""

    h_v: Tensor
    h_e: Tensor
    h_v0: Tensor
    h_att: Optional[Tensor] = None


# ============================================================
# Inputs
# ============================================================


def node_inputs(graph: TrackingGraph, hparams: ModelHparams) -> np.ndarray:
    """Scaled node vectors; time is taken relative to the window's first node."""
    x = graph.node_features().copy()
    if len(x):
        c = hparams.num_classes
        x[:, 0:3] /= _POSITION_SCALE
        x[:, 3:6] /= _SIZE_SCALE
        x[:, 6] /= np.pi
        x[:, 7:9] /= _VELOCITY_SCALE
        t_col = 9 + c + 1
        x[:, t_col] = (x[:, t_col] - x[:, t_col].min()) / _TIME_SCALE
    if hparams.attention_mode == "stacked":
        stacked = stacked_modality_features(
            graph.detections, list(hparams.modalities), hparams.modality_dims
        )
        x = np.concatenate([x, stacked], axis=1)
    return x


def edge_inputs(graph: TrackingGraph) -> np.ndarray:
    return graph.edge_features() / _EDGE_SCALE


# ============================================================
# Network stages
# ============================================================


def encode_initial(
    graph: TrackingGraph, params: ModelParams, tape: Optional[Tape] = None
) -> MpState:
    h_v = mlp_forward(
        params.mlp("node_enc"), Tensor(node_inputs(graph, params.hparams)), tape
    )
    h_e = mlp_forward(params.mlp("edge_enc"), Tensor(edge_inputs(graph)), tape)
    return MpState(h_v=h_v, h_e=h_e, h_v0=h_v)


def _modality_input(
    graph: TrackingGraph, params: ModelParams, tag: str, tape: Optional[Tape]
) -> Tensor:
    # Present vectors pass through, absent rows take the learned absent token
    dim = params.hparams.modality_dims[tag]
    vectors, present = modality_matrix(graph.detections, tag, dim)
    token_part = ad.mul(Tensor(1.0 - present), params.tensors[f"absent.{tag}"], tape)
    return ad.add(Tensor(vectors * present), token_part, tape)


def cross_edge_modality_attention(
    graph: TrackingGraph, params: ModelParams, tape: Optional[Tape] = None
) -> Tensor:
    """
    Attention-weighted modality edge feature of every edge.

    For an edge j -> i and each modality, the tokens of i attend to the tokens
    of j and vice versa with the modality's shared multi-head attention. The
    attended features of i (all modalities), then of j, then the raw edge
    feature are concatenated and encoded.
    """
    h = params.hparams
    raw = Tensor(edge_inputs(graph))
    if h.attention_mode != "cross_edge" or not h.modalities:
        return mlp_forward(params.mlp("att_enc"), raw, tape)

    src, dst = graph.edge_endpoints()
    n_edges, n_tok = graph.num_edges, h.modality_tokens
    groups = np.repeat(np.arange(n_edges), n_tok)
    pairs = attention_pairs(groups, groups)

    attended_i, attended_j = [], []
    for tag in h.modalities:
        dim = h.modality_dims[tag]
        width = dim // n_tok
        x = _modality_input(graph, params, tag, tape)
        x_i = ad.reshape(ad.gather_rows(x, dst, tape), n_edges * n_tok, width, tape)
        x_j = ad.reshape(ad.gather_rows(x, src, tape), n_edges * n_tok, width, tape)
        mha = params.mha(tag)
        att_i = grouped_multihead_attention(mha, x_i, x_j, x_j, pairs, tape)
        att_j = grouped_multihead_attention(mha, x_j, x_i, x_i, pairs, tape)
        attended_i.append(ad.reshape(att_i, n_edges, dim, tape))
        attended_j.append(ad.reshape(att_j, n_edges, dim, tape))

    features = ad.concat([*attended_i, *attended_j, raw], axis=1, tape=tape)
    return mlp_forward(params.mlp("att_enc"), features, tape)


def edge_update(
    state: MpState,
    graph: TrackingGraph,
    params: ModelParams,
    tape: Optional[Tape] = None,
) -> MpState:
    """h_ji <- f_e([h_i, h_j, h_ji, h_ji_att]) for every edge."""
    if graph.num_edges == 0:
        return state
    src, dst = graph.edge_endpoints()
    inputs = ad.concat(
        [
            ad.gather_rows(state.h_v, dst, tape),
            ad.gather_rows(state.h_v, src, tape),
            state.h_e,
            state.h_att,
        ],
        axis=1,
        tape=tape,
    )
    return replace(state, h_e=mlp_forward(params.mlp("edge_update"), inputs, tape))


def node_update_time_aware(
    state: MpState,
    graph: TrackingGraph,
    params: ModelParams,
    tape: Optional[Tape] = None,
) -> MpState:
    """
    Update nodes from separately aggregated past and future messages.

    A node receives one message per earlier neighbour (through f_past) and
    one per later neighbour (through f_fut); each side is summed and the two
    sums are combined by f_v. Empty sides contribute zeros.
    """
    n = graph.num_nodes
    src, dst = graph.edge_endpoints()

    past_in = ad.concat(
        [
            ad.gather_rows(state.h_v, src, tape),
            state.h_e,
            ad.gather_rows(state.h_v0, src, tape),
        ],
        axis=1,
        tape=tape,
    )
    fut_in = ad.concat(
        [
            ad.gather_rows(state.h_v, dst, tape),
            state.h_e,
            ad.gather_rows(state.h_v0, dst, tape),
        ],
        axis=1,
        tape=tape,
    )
    past = ad.scatter_add_rows(
        mlp_forward(params.mlp("node_past"), past_in, tape), dst, n, tape
    )
    fut = ad.scatter_add_rows(
        mlp_forward(params.mlp("node_fut"), fut_in, tape), src, n, tape
    )
    combined = ad.concat([past, fut], axis=1, tape=tape)
    return replace(state, h_v=mlp_forward(params.mlp("node_combine"), combined, tape))


def gat_pairs(
    graph: TrackingGraph, frame_knn: FrameKnnGraph
) -> tuple[np.ndarray, np.ndarray]:
    """(source, target) row positions; every node attends to itself and neighbours."""
    pos = graph.node_position
    src, dst = [], []
    for node in graph.nodes:
        j = pos[node.node_id]
        src.append(j)
        dst.append(j)
        for other in frame_knn.neighbors.get(node.node_id, ()):
            if other not in pos:
                raise ValueError(
                    f"Frame neighbour {other} of node {node.node_id} "
                    "is not in the graph."
                )
            src.append(pos[other])
            dst.append(j)
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)


def framewise_gat(
    h_v: Tensor,
    graph: TrackingGraph,
    frame_knn: FrameKnnGraph,
    params: ModelParams,
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    Single-head graph attention over same-frame neighbourhoods.

    Logits LeakyReLU(a^T [W h_i, W h_j]) are softmax-normalised over {j} and
    its neighbours; the output is the weighted sum of Theta h_i.
    """
    n = graph.num_nodes
    if n == 0:
        return h_v
    src, dst = gat_pairs(graph, frame_knn)
    wh = ad.matmul(h_v, params.tensors["gat.w"], tape)
    th = ad.matmul(h_v, params.tensors["gat.theta"], tape)
    pair_feat = ad.concat(
        [ad.gather_rows(wh, src, tape), ad.gather_rows(wh, dst, tape)],
        axis=1,
        tape=tape,
    )
    logits = ad.leaky_relu(
        ad.matmul(pair_feat, params.tensors["gat.a"], tape),
        params.hparams.gat_slope,
        tape,
    )
    alpha = ad.segment_softmax(logits, dst, n, tape)
    messages = ad.mul(alpha, ad.gather_rows(th, src, tape), tape)
    return ad.scatter_add_rows(messages, dst, n, tape)


def classify_edges(
    state: MpState, params: ModelParams, tape: Optional[Tape] = None
) -> Tensor:
    return ad.sigmoid(mlp_forward(params.mlp("classifier"), state.h_e, tape), tape)


def forward(
    graph: TrackingGraph,
    frame_knn: FrameKnnGraph,
    params: ModelParams,
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    Edge scores of one window graph, shape (E, 1).

    The attended modality feature is computed once and fed to every edge
    update; the frame-wise GAT runs after every node update when enabled.
    """
    state = encode_initial(graph, params, tape)
    state = replace(state, h_att=cross_edge_modality_attention(graph, params, tape))
    for _ in range(params.hparams.mp_steps):
        state = edge_update(state, graph, params, tape)
        state = node_update_time_aware(state, graph, params, tape)
        if params.hparams.use_frame_gat:
            state = replace(
                state, h_v=framewise_gat(state.h_v, graph, frame_knn, params, tape)
            )
    return classify_edges(state, params, tape)


def predict_edge_scores(
    graph: TrackingGraph, frame_knn: FrameKnnGraph, params: ModelParams
) -> list[tuple[int, int, float]]:
    """(j, i, score) for every edge of the graph, without recording gradients."""
    scores = forward(graph, frame_knn, params).data[:, 0]
    return [(e.j, e.i, float(s)) for e, s in zip(graph.edges, scores)]
