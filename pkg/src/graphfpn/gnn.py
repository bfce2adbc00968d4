"""Contextual and hierarchical GNN layers: spatial self-attention plus two
local channel attention mechanisms, composed into the L1/L2/L3 schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .graphpyramid import GraphPyramid
from .numerics import ContractError, SegmentIndex, Tensor


@dataclass(frozen=True)
class LayerSchedule:
    """Layer counts for the three groups and the node feature width.

    The three groups normally share one count (set via `uniform`); ablations
    that drop a whole group express it as a zero count.
    """

    contextual_pre: int
    hierarchical: int
    contextual_post: int
    dim: int

    def __post_init__(self):
        if min(self.contextual_pre, self.hierarchical, self.contextual_post) < 0:
            raise ContractError("layer counts must be non-negative")
        if self.dim < 1:
            raise ContractError("feature dimension must be positive")

    @staticmethod
    def uniform(layers_per_group: int, dim: int) -> "LayerSchedule":
        return LayerSchedule(layers_per_group, layers_per_group, layers_per_group, dim)

    @property
    def total_layers(self) -> int:
        return self.contextual_pre + self.hierarchical + self.contextual_post


@dataclass(frozen=True)
class AttentionFlags:
    """Per-mechanism toggles; a disabled mechanism is an identity pass-through."""

    spatial: bool = True
    channel_wise: bool = True
    channel_self: bool = True


@dataclass
class GnnLayerParams:
    """One layer's own parameters: projection W, attention vector a, channel
    gate W1, and the residual mixing weight beta (starts at exactly 0).

    No sharing: every layer in the schedule owns an independent instance.
    """

    w: Tensor  # (D, D)
    a: Tensor  # (2D,)
    w1: Tensor  # (D, D)
    beta: Tensor  # scalar

    @staticmethod
    def init(dim: int, rng: np.random.Generator) -> "GnnLayerParams":
        return GnnLayerParams(
            w=Tensor(nm.xavier_uniform(rng, (dim, dim), dim, dim), requires_grad=True),
            a=Tensor(nm.xavier_uniform(rng, (2 * dim,), 2 * dim, 1), requires_grad=True),
            w1=Tensor(nm.xavier_uniform(rng, (dim, dim), dim, dim), requires_grad=True),
            beta=Tensor.scalar(0.0, requires_grad=True),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w, self.a, self.w1, self.beta]


class EdgeContext:
    """Preprocessed neighborhoods (self-loop included) for one edge set.

    Directed slots sorted by (destination, source) give each node a
    contiguous run of incoming edges; nbr_pad squares the ragged
    neighborhoods with an extra all-zero feature row for the batched
    channel-similarity step.
    """

    def __init__(self, undirected: np.ndarray, n_nodes: int):
        pairs = [(int(i), int(i)) for i in range(n_nodes)]
        for u, v in np.asarray(undirected, dtype=np.int64).reshape(-1, 2):
            pairs.append((int(u), int(v)))
            pairs.append((int(v), int(u)))
        pairs.sort(key=lambda p: (p[1], p[0]))  # by (dst, src)
        self.n_nodes = n_nodes
        self.src = np.array([p[0] for p in pairs], dtype=np.int64)
        self.dst = np.array([p[1] for p in pairs], dtype=np.int64)
        self.seg = SegmentIndex.from_sorted_runs(self.dst, n_nodes)
        lengths = self.seg.lengths
        m_max = int(lengths.max())
        pad = np.full((n_nodes, m_max), n_nodes, dtype=np.int64)  # zero-row sentinel
        for node in range(n_nodes):
            run = self.seg.group(node)
            pad[node, : len(run)] = self.src[run]
        self.nbr_pad_flat = pad.reshape(-1)
        self.m_max = m_max
        # reverse-routing tables reused by every layer's backward pass
        self.src_plan = nm.ScatterPlan(n_nodes, self.src)
        self.dst_plan = nm.ScatterPlan(n_nodes, self.dst)
        self.nbr_plan = nm.ScatterPlan(n_nodes + 1, self.nbr_pad_flat)

    @property
    def n_slots(self) -> int:
        return len(self.src)


def spatial_attention(h: Tensor, ctx: EdgeContext, params: GnnLayerParams) -> Tensor:
    """Single-head neighbor attention: softmax over LeakyReLU(a.[Wh_i || Wh_j]).

    The output nonlinearity is the identity; the composed layer gets its
    nonlinearities from the channel attention stages.
    """
    d = h.shape[1]
    hw = nm.linear(h, params.w)
    a_dst = nm.reshape(nm.slice_axis(params.a, 0, 0, d), (1, d))
    a_src = nm.reshape(nm.slice_axis(params.a, 0, d, d), (1, d))
    score_dst = nm.linear(hw, a_dst)  # (N, 1)
    score_src = nm.linear(hw, a_src)
    logits = nm.leaky_relu(
        nm.add(
            nm.gather_rows(score_dst, ctx.dst, ctx.dst_plan),
            nm.gather_rows(score_src, ctx.src, ctx.src_plan),
        ),
        slope=0.2,
    )
    peak = nm.segment_reduce(logits, ctx.seg, "max")
    weight = nm.exp(nm.sub(logits, nm.gather_rows(peak, ctx.dst, ctx.dst_plan)))
    total = nm.segment_reduce(weight, ctx.seg, "sum")
    alpha = nm.div(weight, nm.gather_rows(total, ctx.dst, ctx.dst_plan))
    messages = nm.scale_rows(
        nm.gather_rows(hw, ctx.src, ctx.src_plan), nm.reshape(alpha, (ctx.n_slots,))
    )
    return nm.segment_reduce(messages, ctx.seg, "sum")


def attention_weights(h: Tensor, ctx: EdgeContext, params: GnnLayerParams) -> np.ndarray:
    """The alpha of spatial_attention per directed slot (diagnostics only)."""
    d = h.shape[1]
    hw = nm.linear(h, params.w)
    a_dst = nm.reshape(nm.slice_axis(params.a, 0, 0, d), (1, d))
    a_src = nm.reshape(nm.slice_axis(params.a, 0, d, d), (1, d))
    logits = nm.leaky_relu(
        nm.add(
            nm.gather_rows(nm.linear(hw, a_dst), ctx.dst),
            nm.gather_rows(nm.linear(hw, a_src), ctx.src),
        ),
        slope=0.2,
    )
    peak = nm.segment_reduce(logits, ctx.seg, "max")
    weight = nm.exp(nm.sub(logits, nm.gather_rows(peak, ctx.dst, ctx.dst_plan)))
    total = nm.segment_reduce(weight, ctx.seg, "sum")
    return (weight.data / total.data[ctx.dst]).reshape(-1)


def channel_wise_attention(h: Tensor, ctx: EdgeContext, params: GnnLayerParams) -> Tensor:
    """Sigmoid gate from the neighborhood-mean feature, applied channel-wise."""
    avg = nm.segment_reduce(nm.gather_rows(h, ctx.src, ctx.src_plan), ctx.seg, "mean")
    gate = nm.sigmoid(nm.linear(avg, params.w1))
    return nm.mul(gate, h)


def channel_self_attention(h: Tensor, ctx: EdgeContext, params: GnnLayerParams) -> Tensor:
    """Row-stochastic channel-similarity mixing with a beta-scaled residual.

    Stacks each neighborhood's features (zero-padded; zero rows do not alter
    the gram matrix), row-softmaxes A^T A, and adds beta * X h back onto h.
    With beta = 0 the output equals the input exactly.
    """
    n, d = h.shape
    aug = nm.concat([h, Tensor.zeros((1, d))], axis=0)
    stacked = nm.reshape(nm.gather_rows(aug, ctx.nbr_pad_flat, ctx.nbr_plan), (n, ctx.m_max, d))
    gram = nm.gram_batch(stacked)
    mixing = nm.reshape(nm.softmax_rows(nm.reshape(gram, (n * d, d))), (n, d, d))
    mixed = nm.matvec_batch(mixing, h)
    return nm.add(nm.mul(params.beta, mixed), h)


def channel_mixing_matrices(h: Tensor, ctx: EdgeContext) -> np.ndarray:
    """The row-stochastic X per node (diagnostics only)."""
    n, d = h.shape
    aug = np.concatenate([h.data, np.zeros((1, d))], axis=0)
    stacked = aug[ctx.nbr_pad_flat].reshape(n, ctx.m_max, d)
    gram = np.matmul(stacked.transpose(0, 2, 1), stacked)
    flat = gram.reshape(n * d, d)
    shifted = np.exp(flat - flat.max(axis=1, keepdims=True))
    return (shifted / shifted.sum(axis=1, keepdims=True)).reshape(n, d, d)


def gnn_layer(
    h: Tensor,
    ctx: EdgeContext,
    params: GnnLayerParams,
    flags: AttentionFlags = AttentionFlags(),
) -> Tensor:
    out = h
    if flags.spatial:
        out = spatial_attention(out, ctx, params)
    if flags.channel_wise:
        out = channel_wise_attention(out, ctx, params)
    if flags.channel_self:
        out = channel_self_attention(out, ctx, params)
    return out


def build_contexts(g: GraphPyramid) -> tuple[EdgeContext, EdgeContext]:
    """Edge contexts for contextual layers and (pruned) hierarchical layers."""
    return (
        EdgeContext(g.contextual_edges, g.n_nodes),
        EdgeContext(g.surviving_hierarchical(), g.n_nodes),
    )


def run_graphfpn(
    h0: Tensor,
    schedule: LayerSchedule,
    params: list[GnnLayerParams],
    ctx_contextual: EdgeContext,
    ctx_hierarchical: EdgeContext,
    flags: AttentionFlags = AttentionFlags(),
    collect: list[Tensor] | None = None,
) -> Tensor:
    """L1 contextual layers, then L2 hierarchical, then L3 contextual.

    Each layer consumes its own parameter set from `params` in order.
    `collect`, when given, receives the output of every layer.
    """
    if len(params) != schedule.total_layers:
        raise ContractError(
            f"schedule needs {schedule.total_layers} parameter sets, got {len(params)}"
        )
    if h0.ndim != 2 or h0.shape[1] != schedule.dim:
        raise ContractError(f"node features must be (N, {schedule.dim}), got {h0.shape}")
    phases = (
        (schedule.contextual_pre, ctx_contextual),
        (schedule.hierarchical, ctx_hierarchical),
        (schedule.contextual_post, ctx_contextual),
    )
    h = h0
    cursor = 0
    for count, ctx in phases:
        for _ in range(count):
            h = gnn_layer(h, ctx, params[cursor], flags)
            cursor += 1
            if collect is not None:
                collect.append(h)
    return h
