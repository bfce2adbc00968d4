"""Differentiable primitives over Tensor.

Every public function computes a numpy forward pass, wraps the result in a
Tensor, and registers a vector-Jacobian closure on the active tape. Reduction
primitives that an exhaustive oracle must match bitwise (segment_reduce,
conv2d) accumulate in ascending-index order; everything else only promises
gradients correct to finite-difference tolerance.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .segments import SegmentIndex
from .tensor import ContractError, DimensionError, EmptyGroupError, Tensor, record


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _binary_shapes(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape == y.shape or _is_scalar(x) or _is_scalar(y):
        return
    raise DimensionError(f"{op}: incompatible shapes {x.shape} and {y.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a broadcast gradient back to a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise family


def add(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_shapes(x, y, "add")
    out = Tensor(x.data + y.data)
    return record(
        out, (x, y),
        lambda g: (_reduce_to(g, x.shape), _reduce_to(g, y.shape)),
        "add",
    )


def sub(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_shapes(x, y, "sub")
    out = Tensor(x.data - y.data)
    return record(
        out, (x, y),
        lambda g: (_reduce_to(g, x.shape), _reduce_to(-g, y.shape)),
        "sub",
    )


def mul(x, y) -> Tensor:
    """Hadamard product; one side may be a scalar."""
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_shapes(x, y, "mul")
    out = Tensor(x.data * y.data)
    return record(
        out, (x, y),
        lambda g: (_reduce_to(g * y.data, x.shape), _reduce_to(g * x.data, y.shape)),
        "mul",
    )


def div(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_shapes(x, y, "div")
    out = Tensor(x.data / y.data)
    return record(
        out, (x, y),
        lambda g: (
            _reduce_to(g / y.data, x.shape),
            _reduce_to(-g * x.data / (y.data * y.data), y.shape),
        ),
        "div",
    )


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)
    return record(out, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e)
    return record(out, (x,), lambda g: (g * e,), "exp")


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; sigma(0) = 0.5 exactly."""
    v = x.data
    s = np.empty_like(v)
    pos = v >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    s[~pos] = ev / (1.0 + ev)
    out = Tensor(s)
    return record(out, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0  # subgradient at 0 is 0
    return record(out, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    v = x.data
    out = Tensor(np.where(v > 0, v, slope * v))
    # subgradient at exactly 0 pinned to 0 for a deterministic backward
    dmask = np.where(v > 0, 1.0, np.where(v < 0, slope, 0.0))
    return record(out, (x,), lambda g: (g * dmask,), "leaky_relu")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose2d: need a matrix, got shape {x.shape}")
    out = Tensor(x.data.T.copy())
    return record(out, (x,), lambda g: (g.T,), "transpose2d")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return record(out, tuple(parts), vjp, "concat")


def slice_axis(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    ax = axis if axis >= 0 else x.ndim + axis
    if start < 0 or start + size > x.shape[ax]:
        raise DimensionError(
            f"slice_axis: [{start}:{start + size}) exceeds axis {ax} of shape {x.shape}"
        )
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + size)
    sl = tuple(sl)
    out = Tensor(x.data[sl].copy())

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return record(out, (x,), vjp, "slice_axis")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Inverse of concat: contiguous slices covering the whole axis."""
    ax = axis if axis >= 0 else x.ndim + axis
    if sum(sizes) != x.shape[ax]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover axis {ax} of {x.shape}")
    pieces, start = [], 0
    for s in sizes:
        pieces.append(slice_axis(x, ax, start, s))
        start += s
    return pieces


class ScatterPlan:
    """Precomputed reverse routing for a fixed gather index (duplicates add).

    Worth building once when the same index drives many backward passes, as
    neighborhood structures do.
    """

    def __init__(self, n_rows: int, idx: np.ndarray):
        idx = np.asarray(idx, dtype=np.int64)
        self.n_rows = int(n_rows)
        self.size = idx.size
        self.order = np.argsort(idx, kind="stable")
        sorted_idx = idx[self.order]
        if idx.size:
            self.starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_idx)) + 1])
            self.targets = sorted_idx[self.starts]
        else:
            self.starts = np.zeros(0, dtype=np.int64)
            self.targets = np.zeros(0, dtype=np.int64)

    def apply(self, g: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_rows,) + g.shape[1:], dtype=np.float64)
        if self.size:
            out[self.targets] = np.add.reduceat(g[self.order], self.starts, axis=0)
        return out


def gather_rows(x: Tensor, idx, plan: ScatterPlan | None = None) -> Tensor:
    """Rows of a matrix at integer positions; duplicates allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 1:
        raise DimensionError(f"gather_rows: need (N,C) and (E,), got {x.shape} and {idx.shape}")
    if plan is not None and (plan.n_rows != x.shape[0] or plan.size != idx.size):
        raise ContractError("scatter plan does not match this gather")
    out = Tensor(x.data[idx])

    def vjp(g):
        routing = plan if plan is not None else ScatterPlan(x.shape[0], idx)
        return (routing.apply(g),)

    return record(out, (x,), vjp, "gather_rows")


def gather_elements(x: Tensor, idx) -> Tensor:
    """out[n] = x[n, idx[n]] for a matrix x."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"gather_elements: need (N,K) and (N,), got {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, idx])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return record(out, (x,), vjp, "gather_elements")


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of x by s[i]."""
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise DimensionError(f"scale_rows: need (N,C) and (N,), got {x.shape} and {s.shape}")
    out = Tensor(x.data * s.data[:, None])
    return record(
        out, (x, s),
        lambda g: (g * s.data[:, None], np.sum(g * x.data, axis=1)),
        "scale_rows",
    )


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x[.., K] times w[M, K] transposed -> [.., M]; gradient to both."""
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: x {x.shape} incompatible with w {w.shape}")
    k = w.shape[1]
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    out = Tensor((x2 @ w.data.T).reshape(*lead, w.shape[0]))

    def vjp(g):
        g2 = g.reshape(-1, w.shape[0])
        return (g2 @ w.data).reshape(x.shape), g2.T @ x2

    return record(out, (x, w), vjp, "linear")


def add_row_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_row_bias: need (N,K) and (K,), got {x.shape} and {b.shape}")
    out = Tensor(x.data + b.data[None, :])
    return record(out, (x, b), lambda g: (g, np.sum(g, axis=0)), "add_row_bias")


def gram_batch(x: Tensor) -> Tensor:
    """Per-item X^T X for a stack of matrices x[N, M, D] -> [N, D, D].

    Zero rows contribute nothing, so ragged neighborhoods can be padded with
    an all-zero row without changing the result.
    """
    if x.ndim != 3:
        raise DimensionError(f"gram_batch: need (N,M,D), got {x.shape}")
    xt = x.data.transpose(0, 2, 1)
    out = Tensor(np.matmul(xt, x.data))

    def vjp(g):
        return (np.matmul(x.data, g + g.transpose(0, 2, 1)),)

    return record(out, (x,), vjp, "gram_batch")


def matvec_batch(m: Tensor, v: Tensor) -> Tensor:
    """Per-item matrix-vector product m[N,D,D] @ v[N,D] -> [N,D]."""
    if m.ndim != 3 or v.ndim != 2 or m.shape[0] != v.shape[0] or m.shape[2] != v.shape[1]:
        raise DimensionError(f"matvec_batch: incompatible shapes {m.shape} and {v.shape}")
    out = Tensor(np.matmul(m.data, v.data[..., None])[..., 0])

    def vjp(g):
        gm = g[:, :, None] * v.data[:, None, :]
        gv = np.matmul(m.data.transpose(0, 2, 1), g[..., None])[..., 0]
        return gm, gv

    return record(out, (m, v), vjp, "matvec_batch")


# ---------------------------------------------------------------------------
# row-wise softmax


def softmax_rows(x: Tensor) -> Tensor:
    """Each row mapped to a probability vector, with per-row max subtraction."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows: need (R,C), got {x.shape}")
    shifted = x.data - np.max(x.data, axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        return ((g - np.sum(g * y, axis=1, keepdims=True)) * y,)

    return record(out, (x,), vjp, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"log_softmax_rows: need (R,C), got {x.shape}")
    shifted = x.data - np.max(x.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    out = Tensor(shifted - lse)
    soft = np.exp(shifted - lse)

    def vjp(g):
        return (g - soft * np.sum(g, axis=1, keepdims=True),)

    return record(out, (x,), vjp, "log_softmax_rows")


# ---------------------------------------------------------------------------
# segment reductions


def segment_reduce(x: Tensor, seg: SegmentIndex, mode: str) -> Tensor:
    """Per-group, per-channel reduction of matrix rows.

    Sums (and means) accumulate members in ascending-index order so the
    result is bitwise comparable with a sequential loop oracle. Max/min ties
    route gradient to the lowest attaining index.
    """
    if x.ndim != 2:
        raise DimensionError(f"segment_reduce: need (N,C), got {x.shape}")
    if seg.n_elements != x.shape[0]:
        raise DimensionError(
            f"segment_reduce: index built for {seg.n_elements} rows, tensor has {x.shape[0]}"
        )
    if mode not in ("mean", "max", "min", "sum"):
        raise ContractError(f"segment_reduce: unknown mode {mode!r}")
    if np.any(seg.lengths == 0):
        empty = int(np.argmin(seg.lengths))
        raise EmptyGroupError(f"segment_reduce: group {empty} is empty")

    n_groups, c = seg.n_groups, x.shape[1]
    if mode in ("sum", "mean"):
        acc = _rounds_sum(x.data, seg)
        if mode == "mean":
            out_data = acc / seg.lengths[:, None]
        else:
            out_data = acc
        out = Tensor(out_data)

        def vjp(g):
            per_group = g / seg.lengths[:, None] if mode == "mean" else g
            gx = np.zeros_like(x.data)
            gx[seg.flat] = np.repeat(per_group, seg.lengths, axis=0)
            return (gx,)

        return record(out, (x,), vjp, f"segment_{mode}")

    # max / min: remember which row wins per channel (first by index on ties)
    out_data = np.empty((n_groups, c), dtype=np.float64)
    winner = np.empty((n_groups, c), dtype=np.int64)
    for gi in range(n_groups):
        rows = seg.group(gi)
        sub = x.data[rows]
        local = np.argmax(sub, axis=0) if mode == "max" else np.argmin(sub, axis=0)
        out_data[gi] = sub[local, np.arange(c)]
        winner[gi] = rows[local]
    out = Tensor(out_data)
    cols = np.arange(c)[None, :]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[winner, cols] = g  # (row, col) pairs unique because groups are disjoint
        return (gx,)

    return record(out, (x,), vjp, f"segment_{mode}")


def _rounds_sum(vals: np.ndarray, seg: SegmentIndex) -> np.ndarray:
    """Sequential ascending-index group sums, vectorized round by round.

    Round r adds every group's r-th member at once; per group the additions
    happen in member order, matching a plain left-to-right loop bitwise.
    The per-round index arrays are cached on the SegmentIndex.
    """
    plan = getattr(seg, "_rounds_plan", None)
    if plan is None:
        plan = []
        order = np.argsort(-seg.lengths, kind="stable")
        sorted_lengths = seg.lengths[order]
        for r in range(int(seg.lengths.max())):
            n_active = int(np.searchsorted(-sorted_lengths, -r, side="left"))
            active = order[:n_active]
            plan.append((active, seg.flat[seg.starts[active] + r]))
        seg._rounds_plan = plan
    acc = np.zeros((seg.n_groups, vals.shape[1]), dtype=np.float64)
    for active, rows in plan:
        acc[active] += vals[rows]
    return acc


# ---------------------------------------------------------------------------
# convolution and spatial ops


def _conv_geometry(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)  # ceil
    if k == 1:
        return out, 0, 0
    pad_total = max((out - 1) * stride + k - size, 0)
    lo = pad_total // 2
    return out, lo, pad_total - lo


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation of x[C_in,H,W] with k[C_out,C_in,kh,kw].

    3x3 kernels get same-padding (extra pixel on the bottom/right for even
    sizes), 1x1 kernels none; output is ceil(H/stride) either way. The sum
    over (c_in, ky, kx) runs in ascending order so a quadruple-loop oracle
    matches bitwise.
    """
    if x.ndim != 3 or k.ndim != 4:
        raise DimensionError(f"conv2d: need (C,H,W) and (O,C,kh,kw), got {x.shape} and {k.shape}")
    c_out, c_in, kh, kw = k.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d: input channels {x.shape[0]} != kernel channels {c_in}")
    if kh != kw or kh not in (1, 3):
        raise DimensionError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    _, h, w = x.shape
    h_out, pad_top, pad_bot = _conv_geometry(h, kh, stride)
    w_out, pad_left, pad_right = _conv_geometry(w, kw, stride)
    xp = np.pad(x.data, ((0, 0), (pad_top, pad_bot), (pad_left, pad_right)))

    def window(ky, kx):
        return xp[
            :,
            ky : ky + (h_out - 1) * stride + 1 : stride,
            kx : kx + (w_out - 1) * stride + 1 : stride,
        ]

    out_data = np.zeros((c_out, h_out, w_out), dtype=np.float64)
    term = np.empty_like(out_data)
    for ci in range(c_in):
        for ky in range(kh):
            for kx in range(kw):
                np.multiply.outer(k.data[:, ci, ky, kx], window(ky, kx)[ci], out=term)
                out_data += term
    out = Tensor(out_data)

    def vjp(g):
        gk = np.zeros_like(k.data)
        gxp = np.zeros_like(xp)
        for ky in range(kh):
            for kx in range(kw):
                patch = window(ky, kx)  # (C_in, H', W')
                gk[:, :, ky, kx] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
                gxp[
                    :,
                    ky : ky + (h_out - 1) * stride + 1 : stride,
                    kx : kx + (w_out - 1) * stride + 1 : stride,
                ] += np.tensordot(k.data[:, :, ky, kx], g, axes=(0, 0))
        gx = gxp[:, pad_top : pad_top + h, pad_left : pad_left + w]
        return gx, gk

    return record(out, (x, k), vjp, "conv2d")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 3 or b.shape != (x.shape[0],):
        raise DimensionError(f"add_channel_bias: need (C,H,W) and (C,), got {x.shape} and {b.shape}")
    out = Tensor(x.data + b.data[:, None, None])
    return record(out, (x, b), lambda g: (g, np.sum(g, axis=(1, 2))), "add_channel_bias")


def upsample2_nearest(x: Tensor) -> Tensor:
    """Each value replicated into a 2x2 block: [C,H,W] -> [C,2H,2W]."""
    if x.ndim != 3:
        raise DimensionError(f"upsample2_nearest: need (C,H,W), got {x.shape}")
    out = Tensor(x.data.repeat(2, axis=1).repeat(2, axis=2))

    def vjp(g):
        return (g[:, 0::2, 0::2] + g[:, 0::2, 1::2] + g[:, 1::2, 0::2] + g[:, 1::2, 1::2],)

    return record(out, (x,), vjp, "upsample2_nearest")


# ---------------------------------------------------------------------------
# full reductions


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(np.float64(np.sum(x.data)))
    return record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "reduce_sum")


def reduce_mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.float64(np.sum(x.data) / n))
    return record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "reduce_mean")


# operator sugar for readable call sites
Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__neg__ = lambda self: neg(self)
