import numpy as np
import pytest

from graphfpn import gnn, numerics as nm
from graphfpn.gnn import (
    AttentionFlags,
    EdgeContext,
    GnnLayerParams,
    LayerSchedule,
    channel_self_attention,
    channel_wise_attention,
    gnn_layer,
    run_graphfpn,
    spatial_attention,
)
from graphfpn.numerics import Tape, Tensor


def identity_params(d):
    p = GnnLayerParams.init(d, np.random.default_rng(0))
    p.w = Tensor(np.eye(d), requires_grad=True)
    p.a = Tensor(np.zeros(2 * d), requires_grad=True)
    return p


def random_graph_ctx(rng, n_nodes, n_edges):
    pairs = set()
    while len(pairs) < n_edges:
        u, v = rng.integers(0, n_nodes, size=2)
        if u != v:
            pairs.add((min(u, v), max(u, v)))
    return EdgeContext(np.array(sorted(pairs)), n_nodes)


# ---------------------------------------------------------------------------
# spatial attention


def test_isolated_node_projects_only():
    d = 3
    ctx = EdgeContext(np.empty((0, 2), dtype=np.int64), 1)
    p = GnnLayerParams.init(d, np.random.default_rng(1))
    h = Tensor(np.random.default_rng(2).normal(size=(1, d)))
    out = spatial_attention(h, ctx, p)
    assert np.allclose(out.data, h.data @ p.w.data.T)


def test_uniform_attention_averages_pair():
    d = 2
    ctx = EdgeContext(np.array([[0, 1]]), 2)
    p = identity_params(d)
    h = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]))
    out = spatial_attention(h, ctx, p)
    assert np.allclose(out.data[0], (h.data[0] + h.data[1]) / 2)
    assert np.allclose(out.data[1], (h.data[0] + h.data[1]) / 2)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(3)
    ctx = random_graph_ctx(rng, 12, 20)
    p = GnnLayerParams.init(5, rng)
    h = Tensor(rng.normal(size=(12, 5)))
    alpha = gnn.attention_weights(h, ctx, p)
    sums = np.zeros(12)
    np.add.at(sums, ctx.dst, alpha)
    assert np.all(np.abs(sums - 1.0) <= 1e-12)


def test_spatial_attention_gradients():
    rng = np.random.default_rng(4)
    ctx = random_graph_ctx(rng, 6, 8)
    p = GnnLayerParams.init(4, rng)
    h = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    err = nm.grad_check(
        lambda: nm.reduce_sum(spatial_attention(h, ctx, p)), [h, p.w, p.a]
    )
    assert err < 1e-6


# ---------------------------------------------------------------------------
# channel-wise attention


def test_zero_gate_halves_features():
    d = 4
    rng = np.random.default_rng(5)
    ctx = random_graph_ctx(rng, 5, 6)
    p = GnnLayerParams.init(d, rng)
    p.w1 = Tensor(np.zeros((d, d)), requires_grad=True)
    h = Tensor(rng.normal(size=(5, d)))
    out = channel_wise_attention(h, ctx, p)
    assert np.array_equal(out.data, 0.5 * h.data)


def test_isolated_node_mean_is_itself():
    d = 3
    ctx = EdgeContext(np.empty((0, 2), dtype=np.int64), 2)
    rng = np.random.default_rng(6)
    h = Tensor(rng.normal(size=(2, d)))
    avg = nm.segment_reduce(nm.gather_rows(h, ctx.src), ctx.seg, "mean")
    assert np.array_equal(avg.data, h.data)


def test_gate_shrinks_every_channel():
    rng = np.random.default_rng(7)
    d = 6
    ctx = random_graph_ctx(rng, 40, 80)
    p = GnnLayerParams.init(d, rng)
    for _ in range(25):  # 25 graphs x 40 nodes = 1000 random nodes
        h = Tensor(rng.normal(size=(40, d)))
        out = channel_wise_attention(h, ctx, p)
        assert np.all(np.abs(out.data) <= np.abs(h.data))


def test_channel_wise_gradients():
    rng = np.random.default_rng(8)
    ctx = random_graph_ctx(rng, 6, 8)
    p = GnnLayerParams.init(4, rng)
    h = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    err = nm.grad_check(lambda: nm.reduce_sum(channel_wise_attention(h, ctx, p)), [h, p.w1])
    assert err < 1e-7


# ---------------------------------------------------------------------------
# channel self-attention


def test_beta_zero_is_exact_identity():
    rng = np.random.default_rng(9)
    ctx = random_graph_ctx(rng, 8, 12)
    p = GnnLayerParams.init(5, rng)
    h = Tensor(rng.normal(size=(8, 5)))
    out = channel_self_attention(h, ctx, p)
    assert np.array_equal(out.data, h.data)


def test_beta_zero_still_learns():
    # gradient must flow to beta even though it starts at 0
    rng = np.random.default_rng(10)
    ctx = random_graph_ctx(rng, 5, 6)
    p = GnnLayerParams.init(3, rng)
    h = Tensor(rng.normal(size=(5, 3)))
    with Tape() as tape:
        loss = nm.reduce_sum(channel_self_attention(h, ctx, p))
    tape.backward(loss)
    assert p.beta.grad is not None and abs(float(p.beta.grad)) > 0


def test_uniform_vector_scales_by_one_plus_beta():
    d = 4
    rng = np.random.default_rng(11)
    ctx = random_graph_ctx(rng, 3, 2)
    p = GnnLayerParams.init(d, rng)
    p.beta = Tensor.scalar(0.7, requires_grad=True)
    h = Tensor(np.full((3, d), 1.3))
    out = channel_self_attention(h, ctx, p)
    assert np.allclose(out.data, (1 + 0.7) * h.data, atol=1e-12)


def test_mixing_matrix_of_identity_stack():
    # node 0 with one neighbor, features forming I2: X = softmax_rows(I2)
    ctx = EdgeContext(np.array([[0, 1]]), 2)
    h = Tensor(np.eye(2))
    x = gnn.channel_mixing_matrices(h, ctx)
    expected_row = np.array([np.e / (np.e + 1.0), 1.0 / (np.e + 1.0)])
    assert np.allclose(x[0][0], expected_row, atol=1e-7)
    assert np.allclose(x[0][1], expected_row[::-1], atol=1e-7)


def test_mixing_matrices_row_stochastic():
    rng = np.random.default_rng(12)
    ctx = random_graph_ctx(rng, 10, 18)
    h = Tensor(rng.normal(size=(10, 6)))
    x = gnn.channel_mixing_matrices(h, ctx)
    assert np.all(np.abs(x.sum(axis=2) - 1.0) <= 1e-12)


def test_channel_self_gradients():
    rng = np.random.default_rng(13)
    ctx = random_graph_ctx(rng, 5, 7)
    p = GnnLayerParams.init(3, rng)
    p.beta = Tensor.scalar(0.4, requires_grad=True)
    h = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    err = nm.grad_check(lambda: nm.reduce_sum(channel_self_attention(h, ctx, p)), [h, p.beta])
    assert err < 1e-6


# ---------------------------------------------------------------------------
# composed layer and schedule


def test_empty_schedule_is_identity():
    rng = np.random.default_rng(14)
    ctx = random_graph_ctx(rng, 6, 8)
    h = Tensor(rng.normal(size=(6, 4)))
    out = run_graphfpn(h, LayerSchedule(0, 0, 0, 4), [], ctx, ctx)
    assert out is h


def test_all_attentions_disabled_is_identity():
    rng = np.random.default_rng(15)
    ctx = random_graph_ctx(rng, 6, 8)
    params = [GnnLayerParams.init(4, rng) for _ in range(3)]
    h = Tensor(rng.normal(size=(6, 4)))
    flags = AttentionFlags(spatial=False, channel_wise=False, channel_self=False)
    out = run_graphfpn(h, LayerSchedule(1, 1, 1, 4), params, ctx, ctx, flags)
    assert out is h


def test_layer_approximates_neighborhood_mean():
    # W=I, a=0, beta=0, W1 large => gate ~ 1, layer ~ neighborhood mean
    d = 3
    rng = np.random.default_rng(16)
    ctx = random_graph_ctx(rng, 7, 9)
    p = identity_params(d)
    p.w1 = Tensor(50.0 * np.eye(d), requires_grad=True)
    h_data = rng.uniform(1.0, 2.0, size=(7, d))  # positive keeps the gate saturated
    out = gnn_layer(Tensor(h_data), ctx, p)
    expected = np.zeros_like(h_data)
    for node in range(7):
        run = ctx.seg.group(node)
        members = ctx.src[run]
        expected[node] = h_data[sorted(members)].mean(axis=0)
    assert np.allclose(out.data, expected, atol=1e-9)


def test_default_schedule_has_nine_layers():
    sched = LayerSchedule.uniform(3, 8)
    assert sched.total_layers == 9
    assert (sched.contextual_pre, sched.hierarchical, sched.contextual_post) == (3, 3, 3)


def test_parameter_count_mismatch_rejected():
    rng = np.random.default_rng(17)
    ctx = random_graph_ctx(rng, 4, 3)
    h = Tensor(rng.normal(size=(4, 2)))
    with pytest.raises(nm.ContractError):
        run_graphfpn(h, LayerSchedule(1, 1, 1, 2), [], ctx, ctx)


def test_perturbing_later_layer_leaves_earlier_outputs_unchanged():
    rng = np.random.default_rng(18)
    d = 4
    ctx = random_graph_ctx(rng, 6, 8)
    params = [GnnLayerParams.init(d, rng) for _ in range(3)]
    h = Tensor(rng.normal(size=(6, d)))
    sched = LayerSchedule(1, 1, 1, d)

    before: list[Tensor] = []
    run_graphfpn(h, sched, params, ctx, ctx, collect=before)
    params[2].w.data[0, 0] += 1.0  # poke the last layer only
    after: list[Tensor] = []
    run_graphfpn(h, sched, params, ctx, ctx, collect=after)

    assert np.array_equal(before[0].data, after[0].data)
    assert np.array_equal(before[1].data, after[1].data)
    assert not np.array_equal(before[2].data, after[2].data)


def test_each_layer_owns_parameters():
    rng = np.random.default_rng(19)
    params = [GnnLayerParams.init(4, rng) for _ in range(9)]
    ids = {id(t) for p in params for t in p.tensors()}
    assert len(ids) == 9 * 4


def test_full_network_gradcheck_micro_graph():
    rng = np.random.default_rng(0)  # seed-0 micro-graph, 6 nodes, D=8
    d = 8
    ctx_c = random_graph_ctx(rng, 6, 7)
    ctx_h = random_graph_ctx(rng, 6, 5)
    params = [GnnLayerParams.init(d, rng) for _ in range(3)]
    h = Tensor(rng.normal(size=(6, d)), requires_grad=True)
    sched = LayerSchedule(1, 1, 1, d)
    weights = Tensor(rng.normal(size=(6, d)))

    def f():
        out = run_graphfpn(h, sched, params, ctx_c, ctx_h)
        return nm.reduce_sum(nm.mul(out, weights))

    tensors = [h] + [t for p in params for t in p.tensors()]
    assert nm.grad_check(f, tensors, max_coords=12) < 1e-4
