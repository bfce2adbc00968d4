"""Gradient verification batteries behind `graphfpn gradcheck` and the
acceptance suite: central finite differences against the tape, at micro scale."""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .gnn import (
    EdgeContext,
    GnnLayerParams,
    LayerSchedule,
    channel_self_attention,
    channel_wise_attention,
    gnn_layer,
    run_graphfpn,
    spatial_attention,
)
from .graphpyramid import prune_hierarchical
from .numerics import SegmentIndex, Tensor, grad_check
from .pipeline import Model, TrainConfig, classification_loss, forward_pipeline, prepare_sample
from .synthetic import gen_dataset

TOLERANCE = 1e-4


def _probe(rng, shape, shift=0.0):
    return Tensor(rng.normal(size=shape) + shift, requires_grad=True)


def primitive_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    """One finite-difference check per differentiable primitive."""
    checks: list[tuple[str, float]] = []

    def run(name, f, params):
        checks.append((name, grad_check(f, params)))

    x = _probe(rng, (4, 3))
    y = _probe(rng, (4, 3))
    s = Tensor.scalar(0.7, requires_grad=True)
    run("add", lambda: nm.reduce_sum(nm.add(x, y)), [x, y])
    run("sub", lambda: nm.reduce_sum(nm.sub(x, y)), [x, y])
    run("mul", lambda: nm.reduce_sum(nm.mul(x, y)), [x, y])
    run("mul_scalar", lambda: nm.reduce_sum(nm.mul(s, x)), [x, s])
    run("div", lambda: nm.reduce_sum(nm.div(x, nm.add(nm.mul(y, y), Tensor.scalar(1.0)))), [x, y])
    run("neg", lambda: nm.reduce_sum(nm.neg(x)), [x])
    run("exp", lambda: nm.reduce_sum(nm.exp(x)), [x])
    run("sigmoid", lambda: nm.reduce_sum(nm.sigmoid(x)), [x])

    off_kink = _probe(rng, (4, 3), shift=0.5)
    run("relu", lambda: nm.reduce_sum(nm.relu(off_kink)), [off_kink])
    run("leaky_relu", lambda: nm.reduce_sum(nm.leaky_relu(off_kink)), [off_kink])

    w = _probe(rng, (5, 3))
    run("linear", lambda: nm.reduce_sum(nm.linear(x, w)), [x, w])
    bias = _probe(rng, (5,))
    run(
        "add_row_bias",
        lambda: nm.reduce_sum(nm.add_row_bias(nm.linear(x, w), bias)),
        [bias, w],
    )

    sm = _probe(rng, (3, 6))
    probe = Tensor(rng.normal(size=(3, 6)))
    run("softmax_rows", lambda: nm.reduce_sum(nm.mul(nm.softmax_rows(sm), probe)), [sm])
    labels = np.array([1, 4, 0])
    run(
        "log_softmax_rows",
        lambda: nm.neg(nm.reduce_mean(nm.gather_elements(nm.log_softmax_rows(sm), labels))),
        [sm],
    )
    run(
        "concat_split",
        lambda: nm.reduce_sum(nm.split(nm.concat([x, y], axis=-1), [3, 3], axis=-1)[0]),
        [x, y],
    )
    run("reshape_transpose", lambda: nm.reduce_sum(nm.transpose2d(nm.reshape(x, (3, 4)))), [x])

    seg = SegmentIndex([[0, 2, 5], [1, 3], [4, 6, 7]], 8)
    sx = _probe(rng, (8, 3))
    sprobe = Tensor(rng.normal(size=(3, 3)))
    for mode in ("mean", "max", "min", "sum"):
        run(
            f"segment_{mode}",
            lambda m=mode: nm.reduce_sum(nm.mul(nm.segment_reduce(sx, seg, m), sprobe)),
            [sx],
        )

    idx = np.array([0, 3, 3, 1, 2, 0])
    scale = _probe(rng, (6,))
    run(
        "gather_scale_rows",
        lambda: nm.reduce_sum(nm.scale_rows(nm.gather_rows(x, idx), scale)),
        [x, scale],
    )
    run("gather_elements", lambda: nm.reduce_sum(nm.gather_elements(sm, labels)), [sm])

    g3 = _probe(rng, (2, 4, 3))
    v2 = _probe(rng, (2, 3))
    run("gram_batch", lambda: nm.reduce_sum(nm.gram_batch(g3)), [g3])
    run(
        "matvec_batch",
        lambda: nm.reduce_sum(nm.matvec_batch(nm.gram_batch(g3), v2)),
        [g3, v2],
    )

    img = _probe(rng, (2, 6, 6))
    k1 = _probe(rng, (3, 2, 1, 1))
    k3 = _probe(rng, (3, 2, 3, 3))
    cb = _probe(rng, (3,))
    run("conv2d_1x1", lambda: nm.reduce_sum(nm.conv2d(img, k1)), [img, k1])
    run("conv2d_3x3", lambda: nm.reduce_sum(nm.conv2d(img, k3)), [img, k3])
    run("conv2d_stride2", lambda: nm.reduce_sum(nm.conv2d(img, k3, stride=2)), [img, k3])
    run(
        "add_channel_bias",
        lambda: nm.reduce_sum(nm.add_channel_bias(nm.conv2d(img, k3), cb)),
        [cb, k3],
    )
    up_probe = Tensor(rng.normal(size=(2, 12, 12)))
    run(
        "upsample2_nearest",
        lambda: nm.reduce_sum(nm.mul(nm.upsample2_nearest(img), up_probe)),
        [img],
    )
    run("reduce_mean", lambda: nm.reduce_mean(nm.mul(x, x)), [x])
    return checks


def _micro_graph(rng, n_nodes=6, n_edges=7):
    pairs = set()
    while len(pairs) < n_edges:
        u, v = rng.integers(0, n_nodes, size=2)
        if u != v:
            pairs.add((min(int(u), int(v)), max(int(u), int(v))))
    return EdgeContext(np.array(sorted(pairs)), n_nodes)


def mechanism_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    """Each attention mechanism, the composed layer, and the full schedule."""
    d = 8
    ctx_c = _micro_graph(rng)
    ctx_h = _micro_graph(rng, n_edges=5)
    h = _probe(rng, (6, d))
    checks = []
    for name, fn in (
        ("spatial_attention", spatial_attention),
        ("channel_wise_attention", channel_wise_attention),
        ("channel_self_attention", channel_self_attention),
        ("gnn_layer", gnn_layer),
    ):
        params = GnnLayerParams.init(d, rng)
        params.beta = Tensor.scalar(0.3, requires_grad=True)
        err = grad_check(
            lambda f=fn, p=params: nm.reduce_sum(f(h, ctx_c, p)),
            [h] + params.tensors(),
            max_coords=16,
        )
        checks.append((name, err))

    sched = LayerSchedule(1, 1, 1, d)
    params = [GnnLayerParams.init(d, rng) for _ in range(3)]
    err = grad_check(
        lambda: nm.reduce_sum(run_graphfpn(h, sched, params, ctx_c, ctx_h)),
        [h] + [t for p in params for t in p.tensors()],
        max_coords=8,
    )
    checks.append(("run_graphfpn_1_1_1", err))
    return checks


def bridge_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    from .bridge import assign_cells, cnn_to_gnn, gnn_to_cnn
    from .segmentation import Image, build_merge_tree, extract_hierarchy

    img = Image(rng.uniform(size=(8, 8, 3)))
    hierarchy = extract_hierarchy(build_merge_tree(img), 6)
    part = hierarchy.levels[0]
    asg = assign_cells(part, 8, 8)
    d_c, d = 3, 4
    c_map = _probe(rng, (d_c, 8, 8))
    w2 = _probe(rng, (d, 2 * d_c))
    probe = Tensor(rng.normal(size=(part.count, d)))
    checks = [
        (
            "cnn_to_gnn",
            grad_check(
                lambda: nm.reduce_sum(nm.mul(cnn_to_gnn(c_map, asg, w2), probe)),
                [c_map, w2],
                max_coords=32,
            ),
        )
    ]
    p_map = _probe(rng, (d, 8, 8))
    feats = _probe(rng, (part.count, d))
    fuse = _probe(rng, (d, 2 * d, 1, 1))
    map_probe = Tensor(rng.normal(size=(d, 8, 8)))
    checks.append(
        (
            "gnn_to_cnn",
            grad_check(
                lambda: nm.reduce_sum(nm.mul(gnn_to_cnn(feats, asg, p_map, fuse), map_probe)),
                [p_map, feats, fuse],
                max_coords=32,
            ),
        )
    )
    return checks


def full_pipeline_check(seed: int = 1, coords_per_tensor: int = 4) -> float:
    """Finite differences through the entire loss at the micro config.

    The pruned hierarchical topology is captured once and pinned while
    probing so no probe crosses a discrete re-ranking; the analytic gradient
    at the evaluation point is unchanged by the pin (pruning carries no
    gradient). The default seed keeps every ReLU preactivation clear of the
    kink band, as the checker's contract requires (seed 0 lands a probe
    within h of a kink and is excluded).
    """
    config = TrainConfig.micro(seed=seed)
    sample = gen_dataset(config.seed, 1, config.image_size)[0]
    prep = prepare_sample(sample, config)
    model = Model.init(config)

    h0 = _initial_node_features(prep, model)
    pruned = prune_hierarchical(prep.graph, h0, rule=config.prune_rule)
    ctx_hier = EdgeContext(pruned.surviving_hierarchical(), pruned.n_nodes)

    def f():
        logits = forward_pipeline(prep, model, _fixed_hier_ctx=ctx_hier)
        return classification_loss(logits, prep.sp_labels)

    return grad_check(f, model.trainable(), max_coords=coords_per_tensor, seed=seed)


def _initial_node_features(prep, model) -> np.ndarray:
    from .backbone import backbone_forward
    from .bridge import cnn_to_gnn

    cfg = model.config
    c_maps = backbone_forward(prep.image_tensor, model.params, cfg.backbone_config())
    feats = [
        cnn_to_gnn(c_maps[i], prep.assignments[i], model.params[f"bridge.level{i + 1}.w2"]).data
        for i in range(5)
    ]
    return np.concatenate(feats, axis=0)


def gradient_report(level: str = "micro") -> list[tuple[str, float, float]]:
    """(name, rel. err, bound) rows for the requested depth."""
    rng = np.random.default_rng(0)
    rows: list[tuple[str, float, float]] = []
    for name, err in primitive_checks(rng):
        rows.append((name, err, TOLERANCE))
    if level in ("layer", "full"):
        for name, err in mechanism_checks(rng):
            rows.append((name, err, TOLERANCE))
        for name, err in bridge_checks(rng):
            rows.append((name, err, TOLERANCE))
    if level == "full":
        rows.append(("full_pipeline_loss", full_pipeline_check(), TOLERANCE))
    return rows
