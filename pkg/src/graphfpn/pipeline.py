"""End-to-end pipeline: per-superpixel classification over the fused pyramid,
Adam training loop, evaluation, and the ablation harness."""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import numerics as nm
from .backbone import BackboneConfig, backbone_forward, fpn_forward
from .backbone import init_params as init_backbone_params
from .bridge import CellAssignment, assign_cells, cnn_to_gnn, gnn_to_cnn
from .gnn import (
    AttentionFlags,
    EdgeContext,
    GnnLayerParams,
    LayerSchedule,
    run_graphfpn,
)
from .graphpyramid import GraphPyramid, build_graph, prune_hierarchical
from .numerics import ContractError, SegmentIndex, Tape, Tensor, zero_grad
from .segmentation import SuperpixelHierarchy, build_merge_tree, extract_hierarchy
from .synthetic import N_SHAPE_CLASSES, SyntheticSample, gen_dataset, majority_labels

# spawn-key prefixes carving independent streams out of one seed
_PARAM_STREAM = (1,)
_SHUFFLE_STREAM = (2,)


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; JSON round-trippable and echoed in checkpoints."""

    seed: int = 0
    epochs: int = 4
    batch_size: int = 4
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    n_superpixels: int = 256
    layers_per_group: int = 3
    feature_dim: int = 32
    image_size: int = 64
    n_train: int = 40
    n_val: int = 12
    stage_channels: tuple[int, ...] = (16, 32, 64, 96, 128)
    # ablation switches
    graphfpn: bool = True
    contextual_pre: bool = True
    hierarchical: bool = True
    contextual_post: bool = True
    spatial_attention: bool = True
    channel_wise_attention: bool = True
    channel_self_attention: bool = True
    prune_rule: str = "union"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        positive = (
            self.epochs, self.batch_size, self.n_superpixels,
            self.layers_per_group, self.feature_dim, self.image_size,
            self.n_train, self.n_val,
        )
        if min(positive) <= 0:
            raise ContractError("config sizes must be positive")
        if self.learning_rate < 0:
            raise ContractError("learning rate cannot be negative")
        if self.prune_rule not in ("union", "intersection"):
            raise ContractError(f"unknown prune rule {self.prune_rule!r}")
        if self.n_superpixels > self.image_size * self.image_size:
            raise ContractError("more superpixels than pixels")

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.stage_channels, self.feature_dim, self.image_size)

    def effective_schedule(self) -> LayerSchedule:
        n = self.layers_per_group
        return LayerSchedule(
            n if self.contextual_pre else 0,
            n if self.hierarchical else 0,
            n if self.contextual_post else 0,
            self.feature_dim,
        )

    def attention_flags(self) -> AttentionFlags:
        return AttentionFlags(
            self.spatial_attention, self.channel_wise_attention, self.channel_self_attention
        )

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["stage_channels"] = list(self.stage_channels)
        return doc

    @staticmethod
    def from_json(doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc["stage_channels"] = tuple(doc.get("stage_channels", (16, 32, 64, 96, 128)))
        return TrainConfig(**doc)

    @staticmethod
    def micro(**overrides) -> "TrainConfig":
        """16x16 images, N=16, D=8, (1,1,1) schedule: the gradient-check scale."""
        base = dict(
            image_size=16, n_superpixels=16, feature_dim=8, layers_per_group=1,
            stage_channels=(4, 6, 8, 10, 12), n_train=4, n_val=2, epochs=2,
        )
        base.update(overrides)
        return TrainConfig(**base)


N_CLASSES = N_SHAPE_CLASSES + 1  # background included


@dataclass
class Model:
    config: TrainConfig
    params: "OrderedDict[str, Tensor]"
    layer_params: list[GnnLayerParams]

    @staticmethod
    def init(config: TrainConfig) -> "Model":
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=_PARAM_STREAM)
        )
        params: OrderedDict[str, Tensor] = OrderedDict()
        params.update(init_backbone_params(config.backbone_config(), rng))
        d = config.feature_dim
        for i, c in enumerate(config.stage_channels, start=1):
            params[f"bridge.level{i}.w2"] = Tensor(
                nm.xavier_uniform(rng, (d, 2 * c), 2 * c, d), requires_grad=True
            )
            params[f"bridge.level{i}.fuse.weight"] = Tensor(
                nm.xavier_uniform(rng, (d, 2 * d, 1, 1), 2 * d, d), requires_grad=True
            )
        layer_params = []
        for k in range(config.effective_schedule().total_layers):
            lp = GnnLayerParams.init(d, rng)
            params[f"gnn.layer{k}.w"] = lp.w
            params[f"gnn.layer{k}.a"] = lp.a
            params[f"gnn.layer{k}.w1"] = lp.w1
            params[f"gnn.layer{k}.beta"] = lp.beta
            layer_params.append(lp)
        params["head.weight"] = Tensor(
            nm.xavier_uniform(rng, (N_CLASSES, d), d, N_CLASSES), requires_grad=True
        )
        params["head.bias"] = Tensor.zeros((N_CLASSES,), requires_grad=True)
        return Model(config, params, layer_params)

    def param_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data) for name, t in self.params.items())

    @staticmethod
    def from_arrays(config: TrainConfig, arrays: "OrderedDict[str, np.ndarray]") -> "Model":
        template = Model.init(config)
        if list(arrays) != list(template.params):
            raise ContractError("checkpoint parameter names do not match the config")
        for name, tensor in template.params.items():
            if arrays[name].shape != tensor.shape:
                raise ContractError(
                    f"checkpoint shape {arrays[name].shape} != expected {tensor.shape} for {name}"
                )
            tensor.data = np.array(arrays[name], dtype=np.float64)
        return template

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())


@dataclass
class PreparedSample:
    """Everything parameter-independent, computed once per sample and reused
    across epochs: hierarchy, graph topology, cell assignments, labels."""

    image_tensor: Tensor
    pixel_labels: np.ndarray
    hierarchy: SuperpixelHierarchy
    sp_labels: np.ndarray
    assignments: list[CellAssignment]
    head_flat_idx: np.ndarray
    head_seg: SegmentIndex
    graph: Optional[GraphPyramid]
    ctx_contextual: Optional[EdgeContext]


def prepare_sample(sample: SyntheticSample, config: TrainConfig) -> PreparedSample:
    if (sample.image.height, sample.image.width) != (config.image_size, config.image_size):
        raise ContractError(
            f"sample is {sample.image.height}x{sample.image.width}, "
            f"config expects {config.image_size}x{config.image_size}"
        )
    hierarchy = extract_hierarchy(build_merge_tree(sample.image), config.n_superpixels)
    grids = config.backbone_config().grid_sizes
    assignments = [
        assign_cells(hierarchy.levels[i], grids[i], grids[i]) for i in range(5)
    ]
    level1 = assignments[0]
    head_flat_idx = np.concatenate(level1.cells)
    lengths = [len(c) for c in level1.cells]
    starts = np.cumsum([0] + lengths[:-1])
    head_seg = SegmentIndex(
        [range(int(s), int(s + n)) for s, n in zip(starts, lengths)], len(head_flat_idx)
    )
    sp_labels = majority_labels(sample.pixel_labels, hierarchy.levels[0].pixels)
    graph = ctx_ctx = None
    if config.graphfpn:
        graph = build_graph(hierarchy)
        ctx_ctx = EdgeContext(graph.contextual_edges, graph.n_nodes)
    return PreparedSample(
        image_tensor=Tensor(np.ascontiguousarray(sample.image.rgb.transpose(2, 0, 1))),
        pixel_labels=sample.pixel_labels,
        hierarchy=hierarchy,
        sp_labels=sp_labels,
        assignments=assignments,
        head_flat_idx=head_flat_idx,
        head_seg=head_seg,
        graph=graph,
        ctx_contextual=ctx_ctx,
    )


def prepare_dataset(samples: list[SyntheticSample], config: TrainConfig) -> list[PreparedSample]:
    return [prepare_sample(s, config) for s in samples]


def forward_pipeline(
    prep: PreparedSample, model: Model, _fixed_hier_ctx: Optional[EdgeContext] = None
) -> Tensor:
    """Logits (one row per level-1 superpixel) from the fused finest map.

    With the graphfpn switch off the classifier reads the plain FPN map P1
    and no graph machinery runs at all. `_fixed_hier_ctx` pins the pruned
    hierarchical topology (gradient probes must not cross a discrete
    re-ranking between evaluations); normal passes recompute it.
    """
    cfg = model.config
    params = model.params
    bb = cfg.backbone_config()
    c_maps = backbone_forward(prep.image_tensor, params, bb)
    p_maps = fpn_forward(c_maps, params, bb)

    if cfg.graphfpn:
        level_feats = [
            cnn_to_gnn(c_maps[i], prep.assignments[i], params[f"bridge.level{i + 1}.w2"])
            for i in range(5)
        ]
        h0 = nm.concat(level_feats, axis=0)
        if _fixed_hier_ctx is None:
            pruned = prune_hierarchical(prep.graph, h0.data, rule=cfg.prune_rule)
            ctx_hier = EdgeContext(pruned.surviving_hierarchical(), pruned.n_nodes)
        else:
            ctx_hier = _fixed_hier_ctx
        final = run_graphfpn(
            h0,
            cfg.effective_schedule(),
            model.layer_params,
            prep.ctx_contextual,
            ctx_hier,
            cfg.attention_flags(),
        )
        finest = gnn_to_cnn(
            nm.slice_axis(final, 0, 0, prep.graph.level_counts[0]),
            prep.assignments[0],
            p_maps[0],
            params["bridge.level1.fuse.weight"],
        )
    else:
        finest = p_maps[0]

    d_p, h, w = finest.shape
    grid_feats = nm.transpose2d(nm.reshape(finest, (d_p, h * w)))
    sp_feats = nm.segment_reduce(
        nm.gather_rows(grid_feats, prep.head_flat_idx), prep.head_seg, "mean"
    )
    return nm.add_row_bias(nm.linear(sp_feats, params["head.weight"]), params["head.bias"])


def fused_pyramid(prep: PreparedSample, model: Model) -> list[Tensor]:
    """All five fused maps (diagnostics / feature dumps; graphfpn must be on)."""
    cfg = model.config
    if not cfg.graphfpn:
        raise ContractError("fused_pyramid needs the graphfpn branch enabled")
    params = model.params
    bb = cfg.backbone_config()
    c_maps = backbone_forward(prep.image_tensor, params, bb)
    p_maps = fpn_forward(c_maps, params, bb)
    level_feats = [
        cnn_to_gnn(c_maps[i], prep.assignments[i], params[f"bridge.level{i + 1}.w2"])
        for i in range(5)
    ]
    h0 = nm.concat(level_feats, axis=0)
    pruned = prune_hierarchical(prep.graph, h0.data, rule=cfg.prune_rule)
    ctx_hier = EdgeContext(pruned.surviving_hierarchical(), pruned.n_nodes)
    final = run_graphfpn(
        h0, cfg.effective_schedule(), model.layer_params,
        prep.ctx_contextual, ctx_hier, cfg.attention_flags(),
    )
    fused = []
    for i in range(5):
        offset = prep.graph.level_offsets[i]
        count = prep.graph.level_counts[i]
        fused.append(
            gnn_to_cnn(
                nm.slice_axis(final, 0, offset, count),
                prep.assignments[i],
                p_maps[i],
                params[f"bridge.level{i + 1}.fuse.weight"],
            )
        )
    return fused


def classification_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return nm.neg(nm.reduce_mean(nm.gather_elements(nm.log_softmax_rows(logits), labels)))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with coupled weight decay and global-norm gradient clipping."""

    def __init__(self, model: Model):
        cfg = model.config
        self.cfg = cfg
        self.tensors = model.params
        self.m = {name: np.zeros_like(t.data) for name, t in self.tensors.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.tensors.items()}
        self.t = 0

    def step(self, grad_scale: float = 1.0) -> None:
        cfg = self.cfg
        if cfg.learning_rate == 0.0:
            return
        grads = {}
        sq_norm = 0.0
        for name, tensor in self.tensors.items():
            if tensor.grad is None:
                continue
            g = tensor.grad * grad_scale + cfg.weight_decay * tensor.data
            grads[name] = g
            sq_norm += float(np.sum(g * g))
        if not grads:
            return
        norm = np.sqrt(sq_norm)
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            for g in grads.values():
                g *= scale
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            self.tensors[name].data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    checkpoint: bytes

    def metrics_jsonl(self) -> str:
        return "".join(json.dumps(m, sort_keys=True) + "\n" for m in self.metrics)

    def checkpoint_sha(self) -> str:
        return hashlib.sha256(self.checkpoint).hexdigest()


def train(
    config: TrainConfig,
    prepared: Optional[tuple[list[PreparedSample], list[PreparedSample]]] = None,
) -> TrainResult:
    """Deterministic Adam training; returns the model, per-epoch metrics, and
    the serialized checkpoint. `prepared` may inject pre-built samples (they
    must have been prepared with an identical data configuration)."""
    if prepared is None:
        samples = gen_dataset(config.seed, config.n_train + config.n_val, config.image_size)
        train_set = prepare_dataset(samples[: config.n_train], config)
        val_set = prepare_dataset(samples[config.n_train :], config)
    else:
        train_set, val_set = prepared
        if len(train_set) != config.n_train or len(val_set) != config.n_val:
            raise ContractError("injected dataset sizes do not match the config")
        if config.graphfpn and any(p.graph is None for p in train_set + val_set):
            raise ContractError("injected samples were prepared without graphs")

    model = Model.init(config)
    opt = Adam(model)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=_SHUFFLE_STREAM)
    )
    metrics: list[dict] = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_set))
        epoch_losses: list[float] = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            zero_grad(model.trainable())
            for idx in batch:
                prep = train_set[int(idx)]
                with Tape() as tape:
                    logits = forward_pipeline(prep, model)
                    loss = classification_loss(logits, prep.sp_labels)
                tape.backward(loss)
                epoch_losses.append(loss.item())
            opt.step(grad_scale=1.0 / len(batch))
        report = evaluate(model, val_set)
        metrics.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_accuracy": report["accuracy"],
            }
        )
    blob = ckpt_io.serialize(
        config.to_json(), model.param_arrays(), shuffle_rng.bit_generator.state
    )
    return TrainResult(model, metrics, blob)


def evaluate(model: Model, preps: list[PreparedSample]) -> dict:
    """Superpixel-weighted accuracy (percent), per-class accuracy, confusion."""
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for prep in preps:
        logits = forward_pipeline(prep, model)
        pred = np.argmax(logits.data, axis=1)
        for truth, guess in zip(prep.sp_labels, pred):
            confusion[truth, guess] += 1
    total = int(confusion.sum())
    correct = int(np.trace(confusion))
    per_class = []
    for c in range(N_CLASSES):
        row_total = int(confusion[c].sum())
        per_class.append(100.0 * confusion[c, c] / row_total if row_total else float("nan"))
    return {
        "accuracy": 100.0 * correct / total if total else float("nan"),
        "per_class_accuracy": per_class,
        "confusion": confusion.tolist(),
        "n_superpixels": total,
    }


def load_model(blob: bytes) -> Model:
    config_doc, arrays, _ = ckpt_io.deserialize(blob)
    return Model.from_arrays(TrainConfig.from_json(config_doc), arrays)


# ---------------------------------------------------------------------------
# ablation harness


def standard_ablation_rows() -> list[dict]:
    """The twelve trained configurations behind the three ablation tables:
    layer-group on/off rows, attention on/off rows, depth rows, and the
    FPN-only baseline. The all-on configuration is shared between tables."""
    rows: list[dict] = []
    for cp, hg, cp2 in ((1, 1, 1), (0, 1, 1), (1, 1, 0), (0, 1, 0), (1, 0, 0)):
        rows.append(
            {
                "table": "layer-groups",
                "label": f"CGL1={'on' if cp else 'off'} HGL={'on' if hg else 'off'} "
                f"CGL2={'on' if cp2 else 'off'}",
                "overrides": {
                    "contextual_pre": bool(cp),
                    "hierarchical": bool(hg),
                    "contextual_post": bool(cp2),
                },
            }
        )
    for sa, lca, lsa in ((0, 1, 1), (1, 0, 1), (1, 1, 0), (1, 0, 0)):
        rows.append(
            {
                "table": "attention",
                "label": f"SA={'on' if sa else 'off'} LCA={'on' if lca else 'off'} "
                f"LSA={'on' if lsa else 'off'}",
                "overrides": {
                    "spatial_attention": bool(sa),
                    "channel_wise_attention": bool(lca),
                    "channel_self_attention": bool(lsa),
                },
            }
        )
    for n in (1, 2):
        rows.append(
            {"table": "depth", "label": f"N={n}", "overrides": {"layers_per_group": n}}
        )
    rows.append({"table": "baseline", "label": "FPN-only", "overrides": {"graphfpn": False}})
    return rows


def ablate(
    base_config: TrainConfig,
    rows: Optional[list[dict]] = None,
    prepared: Optional[tuple[list[PreparedSample], list[PreparedSample]]] = None,
) -> dict:
    """Train every row's configuration and tabulate final metrics.

    Rows that resolve to the same TrainConfig (the all-on row appears in all
    three tables) are trained once and reused.
    """
    rows = standard_ablation_rows() if rows is None else rows
    cache: dict[str, dict] = {}
    results = []
    for row in rows:
        cfg = replace(base_config, **row["overrides"])
        key = json.dumps(cfg.to_json(), sort_keys=True)
        if key not in cache:
            res = train(cfg, prepared=prepared if _same_data_config(cfg, base_config) else None)
            cache[key] = {
                "final_val_accuracy": res.metrics[-1]["val_accuracy"],
                "final_train_loss": res.metrics[-1]["train_loss"],
                "checkpoint_sha256": res.checkpoint_sha(),
            }
        results.append({"table": row["table"], "label": row["label"], **cache[key]})
    return {"base_config": base_config.to_json(), "rows": results}


def _same_data_config(a: TrainConfig, b: TrainConfig) -> bool:
    keys = ("seed", "n_train", "n_val", "image_size", "n_superpixels", "graphfpn", "prune_rule")
    return all(getattr(a, k) == getattr(b, k) for k in keys)


def ablation_markdown(report: dict) -> str:
    lines = []
    for table in ("layer-groups", "attention", "depth", "baseline"):
        rows = [r for r in report["rows"] if r["table"] == table]
        if not rows:
            continue
        lines.append(f"## {table}")
        lines.append("| configuration | val accuracy | train loss |")
        lines.append("|---|---|---|")
        for r in rows:
            lines.append(
                f"| {r['label']} | {r['final_val_accuracy']:.2f} | {r['final_train_loss']:.4f} |"
            )
        lines.append("")
    return "\n".join(lines)
