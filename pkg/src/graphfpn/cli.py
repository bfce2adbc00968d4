"""Command-line entry points: segment, graph, forward, train, eval, gradcheck,
ablate, dataset."""

from __future__ import annotations

import os

# pin BLAS threads before numpy's pools spin up: reproducible reductions,
# no thread thrash on small matrices
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
from pathlib import Path

import numpy as np

SEED_ENV = "GFPN_SEED"


def _load_config(path: str | None, seed_override: int | None):
    from .pipeline import TrainConfig

    doc = json.loads(Path(path).read_text()) if path else {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        doc["seed"] = int(env_seed)
    if seed_override is not None:
        doc["seed"] = seed_override
    return TrainConfig.from_json(doc)


def cmd_segment(args) -> int:
    from .segmentation import build_merge_tree, extract_hierarchy, load_ppm, save_hierarchy

    img = load_ppm(args.image)
    hierarchy = extract_hierarchy(build_merge_tree(img), args.n)
    save_hierarchy(hierarchy, args.out)
    print(f"wrote {args.out}: levels {hierarchy.level_counts}")
    return 0


def cmd_graph(args) -> int:
    from .graphpyramid import build_graph, graph_to_json
    from .segmentation import load_hierarchy

    graph = build_graph(load_hierarchy(args.hierarchy))
    Path(args.out).write_text(json.dumps(graph_to_json(graph), sort_keys=True))
    print(
        f"wrote {args.out}: {graph.n_nodes} nodes, "
        f"{len(graph.contextual_edges)} contextual, "
        f"{len(graph.hierarchical_edges)} hierarchical edges"
    )
    return 0


def cmd_forward(args) -> int:
    from .pipeline import forward_pipeline, fused_pyramid, load_model, prepare_sample
    from .segmentation import load_ppm
    from .synthetic import SyntheticSample

    model = load_model(Path(args.ckpt).read_bytes())
    img = load_ppm(args.image)
    sample = SyntheticSample(img, np.zeros((img.height, img.width), dtype=np.int64))
    prep = prepare_sample(sample, model.config)
    logits = forward_pipeline(prep, model)
    out = {
        "logits": logits.data.tolist(),
        "predictions": np.argmax(logits.data, axis=1).tolist(),
    }
    if args.dump_features:
        if model.config.graphfpn:
            out["fused_pyramid"] = [p.data.tolist() for p in fused_pyramid(prep, model)]
        out["level_counts"] = list(prep.hierarchy.level_counts)
    text = json.dumps(out, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_train(args) -> int:
    from .pipeline import train

    config = _load_config(args.config, args.seed)
    result = train(config)
    Path(args.out).write_bytes(result.checkpoint)
    log_path = args.log or (args.out + ".metrics.jsonl")
    Path(log_path).write_text(result.metrics_jsonl())
    print(f"wrote {args.out} (sha256 {result.checkpoint_sha()[:16]})")
    print(f"metrics -> {log_path}")
    for m in result.metrics:
        print(json.dumps(m, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .pipeline import evaluate, load_model, prepare_sample
    from .segmentation import load_ppm
    from .synthetic import SyntheticSample

    model = load_model(Path(args.ckpt).read_bytes())
    data_dir = Path(args.data)
    preps = []
    for ppm in sorted(data_dir.glob("*.ppm")):
        labels_path = ppm.with_suffix(".labels.json")
        if not labels_path.exists():
            print(f"skipping {ppm.name}: no labels file", file=sys.stderr)
            continue
        img = load_ppm(ppm)
        labels = np.asarray(json.loads(labels_path.read_text()), dtype=np.int64)
        preps.append(prepare_sample(SyntheticSample(img, labels.reshape(img.height, img.width)), model.config))
    if not preps:
        print("no labeled samples found", file=sys.stderr)
        return 1
    report = evaluate(model, preps)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_dataset(args) -> int:
    from .segmentation import save_ppm
    from .synthetic import gen_dataset

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = gen_dataset(args.seed, args.n, args.size)
    for i, sample in enumerate(samples):
        stem = out_dir / f"sample_{i:04d}"
        save_ppm(sample.image, stem.with_suffix(".ppm"))
        stem.with_suffix(".labels.json").write_text(
            json.dumps(sample.pixel_labels.reshape(-1).tolist())
        )
    print(f"wrote {len(samples)} samples to {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import gradient_report

    report = gradient_report(args.level)
    failed = False
    for name, err, bound in report:
        status = "ok" if err < bound else "FAIL"
        failed |= err >= bound
        print(f"{status:4s} {name:45s} rel.err {err:.3e} (bound {bound:g})")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    from .pipeline import ablate, ablation_markdown

    config = _load_config(args.config, args.seed)
    rows = None
    if args.grid:
        rows = json.loads(Path(args.grid).read_text())
    report = ablate(config, rows)
    Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=2))
    print(ablation_markdown(report))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphfpn")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="superpixel hierarchy from a PPM image")
    p.add_argument("image")
    p.add_argument("--n", type=int, default=256, help="finest superpixel count")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("graph", help="graph pyramid from a hierarchy JSON")
    p.add_argument("hierarchy")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_graph)

    p = sub.add_parser("forward", help="run the pipeline on one image")
    p.add_argument("image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--dump-features", action="store_true")
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("train", help="train on the synthetic task")
    p.add_argument("--config", help="TrainConfig JSON (defaults apply)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="metrics JSONL path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a sample directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dir of *.ppm + *.labels.json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("dataset", help="materialize synthetic samples to disk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--level", choices=("micro", "layer", "full"), default="micro")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the ablation grid and tabulate")
    p.add_argument("--config", help="base TrainConfig JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid", help="custom row list JSON")
    p.add_argument("--out", default="ablation.json")
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
