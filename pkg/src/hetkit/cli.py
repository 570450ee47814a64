"""Command-line interface.

Subcommands: metrics, induce, train, eval, buckets, synth, gradcheck.
Every subcommand takes --seed and writes its JSON/CSV outputs under --out.
Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, homophily, metapath, model
from .hetgraph import GraphDataError, load_graph
from .numcore import grad_check

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _graph_arg(path: str):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return load_graph(p)


def _build_parser() -> _Parser:
    parser = _Parser(prog="hetkit", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("metrics", parents=[], help="MLH/MDE metric reports")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--target", default=None, help="node type (default: labeled type)")
    sp.add_argument("--level", choices=("edge", "node"), default="edge")
    common(sp)

    sp = sub.add_parser("induce", help="export a metapath-induced subgraph")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--metapath", required=True, help="comma-separated relation names")
    common(sp)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--config", default=None, help="TrainRunConfig JSON file")
    common(sp)

    sp = sub.add_parser("eval", help="evaluate a trained run")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    common(sp)

    sp = sub.add_parser("buckets", help="bucketed performance report")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--metric", choices=("mlh", "mde"), default="mlh")
    sp.add_argument("--quantiles", type=int, default=5)
    common(sp)

    sp = sub.add_parser("synth", help="generate a planted-homophily dataset")
    sp.add_argument("--spec", default=None, help="SynthSpec JSON file")
    common(sp)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    sp.add_argument("--tol", type=float, default=1e-4)
    common(sp)

    return parser


def _cmd_metrics(args) -> int:
    g = _graph_arg(args.graph)
    target = args.target or g.target_type
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"mlh": homophily.mlh(g, target, args.level).to_dict()}
    if g.node_type(target).features is not None:
        report["mde"] = homophily.mde(g, target, args.level).to_dict()
    (out_dir / "metrics.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(json.dumps({k: v["aggregate"] for k, v in report.items()}))
    return 0


def _cmd_induce(args) -> int:
    g = _graph_arg(args.graph)
    p = metapath.parse_metapath(g, args.metapath)
    ig = metapath.induce_subgraph(g, p)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"induced_{p.label}.tsv"
    metapath.induced_to_tsv(ig, path)
    print(f"{ig.n_edges} edges -> {path}")
    return 0


def _cmd_train(args) -> int:
    g = _graph_arg(args.graph)
    if args.config:
        cfg = harness.TrainRunConfig.from_json_file(args.config)
    else:
        cfg = harness.TrainRunConfig()
    cfg.seed = args.seed
    result = harness.train(g, cfg, args.out)
    print(json.dumps(result.metrics))
    return 0


def _cmd_eval(args) -> int:
    g = _graph_arg(args.graph)
    cfg, params = harness.load_run(args.run)
    logits = harness.inference_logits(g, params, cfg.model)
    ids = g.splits.of(args.split)
    res = harness.evaluate(logits, g.labels, ids, cfg.model.multilabel)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"eval_{args.split}.json").write_text(json.dumps(res, indent=2), encoding="utf-8")
    print(json.dumps(res))
    return 0


def _cmd_buckets(args) -> int:
    g = _graph_arg(args.graph)
    report = harness.bucket_report(
        args.run, g, args.metric, homophily.BucketScheme(quantiles=args.quantiles)
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "buckets.json").write_text(
        json.dumps(report.to_dict(), indent=2), encoding="utf-8"
    )
    print(json.dumps(report.to_dict()))
    return 0


def _cmd_synth(args) -> int:
    if args.spec:
        spec = harness.SynthSpec.from_dict(
            json.loads(Path(args.spec).read_text(encoding="utf-8"))
        )
    else:
        spec = harness.SynthSpec()
    spec.seed = args.seed
    manifest = harness.synth_graph(spec, args.out)
    print(str(manifest))
    return 0


def _cmd_gradcheck(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = harness.SynthSpec(
        classes=2,
        target_count=12,
        intermediate_sizes=[8],
        q=0.8,
        signal=0.5,
        feature_dim=5,
        edges_per_intermediate=3,
        seed=args.seed,
        train_frac=0.5,
        val_frac=0.25,
    )
    manifest = harness.synth_graph(spec, out_dir / "gradcheck_graph")
    g = load_graph(manifest)
    cfg = model.ModelConfig(
        hidden_dim=6, layers=2, alpha=0.3, beta=0.3, label_mask_p=0.5,
        contrastive_completion=True,
    )
    rng = np.random.default_rng(args.seed)
    params = model.init_params(g, cfg, rng)
    paths = harness.resolve_metapaths(g, cfg)
    plan = metapath.sample_mask(g, paths, cfg.edge_mask_ratio, cfg.walk_len, rng)
    negatives = metapath.sample_negatives(g, paths, max(1, len(plan.rho_plus)), rng)
    keep = model.draw_label_mask(len(g.splits.train), cfg.label_mask_p, rng)

    def loss_fn(store):
        j, _, _ = harness.compute_step_loss(g, plan, negatives, store, cfg, keep)
        return j

    report = grad_check(loss_fn, params, tol=args.tol, rng=np.random.default_rng(args.seed))
    (out_dir / "gradcheck.json").write_text(report.to_json(), encoding="utf-8")
    name, worst = report.worst()
    print(f"{'PASS' if report.passed else 'FAIL'} (worst {name}: {worst:.3e})")
    return 0 if report.passed else 2


_COMMANDS = {
    "metrics": _cmd_metrics,
    "induce": _cmd_induce,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "buckets": _cmd_buckets,
    "synth": _cmd_synth,
    "gradcheck": _cmd_gradcheck,
}


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except GraphDataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(cli())


if __name__ == "__main__":
    main()
