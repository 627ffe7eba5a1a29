"""Command-line entry point: ``mcl-okd {train,eval,fewshot,verify,compare}``.

Exit codes: 0 success, 1 runtime failure (failed checks, corrupt
checkpoint, missing data), 2 invalid usage or configuration.
"""
import argparse
import datetime
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, kernels
from .config import load_config
from .errors import (
    CheckpointIntegrityError,
    ConfigError,
    DatasetNotFoundError,
    IncompatibleCheckpointError,
    InvalidInputError,
)

logger = logging.getLogger("mcl_okd")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _versions():
    return {
        "mcl_okd": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "kernel_backend": kernels.BACKEND,
    }


def write_manifest(run_dir, config, argv):
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "versions": _versions(),
        "argv": list(argv),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    path = Path(run_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_train(args, argv):
    from .trainer import fit, fit_seeds

    config = load_config(args.config, args.override, seed=args.seed)
    run_dir = Path(args.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(run_dir, config, argv)
    if args.seeds:
        _, summary = fit_seeds(config, args.seeds, out_dir=run_dir)
        print(json.dumps(summary, indent=2))
        return EXIT_OK
    result = fit(config, out_dir=run_dir, resume=args.resume)
    if result.history:
        last = result.history[-1]
        print(f"deploy top-1 error {last['eval_error']:.2f}%  ensemble {last['ensemble_error']:.2f}%")
    print(f"artifacts in {run_dir}")
    return EXIT_OK


def cmd_eval(args, argv):
    from .evaluation import append_record, ensemble_top1_error, top1_error
    from .peers import export_deployment
    from .trainer import load_graph, load_splits

    graph, config = load_graph(args.checkpoint)
    if args.data_root:
        config = config.replace(data_root=args.data_root)
    train, _, test = load_splits(config)
    dataset = train if args.split == "train" else test
    if args.mode == "deploy":
        error = top1_error(export_deployment(graph), dataset)
    else:
        error = ensemble_top1_error(graph, dataset)
    record = {
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "mode": args.mode,
        "M": config.M,
        "seed": config.seed,
        "top1_error": error,
    }
    print(f"{args.mode} top-1 error on {args.split}: {error:.2f}%")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.jsonl")
    append_record(out, record)
    return EXIT_OK


def cmd_fewshot(args, argv):
    from .data import make_separable
    from .fewshot import episodic_accuracy, feature_extractor, novel_class_dataset
    from .trainer import load_graph

    graph, config = load_graph(args.checkpoint)
    if args.dataset == "separable":
        dataset = make_separable(num_classes=max(args.way, 10), per_class=args.shot + args.query,
                                 resolution=config.resolution, seed=args.seed)
    else:
        if config.dataset != "synthetic":
            raise InvalidInputError("--dataset novel needs a checkpoint trained on synthetic data")
        per_class = max(60, args.shot + args.query)
        dataset = novel_class_dataset(config.synthetic(), per_class=per_class)
    embed = feature_extractor(graph, use_head=args.embedding == "head")
    result = episodic_accuracy(embed, dataset, args.way, args.shot, args.episodes,
                               np.random.default_rng(args.seed), query_per_class=args.query)
    print(result)
    record = result.record()
    record.update({"checkpoint": str(args.checkpoint), "dataset": args.dataset, "embedding": args.embedding})
    if args.out:
        with open(args.out, "a") as fh:
            fh.write(json.dumps(record) + "\n")
    else:
        print(json.dumps(record))
    return EXIT_OK


def cmd_verify(args, argv):
    from .verification import run_checks

    results = run_checks(grad_tolerance=args.tolerance, oracle_tolerance=args.oracle_tolerance, seed=args.seed)
    for r in results:
        print(r)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_FAILURE
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_compare(args, argv):
    from .experiment import run_comparison

    config = load_config(args.config, args.override)
    report = run_comparison(config, args.seeds, out_dir=args.out_dir)
    print(report.table())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mcl-okd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a peer graph from a config file")
    p.add_argument("--config", required=True, help="TOML/JSON config or a run manifest")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--seeds", type=_parse_seeds, default=None, help="comma-separated seeds; one run each")
    p.add_argument("--out-dir", default="runs/latest", help="run directory (default: runs/latest)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (repeatable)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 error of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("deploy", "ensemble"), default="deploy")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--data-root", default=None)
    p.add_argument("--out", default=None, help="JSON-lines file to append the record to")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fewshot", help="prototypical episodic evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--query", type=int, default=15)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", choices=("novel", "separable"), default="novel")
    p.add_argument("--embedding", choices=("gap", "head"), default="gap")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("verify", help="oracle-equivalence and gradient checks")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative gradient error")
    p.add_argument("--oracle-tolerance", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("compare", help="MCL-OKD vs independent baseline over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=_parse_seeds, default=[0, 1, 2])
    p.add_argument("--out-dir", default=None)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointIntegrityError as exc:
        print(f"checkpoint integrity error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except IncompatibleCheckpointError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DatasetNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
