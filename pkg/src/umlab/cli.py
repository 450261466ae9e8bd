"""Command-line entry point: synth, train, eval, probe, finetune.

Exit codes: 0 success, 1 usage error (bad flags or infeasible parameters),
2 data or format error (unreadable files, malformed UMLV1/CKPTV1/config).
"""

from __future__ import annotations

import argparse
import sys

from .datahub import load_dataset, save_dataset, synth_generate
from .errors import ConfigError, FormatError, ParameterError, SamplingError
from .evalkit import (
    ProbeConfig,
    evaluate_fsl,
    format_report,
    linear_probe,
    write_report,
)
from .model import load_checkpoint, save_checkpoint
from .simcore import METRIC_KINDS, MetricSpec
from .trainer import TrainConfig, default_finetune_config, finetune, load_config, train


def _cmd_synth(args) -> int:
    data = synth_generate(
        num_clusters=args.clusters,
        per_cluster=args.per,
        dim=args.dim,
        cluster_sep=args.sep,
        noise=args.noise,
        seed=args.seed,
    )
    save_dataset(data, args.out)
    print(f"wrote {args.out}: {data.num_rows} rows, dim {data.dim}, "
          f"{data.num_classes} clusters")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    data = load_dataset(args.data)
    ckpt, report = train(config, data, threads=args.threads)
    save_checkpoint(ckpt, args.out)
    for st in report.epochs:
        print(
            f"epoch {st.epoch}: loss {st.mean_loss:.6f} "
            f"grad {st.mean_grad_norm:.6f} lr {st.lr:.6f} "
            f"time {st.wall_time:.2f}s"
        )
    print(f"wrote {args.out}: {report.total_steps} optimizer steps")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt, activation=args.activation)
    data = load_dataset(args.data)
    metric = MetricSpec(kind=args.metric, temperature=args.temperature)
    report = evaluate_fsl(
        ckpt,
        data,
        way=args.way,
        shot=args.shot,
        query=args.query,
        num_tasks=args.tasks,
        metric=metric,
        seed=args.seed,
        threads=args.threads,
    )
    sys.stdout.write(format_report(report))
    if args.report:
        write_report(report, args.report)
    return 0


def _cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.ckpt, activation=args.activation)
    data = load_dataset(args.data)
    acc = linear_probe(ckpt, data, ProbeConfig(folds=args.folds), seed=args.seed)
    print(f"probe_accuracy: {acc:.4f}")
    return 0


def _cmd_finetune(args) -> int:
    config = (
        load_config(args.config, base=default_finetune_config())
        if args.config
        else default_finetune_config()
    )
    ckpt = load_checkpoint(args.ckpt, activation=config.activation)
    data = load_dataset(args.data)
    tuned = finetune(ckpt, data, args.ratio, config)
    save_checkpoint(tuned, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="umlab",
        description="Unsupervised meta-learning over vector datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled Gaussian-cluster dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--per", type=int, default=60)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sep", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="unsupervised meta-training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="few-shot meta-test evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--query", type=int, default=15)
    p.add_argument("--tasks", type=int, default=10000)
    p.add_argument("--metric", choices=METRIC_KINDS, default="sns")
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("probe", help="linear-probe accuracy on frozen embeddings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("finetune", help="supervised fine-tuning from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_finetune)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (FormatError, ConfigError, SamplingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
