"""Command line entry point: ``presgan <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import workflow
from .data_io import atomic_write_text, dataset_to_csv, load_run_config, points_to_csv
from .errors import ConfigError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration JSON")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="presgan", description="Entropy-regularised GAN training and evaluation on synthetic mixtures.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    t = sub.add_parser("train", parents=[common], help="train and write epoch log, checkpoint, scatter plot")
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint with training state")
    for name, text in (
        ("eval-ll", "importance-sampled log-likelihood of held-out points"),
        ("metrics", "modes captured and label KL"),
    ):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--checkpoint", help="defaults to <out>/checkpoint.json")
    s = sub.add_parser("sample", parents=[common], help="write generated points as CSV")
    s.add_argument("--checkpoint", help="defaults to <out>/checkpoint.json")
    s.add_argument("--n", type=int, default=5000)
    sub.add_parser("make-data", parents=[common], help="write the configured dataset as CSV")
    return p


def _run(args) -> int:
    cfg = workflow.with_seed(load_run_config(args.config), args.seed)
    if args.out:
        cfg.out_dir = args.out
    out = Path(cfg.out_dir)

    if args.command == "train":
        resume = workflow.load_checkpoint(args.resume) if args.resume else None
        res = workflow.run_training(cfg, out, resume=resume)
        print(f"trained {res.state.epochs_done} epochs; artefacts in {out}")
    elif args.command == "make-data":
        path = out / "dataset.csv"
        atomic_write_text(path, dataset_to_csv(workflow.build_dataset(cfg)))
        print(path)
    else:
        ckpt = workflow.checkpoint_for(cfg, args.checkpoint)
        if args.command == "sample":
            sys.stdout.write(points_to_csv(workflow.run_sample(cfg, ckpt, args.n)))
        elif args.command == "metrics":
            report = workflow.run_metrics(cfg, ckpt)
            atomic_write_text(out / "metrics.json", report.to_json())
            print(report.to_json())
        elif args.command == "eval-ll":
            report = workflow.run_eval_ll(cfg, ckpt)
            atomic_write_text(out / "eval_ll.json", report.to_json())
            print(f"mean log-likelihood {report.mean_loglik:.5f} over {len(report.loglik)} points")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
