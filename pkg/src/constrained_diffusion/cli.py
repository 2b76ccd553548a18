"""Command-line entry point for running experiments and their stages.

Subcommands mirror the pipeline: ``train``, ``oracle``, ``sample``,
``score`` run one stage (with cached upstream artifacts), ``run`` executes
everything, and ``ablate`` sweeps one axis over a list of values. Every
subcommand takes ``--config``, plus optional ``--seed`` and ``--out``
overrides; the artifact cache location can be moved with the
CONSTRAINED_DIFFUSION_CACHE environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .runner import ABLATION_AXES, ExperimentRunner, ablate


def _add_common(p):
    p.add_argument("--config", required=True, help="path to the experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the sampling seed")
    p.add_argument("--out", default=None, help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="constrained-diffusion",
        description="Constrained diffusion sampling experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train", "generate data and train the denoiser"),
        ("oracle", "build rejection-sampling ground-truth clouds"),
        ("sample", "run all configured samplers"),
        ("score", "compute metrics for sampled runs"),
        ("run", "full pipeline: train, oracle, sample, score"),
        ("ablate", "sweep one parameter axis"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "ablate":
            p.add_argument("--axis", required=True, choices=ABLATION_AXES)
            p.add_argument("--values", required=True, help="comma-separated integer values")
    return parser


def _load(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["sampling"]["seed"] = args.seed
    if args.out is not None:
        cfg["output_dir"] = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "run":
            runner = ExperimentRunner(cfg)
            runner.run_all()
        elif args.command == "ablate":
            values = [int(v) for v in args.values.split(",") if v.strip() != ""]
            if not values:
                print("config error: --values must list at least one integer", file=sys.stderr)
                return 2
            ablate(cfg, args.axis, values)
        else:
            runner = ExperimentRunner(cfg)
            data = runner.stage_dataset()
            runner.stage_net(data)
            if args.command != "train":
                runner.stage_constraints()
                runner.stage_oracle()
            if args.command in ("sample", "score"):
                runner.stage_sample()
            if args.command == "score":
                runner.stage_score()
            runner._write_manifest("complete")
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
