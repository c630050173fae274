"""Command-line entry point: generate | train | evaluate | plotdata | baseline.

Failures print one machine-parsable JSON line on stderr
({"error": <class>, "message": <text>}) and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import ConfigurationError, DiffrxError
from .config import LinkConfig, load_config
from .plotdata import run_plotdata
from .runs import DEFAULT_ESTIMATORS, run_evaluate, run_generate, run_train


def _parse_densities(text: str | None, config: LinkConfig) -> list[int]:
    """Accept '4,16,32' or '1/4,1/16,1/32'; default is the config's spacing."""
    if not text:
        return [config.pilot.spacing]
    spacings = []
    for token in text.split(","):
        token = token.strip()
        if token.startswith("1/"):
            token = token[2:]
        try:
            spacing = int(token)
        except ValueError:
            raise ConfigurationError(
                f"--densities: expected integers or 1/<n> fractions, got {token!r}")
        if spacing < 1:
            raise ConfigurationError(f"--densities: spacing must be >= 1, got {spacing}")
        spacings.append(spacing)
    return spacings


def _parse_steps(text: str | None, config: LinkConfig) -> list[int]:
    if not text:
        return [config.sampler.steps]
    try:
        return [int(token) for token in text.split(",")]
    except ValueError:
        raise ConfigurationError(f"--steps: expected integers, got {text!r}")


def _parse_estimators(text: str | None) -> list[str]:
    if not text:
        return list(DEFAULT_ESTIMATORS)
    return [token.strip().lower() for token in text.split(",") if token.strip()]


def _resolve_config(args) -> tuple[LinkConfig, dict]:
    raw = json.loads(Path(args.config).read_text()) if Path(args.config).exists() else {}
    config = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    if getattr(args, "reproducible", False) and args.seed is None and "seed" not in raw:
        raise ConfigurationError(
            "--reproducible requires --seed or an explicit seed in the config file")
    return config, raw


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffrx",
        description="OFDM channel estimation with a conditional diffusion model")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--force", action="store_true",
                           help="overwrite an existing run directory")

    p_gen = sub.add_parser("generate", help="draw and normalize dataset splits")
    common(p_gen)

    p_train = sub.add_parser("train", help="train denoiser checkpoints per density")
    common(p_train)
    p_train.add_argument("--data", required=True, help="directory with dataset files")
    p_train.add_argument("--densities", default=None,
                         help="comma list of pilot spacings (e.g. 4,16,32)")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from ckpt_*_last.bin in --out")

    p_eval = sub.add_parser("evaluate", help="NMSE/BER sweeps against baselines")
    common(p_eval)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--ckpt", default=None,
                        help="checkpoint file or directory (needed for dm-*)")
    p_eval.add_argument("--estimators", default=None,
                        help=f"comma list, default {','.join(DEFAULT_ESTIMATORS)}")
    p_eval.add_argument("--densities", default=None)
    p_eval.add_argument("--steps", default=None,
                        help="comma list of inference step counts")
    p_eval.add_argument("--reproducible", action="store_true",
                        help="require an explicit seed")
    p_eval.add_argument("--skip-ber", action="store_true",
                        help="emit only NMSE tables")

    p_base = sub.add_parser("baseline", help="classical estimators only, no checkpoint")
    common(p_base)
    p_base.add_argument("--data", required=True)
    p_base.add_argument("--estimators", default="ls-linear,lmmse")
    p_base.add_argument("--densities", default=None)

    p_plot = sub.add_parser("plotdata", help="convert sweep CSV to long format")
    p_plot.add_argument("--in", dest="in_path", required=True)
    p_plot.add_argument("--out", dest="out_path", required=True)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "plotdata":
        run_plotdata(args.in_path, args.out_path)
        return 0

    config, _ = _resolve_config(args)
    if args.command == "generate":
        out = run_generate(config, args.out, force=args.force)
        print(f"datasets written to {out}")
    elif args.command == "train":
        densities = _parse_densities(args.densities, config)
        out = run_train(config, args.data, args.out, densities,
                        force=args.force, resume=args.resume)
        print(f"checkpoints written to {out}")
    elif args.command == "evaluate":
        densities = _parse_densities(args.densities, config)
        steps = _parse_steps(args.steps, config)
        estimators = _parse_estimators(args.estimators)
        out = run_evaluate(config, args.data, args.ckpt, args.out, estimators,
                           densities, steps, config.seed, force=args.force,
                           skip_ber=args.skip_ber)
        print(f"evaluation written to {out}")
    elif args.command == "baseline":
        densities = _parse_densities(args.densities, config)
        estimators = _parse_estimators(args.estimators)
        out = run_evaluate(config, args.data, None, args.out, estimators,
                           densities, [], config.seed, force=args.force,
                           skip_ber=True)
        print(f"baseline table written to {out}")
    return 0


def main(argv=None) -> None:
    try:
        sys.exit(run(argv))
    except DiffrxError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
