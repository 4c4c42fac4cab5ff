"""Command-line entry point.

One subcommand per pipeline stage plus `study`, `report`, and `run`. Global
flags pick the config file and override its seed, output directory, and
failure handling. Without a config file the desk-scale reactor defaults
apply, so `romopt run --out-dir runs/demo` works on its own.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import (
    PipelineConfig,
    StageFailure,
    STAGES,
    artifact_path,
    parse_config,
    pca_study,
    run_pipeline,
    validate_config,
)

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    # global flags work both before and after the subcommand; SUPPRESS keeps
    # the unset subparser copy from clobbering a value parsed by the parent
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="INI config file (defaults apply without it)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", help="override the output directory")
    common.add_argument(
        "--skip-failures",
        action="store_true",
        help="drop failed full-model evaluations instead of aborting",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="info logging")
    parser = argparse.ArgumentParser(
        prog="romopt",
        description="Reduced-order surrogate optimization pipeline",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("sample", "draw the design set (or ingest the csv dataset)"),
        ("fom", "evaluate the full model at every design"),
        ("pca", "fit the projection basis"),
        ("train", "train the latent network"),
        ("pwa", "fit the piecewise-affine activation curve"),
        ("encode", "write the surrogate MILP in LP and MPS form"),
        ("solve", "optimize the surrogate"),
        ("validate", "evaluate the full model at the surrogate optimum"),
        ("report", "emit the comparison table and profile plots"),
        ("run", "run every stage in order"),
        ("study", "reduction-quality sweep over snapshot counts"),
    ):
        sub.add_parser(name, help=help_text, parents=[common])
    return parser


def _load_config(args) -> PipelineConfig:
    config = getattr(args, "config", None)
    seed = getattr(args, "seed", None)
    out_dir = getattr(args, "out_dir", None)
    skip_failures = getattr(args, "skip_failures", None)
    if config is not None:
        return parse_config(
            config, seed=seed, out_dir=out_dir, skip_failures=skip_failures
        )
    cfg = PipelineConfig()
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = out_dir
    if skip_failures is not None:
        cfg.skip_failures = skip_failures
    validate_config(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load_config(args)
        if args.command == "run":
            report = run_pipeline(cfg)
            print(f"optimum design: {', '.join(f'{v:.6f}' for v in report.d_star)}")
            print(f"surrogate value: {report.surrogate_value:.8f}")
            if report.fom_value == report.fom_value:  # reactor case only
                print(f"full-model value: {report.fom_value:.8f}")
                print(f"reference value: {report.reference:.8f}")
                print(f"relative error: {report.rel_error:.3e}")
            print(f"report: {report.artifacts['run_report']}")
        elif args.command == "study":
            out_path = artifact_path(cfg, "study")
            rows = pca_study(seed=cfg.seed, energy=cfg.energy, out_path=out_path)
            print(f"{'samples':>8} {'k':>3} {'total %':>10} {'max %':>8}")
            for row in rows:
                print(
                    f"{row['samples']:>8} {row['k']:>3} "
                    f"{row['total_error_pct']:>10.2f} {row['max_error_pct']:>8.2f}"
                )
            print(f"table: {out_path}")
        else:
            artifacts = STAGES[args.command](cfg)
            for name, path in sorted(artifacts.items()):
                print(f"{name}: {path}")
    except StageFailure as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
