"""Command-line surface.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import RunConfig, default_config, parse_config
from .errors import (Anomaly3dError, CacheFormatError, ConfigError,
                     MissingArtifactError, NumericalOverflowError)

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = parse_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg.validate()


def _gradcheck(seed: int) -> int:
    """Quick finite-difference sweep over every training loss."""
    from .testsupport import gradient_suite

    worst = gradient_suite(instances=5, seed=seed)
    failed = {name: err for name, err in worst.items() if err >= 1e-4}
    for name in sorted(worst):
        status = "ok" if name not in failed else "FAIL"
        print(f"{name}: max rel err {worst[name]:.3e} [{status}]")
    return 0 if not failed else EXIT_NUMERICAL


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="anomaly3d",
        description="Zero-shot 3D anomaly detection pipeline (desk scale)")
    parser.add_argument("--config", help="line-oriented config file")
    parser.add_argument("--seed", type=int, help="override run seed")
    parser.add_argument("--out-dir", help="override output directory")
    parser.add_argument("--threads", type=int, help="parallelism for render/encode")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-synth", help="generate the synthetic dataset")
    sub.add_parser("render", help="render point clouds to view bundles")
    sub.add_parser("encode", help="encode views into feature caches")
    p = sub.add_parser("train-align", help="stage 1: train the feature aligner")
    p.add_argument("--out", help="checkpoint path (default: ckpts/stage1.a3ck)")
    p = sub.add_parser("train-prompt", help="stage 2: train the prompt bank")
    p.add_argument("--aligner", help="stage-1 checkpoint path")
    p.add_argument("--out", help="checkpoint path (default: ckpts/stage2.a3ck)")
    sub.add_parser("infer", help="score the test split")
    sub.add_parser("eval", help="compute metrics and write the report")
    sub.add_parser("pipeline", help="run every stage in order")
    p = sub.add_parser("bench", help="timing harness (batch size 1)")
    p.add_argument("--repeats", type=int, default=30)
    sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p = sub.add_parser("export-weights", help="export per-view SCR weight maps")
    p.add_argument("--sample", help="train sample name (default: first)")
    p.add_argument("--out", help="output directory")

    args = parser.parse_args(argv)
    try:
        if args.command == "gradcheck":
            return _gradcheck(args.seed if args.seed is not None else 0)
        cfg = _load_config(args)
        if args.command == "gen-synth":
            pipeline.stage_gen(cfg)
        elif args.command == "render":
            pipeline.stage_render(cfg)
        elif args.command == "encode":
            pipeline.stage_encode(cfg)
        elif args.command == "train-align":
            print(pipeline.stage_align(cfg, out_path=args.out))
        elif args.command == "train-prompt":
            print(pipeline.stage_prompt(cfg, aligner_path=args.aligner,
                                        out_path=args.out))
        elif args.command == "infer":
            pipeline.stage_infer(cfg)
        elif args.command == "eval":
            reports = pipeline.stage_eval(cfg)
            for mode in sorted(reports):
                vals = reports[mode].as_dict()
                print(f"{mode}: " + "  ".join(f"{k}={v:.4f}" for k, v in vals.items()))
        elif args.command == "pipeline":
            pipeline.run_pipeline(cfg)
        elif args.command == "bench":
            report = pipeline.bench(cfg, repeats=args.repeats)
            for k, v in report.items():
                print(f"{k}: {v:.6f}")
        elif args.command == "export-weights":
            for path in pipeline.export_scr_weights(cfg, args.sample, args.out):
                print(path)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalOverflowError, CacheFormatError) as exc:
        print(f"numerical/container failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Anomaly3dError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
