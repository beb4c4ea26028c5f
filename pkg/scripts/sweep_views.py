#!/usr/bin/env python3
"""Ablation sweeps: view count (1..11) and prompt length.

Config-list expansion: each sweep point runs the full pipeline into its
own subdirectory and emits one report, so the trend can be compared
across points.

    python scripts/sweep_views.py --axis views --values 1,3,5,7,9,11
    python scripts/sweep_views.py --axis prompt-length --values 4,8,12,16
"""

import argparse
import os
from dataclasses import replace

from anomaly3d.config import default_config, parse_config
from anomaly3d.pipeline import run_pipeline


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="base config file")
    parser.add_argument("--axis", choices=("views", "prompt-length"), default="views")
    parser.add_argument("--values", default="1,3,5,7,9,11",
                        help="comma-separated sweep points")
    parser.add_argument("--out-dir", default="runs/sweep")
    args = parser.parse_args()

    base = parse_config(args.config) if args.config else default_config()
    values = [int(v) for v in args.values.split(",") if v.strip()]

    print(f"{'point':>6s}  {'O-R':>6s} {'P-R':>6s} {'P-P':>6s}")
    for value in values:
        cfg = replace(base)
        if args.axis == "views":
            cfg.views = replace(base.views, count=value, angles=None)
        else:
            cfg.loss = replace(base.loss, prompt_length=value)
        cfg.out_dir = os.path.join(args.out_dir, f"{args.axis}-{value}")
        cfg.validate()
        reports = run_pipeline(cfg)
        fused = reports["fused"].as_dict()
        print(f"{value:>6d}  {fused['image_auroc']:6.3f} "
              f"{fused['point_auroc']:6.3f} {fused['point_pro']:6.3f}")


if __name__ == "__main__":
    main()
