#!/usr/bin/env python3
"""Collision-penalty sensitivity study: unconstrained training swept over the
penalization coefficient, three seeds each, followed by report generation.

Usage: python scripts/run_beta_study.py [--episodes N] [--out DIR]
"""

import argparse
from dataclasses import replace

from safelayer import cli, config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--episodes", type=int, default=2000)
    parser.add_argument("--betas", type=float, nargs="+", default=[1.0, 5.0, 10.0, 50.0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="runs/beta_study")
    args = parser.parse_args()

    cfg = replace(
        config.default_config(),
        strategies=("UP",),
        beta_colls=tuple(args.betas),
        seeds=tuple(args.seeds),
        episodes=args.episodes,
        out_dir=args.out,
    )
    out = cli.run(cfg)
    cli.report(out)
    print(f"study complete: {out}/report")


if __name__ == "__main__":
    main()
