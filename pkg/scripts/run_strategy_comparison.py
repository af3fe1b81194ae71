#!/usr/bin/env python3
"""Policy-update strategy comparison (unconstrained baseline plus the three
constrained variants) at a fixed collision penalty, three seeds each.

Usage: python scripts/run_strategy_comparison.py [--episodes N] [--out DIR]
"""

import argparse
from dataclasses import replace

from safelayer import cli, config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--episodes", type=int, default=2000)
    parser.add_argument("--strategies", nargs="+", default=["up", "cp", "cc", "cpc"])
    parser.add_argument("--beta-coll", type=float, default=10.0)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="runs/strategy_comparison")
    args = parser.parse_args()

    cfg = replace(
        config.default_config(),
        strategies=tuple(s.upper() for s in args.strategies),
        beta_colls=(args.beta_coll,),
        seeds=tuple(args.seeds),
        episodes=args.episodes,
        out_dir=args.out,
    )
    out = cli.run(cfg)
    cli.report(out)
    print(f"comparison complete: {out}/report")


if __name__ == "__main__":
    main()
