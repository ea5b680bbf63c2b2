#!/usr/bin/env python3
"""Expectile-level ablation on the maze via the CLI surface.

Generates a dataset, then runs the ablate-m subcommand and prints its
summary. A thin wrapper so the sweep is one command.

Usage: python scripts/run_m_ablation.py --out runs/ablation [--m-list 0.5,0.9,0.99]
"""

import argparse
import os
import sys

from reinformer.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--m-list", default="0.5,0.7,0.9,0.99,0.999")
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--episodes", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    data = os.path.join(args.out, "maze.jsonl")
    code = cli_main(["gen-data", "--env", "maze", "--out", data,
                     "--copies", "50", "--seed", str(args.seed)])
    if code != 0:
        return code
    code = cli_main(["ablate-m", "--data", data, "--out", args.out,
                     "--m-list", args.m_list, "--steps", str(args.steps),
                     "--episodes", str(args.episodes), "--seed", str(args.seed)])
    if code != 0:
        return code
    print(open(os.path.join(args.out, "summary.csv")).read())
    return 0


if __name__ == "__main__":
    sys.exit(main())
