#!/usr/bin/env python3
"""End-to-end stitching experiment on the maze.

Generates the offline dataset, trains one model per seed, and compares the
three inference modes side by side: return-head conditioning, naive-max
conditioning at the dataset maximum, and manual conditioning at zero.

Usage: python scripts/run_stitching.py [--seeds 0 1 2] [--steps 2000] [--out runs/stitch]
"""

import argparse
import json
import os
import sys

import numpy as np

from reinformer.envs import GridMaze, gen_stitch_dataset
from reinformer.model import CATEGORICAL, ModelConfig, ReinformerModel
from reinformer.rollout import evaluate
from reinformer.training import TrainConfig, train


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--copies", type=int, default=50)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--m", type=float, default=0.99)
    parser.add_argument("--episodes", type=int, default=100)
    parser.add_argument("--out", default=None, help="optional directory for reports")
    args = parser.parse_args()

    maze = GridMaze()
    dataset = gen_stitch_dataset(maze, args.copies)
    print(f"dataset: {len(dataset)} trajectories, returns "
          f"{sorted(set(t.episode_return for t in dataset))}")

    rows = []
    for seed in args.seeds:
        config = ModelConfig(state_dim=maze.state_dim, action_dim=maze.n_actions,
                             action_head_kind=CATEGORICAL,
                             max_timestep=maze.step_limit + 1)
        model = ReinformerModel(config, np.random.default_rng(seed))
        result = train(model, dataset, TrainConfig(m=args.m, steps=args.steps, seed=seed))
        for mode, g0 in (("reinformer", None), ("naive", 1.0), ("dt", 0.0)):
            report, _ = evaluate(model, maze, result.stats, mode, args.episodes,
                                 seed=seed, g0=g0)
            rows.append({"seed": seed, **report.to_dict()})
            print(f"seed {seed} {mode:>10}: success {report.success_rate:5.2f} "
                  f"mean return {report.mean_return:+.3f}")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "stitching.json"), "w") as fh:
            json.dump(rows, fh, indent=2)
        print(f"wrote {args.out}/stitching.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
