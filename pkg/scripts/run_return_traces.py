#!/usr/bin/env python3
"""Predicted-return traces on the shifted line world.

Trains with a non-negative reward variant so true returns-to-go decrease
monotonically, then dumps a per-step trace CSV of predicted versus true
remaining returns for plotting.

Usage: python scripts/run_return_traces.py --out runs/traces
"""

import argparse
import os
import sys

import numpy as np

from reinformer.envs import LineWorld, gen_lineworld_dataset
from reinformer.model import ModelConfig, ReinformerModel
from reinformer.rollout import evaluate, write_trace_csv
from reinformer.training import TrainConfig, train


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--episodes", type=int, default=200)
    parser.add_argument("--eval-episodes", type=int, default=20)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--m", type=float, default=0.9)
    parser.add_argument("--reward-shift", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    env = LineWorld(reward_shift=args.reward_shift)
    dataset = gen_lineworld_dataset(env, args.episodes, np.random.default_rng(args.seed))
    config = ModelConfig(state_dim=env.state_dim, action_dim=env.action_dim,
                         max_timestep=env.horizon + 1)
    model = ReinformerModel(config, np.random.default_rng(args.seed))
    result = train(model, dataset, TrainConfig(m=args.m, steps=args.steps, seed=args.seed))

    report, records = evaluate(model, env, result.stats, "reinformer",
                               args.eval_episodes, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    trace = os.path.join(args.out, "traces.csv")
    write_trace_csv(trace, records)
    print(f"mean return {report.mean_return:.2f}; trace written to {trace}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
