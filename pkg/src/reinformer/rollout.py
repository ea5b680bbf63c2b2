"""Inference pipelines, evaluation aggregation, and predicted-return traces.

Three ways to fill the return slot the action head conditions on:

* "reinformer": the model re-predicts its in-distribution maximum return
  from the current context at every step; environment rewards never enter
  the pipeline.
* "naive": a fixed initial target (by default the dataset maximum return)
  decremented by observed rewards.
* "dt": same decrement rule with a caller-chosen initial target.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import DatasetStats
from .errors import ContractError
from .model import ContextStep, ReinformerModel

MODES = ("reinformer", "naive", "dt")

TRACE_COLUMNS = ("episode", "t", "predicted_g", "conditioned_g", "reward",
                 "remaining_true_return")


@dataclass
class RolloutRecord:
    """Per-step log of one evaluation episode."""

    states: list = field(default_factory=list)
    predicted_g: list = field(default_factory=list)     # None when the head is unused
    conditioned_g: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    success: bool = False

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(sum(self.rewards))

    def remaining_true_return(self, t: int) -> float:
        return float(sum(self.rewards[t:]))


@dataclass
class EvalReport:
    n_episodes: int
    mean_return: float
    std_return: float
    success_rate: float
    success_rate_std: float
    normalized_score: float
    mode: str

    def to_dict(self) -> dict:
        return dict(n_episodes=self.n_episodes, mean_return=self.mean_return,
                    std_return=self.std_return, success_rate=self.success_rate,
                    success_rate_std=self.success_rate_std,
                    normalized_score=self.normalized_score, mode=self.mode)


def _run_episode(model: ReinformerModel, env, stats: DatasetStats, greedy: bool,
                 rng: np.random.Generator | None, conditioner: Callable) -> RolloutRecord:
    """Shared pipeline: normalize state, choose the conditioning return, act.

    `conditioner(context, rewards_so_far, t, normalized_state)` returns the
    pair (predicted return or None, return value to condition on). At most
    K-1 completed steps are retained in the context, oldest dropped first;
    their return slots hold the values that were actually conditioned on.
    """
    record = RolloutRecord()
    context: deque[ContextStep] = deque(maxlen=model.config.context_k - 1)
    state = env.reset(rng=rng)
    t = 0
    mode = "greedy" if greedy else "sample"
    while not env.done:
        norm_state = stats.normalize(state)
        context_view = list(context)
        predicted, conditioned = conditioner(context_view, record.rewards, t, norm_state)
        action = model.predict_action(context_view, norm_state, t, conditioned,
                                      mode=mode, rng=rng)
        step = env.step(action)
        context.append(ContextStep(norm_state, conditioned, action))
        record.states.append(np.asarray(state, dtype=np.float64))
        record.predicted_g.append(predicted)
        record.conditioned_g.append(conditioned)
        record.actions.append(action)
        record.rewards.append(step.reward)
        state = step.next_state
        t += 1
    record.success = bool(getattr(env, "succeeded", False))
    return record


def reinformer_rollout(model: ReinformerModel, env, stats: DatasetStats,
                       greedy: bool = True, rng: np.random.Generator | None = None,
                       predict_return_fn: Callable[[list, np.ndarray, int], float] | None = None,
                       ) -> RolloutRecord:
    """Re-predict the maximum return each step and condition the action on it.

    The conditioning value is never decremented and environment rewards are
    not consumed. `predict_return_fn(context, normalized_state, t)`
    substitutes the return head when given (used by pipeline-equivalence
    tests and diagnostics).
    """

    def conditioner(context, _rewards, t, norm_state):
        if predict_return_fn is None:
            g = model.predict_return(context, norm_state, t)
        else:
            g = float(predict_return_fn(context, norm_state, t))
        return g, g

    return _run_episode(model, env, stats, greedy, rng, conditioner)


def naive_max_rollout(model: ReinformerModel, env, stats: DatasetStats, g0: float,
                      greedy: bool = True, rng: np.random.Generator | None = None,
                      ) -> RolloutRecord:
    """Condition on g0 minus the rewards observed so far; the return head is unused."""

    def conditioner(_context, rewards, _t, _norm_state):
        return None, float(g0) - float(sum(rewards))

    return _run_episode(model, env, stats, greedy, rng, conditioner)


def evaluate(model: ReinformerModel, env, stats: DatasetStats, mode: str,
             n_episodes: int, seed: int = 0, g0: float | None = None,
             greedy: bool = True) -> tuple[EvalReport, list[RolloutRecord]]:
    """Roll `n_episodes` independent episodes and aggregate them.

    Episode i uses its own generator seeded by (seed, i), so results do not
    depend on scheduling and are reproducible per episode index.
    """
    if mode not in MODES:
        raise ContractError(f"unknown inference mode {mode!r}")
    if n_episodes < 1:
        raise ContractError(f"need at least one episode, got {n_episodes}")
    if mode == "naive" and g0 is None:
        g0 = stats.max_dataset_return
    if mode == "dt" and g0 is None:
        raise ContractError("dt mode requires an explicit initial return")

    records = []
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, ep])
        if mode == "reinformer":
            records.append(reinformer_rollout(model, env, stats, greedy=greedy, rng=rng))
        else:
            records.append(naive_max_rollout(model, env, stats, g0, greedy=greedy, rng=rng))

    returns = np.array([r.episode_return for r in records])
    successes = np.array([r.success for r in records], dtype=np.float64)
    p = float(successes.mean())
    ref_lo, ref_hi = stats.ref_min_return, stats.ref_max_return
    if ref_hi > ref_lo:
        score = 100.0 * (float(returns.mean()) - ref_lo) / (ref_hi - ref_lo)
    else:
        score = 0.0
    report = EvalReport(
        n_episodes=n_episodes,
        mean_return=float(returns.mean()),
        std_return=float(returns.std()),
        success_rate=p,
        success_rate_std=math.sqrt(p * (1.0 - p) / n_episodes),
        normalized_score=score,
        mode=mode)
    return report, records


def trace_rows(records: Sequence[RolloutRecord]) -> list[tuple]:
    rows = []
    for ep, record in enumerate(records):
        for t in range(record.length):
            rows.append((ep, t, record.predicted_g[t], record.conditioned_g[t],
                         record.rewards[t], record.remaining_true_return(t)))
    return rows


def write_trace_csv(path, records: Sequence[RolloutRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in trace_rows(records):
            fh.write(",".join("" if v is None else repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")
