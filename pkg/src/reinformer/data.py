"""Trajectory storage, returns-to-go, state normalization, and context windows.

Datasets are lists of `Trajectory`. Windows interleave each timestep as the
token triple (state, return, action) and are left-padded to a fixed length K
with an explicit validity mask; padded slots are zero-filled and must never
reach a loss. Files are JSONL, one trajectory object per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DatasetError

STD_FLOOR = 1e-6


@dataclass
class Trajectory:
    """One episode: T+1 states, T actions, T rewards.

    Actions are a float array (T, action_dim) for continuous control or an
    integer array (T,) of action ids for discrete control.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminated: bool

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions)
        if not np.issubdtype(self.actions.dtype, np.integer):
            self.actions = self.actions.astype(np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.states.ndim != 2:
            raise ContractError(f"states must be (T+1, state_dim), got shape {self.states.shape}")
        t = len(self.rewards)
        if t == 0:
            raise ContractError("trajectory must contain at least one step")
        if len(self.actions) != t or len(self.states) != t + 1:
            raise ContractError(
                f"length mismatch: {len(self.states)} states, {len(self.actions)} actions, {t} rewards")
        for name, arr in (("states", self.states), ("rewards", self.rewards)):
            if not np.isfinite(arr).all():
                raise ContractError(f"non-finite values in {name}")
        if not np.issubdtype(self.actions.dtype, np.integer) and not np.isfinite(self.actions).all():
            raise ContractError("non-finite values in actions")

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def discrete(self) -> bool:
        return np.issubdtype(self.actions.dtype, np.integer)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class ReturnAugmentedTrajectory(Trajectory):
    """Trajectory plus its undiscounted returns-to-go."""

    returns_to_go: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        self.returns_to_go = np.asarray(self.returns_to_go, dtype=np.float64)
        if self.returns_to_go.shape != self.rewards.shape:
            raise ContractError("returns_to_go must align with rewards")


def compute_returns_to_go(traj: Trajectory) -> ReturnAugmentedTrajectory:
    """Backward cumulative sum of rewards, no discounting."""
    g = np.cumsum(traj.rewards[::-1])[::-1].copy()
    return ReturnAugmentedTrajectory(
        states=traj.states, actions=traj.actions, rewards=traj.rewards,
        terminated=traj.terminated, returns_to_go=g)


def apply_reward_transform(traj: Trajectory, scale: float, shift: float) -> Trajectory:
    """Replace every reward r by scale * r + shift.

    Returns-to-go of the result must be recomputed by the caller.
    """
    if scale == 0:
        raise ContractError("reward transform scale must be nonzero")
    return Trajectory(states=traj.states, actions=traj.actions,
                      rewards=scale * traj.rewards + shift, terminated=traj.terminated)


@dataclass
class TokenWindow:
    """A K-step slice of one trajectory, left-padded.

    Token order within a timestep is state, return, action. Padded positions
    are zero-filled and flagged False in `valid_mask`.
    """

    states: np.ndarray      # (K, state_dim)
    returns: np.ndarray     # (K,)
    actions: np.ndarray     # (K, action_dim) or (K,) int
    timesteps: np.ndarray   # (K,) absolute indices
    valid_mask: np.ndarray  # (K,) bool


@dataclass
class WindowBatch:
    """Stacked windows with a leading batch axis."""

    states: np.ndarray      # (B, K, state_dim)
    returns: np.ndarray     # (B, K)
    actions: np.ndarray     # (B, K, action_dim) or (B, K) int
    timesteps: np.ndarray   # (B, K)
    valid_mask: np.ndarray  # (B, K)


def sample_window(traj: ReturnAugmentedTrajectory, t: int, k: int) -> TokenWindow:
    """Window over timesteps max(0, t-k+1)..t with left padding."""
    if k < 2:
        raise ContractError(f"context length must be at least 2, got {k}")
    if not 0 <= t < traj.length:
        raise ContractError(f"timestep {t} outside trajectory of length {traj.length}")
    lo = max(0, t - k + 1)
    n = t - lo + 1
    pad = k - n

    state_dim = traj.states.shape[1]
    states = np.zeros((k, state_dim))
    returns = np.zeros(k)
    timesteps = np.zeros(k, dtype=np.int64)
    valid = np.zeros(k, dtype=bool)
    if traj.discrete:
        actions = np.zeros(k, dtype=np.int64)
    else:
        actions = np.zeros((k, traj.actions.shape[1]))

    states[pad:] = traj.states[lo:t + 1]
    returns[pad:] = traj.returns_to_go[lo:t + 1]
    actions[pad:] = traj.actions[lo:t + 1]
    timesteps[pad:] = np.arange(lo, t + 1)
    valid[pad:] = True
    return TokenWindow(states, returns, actions, timesteps, valid)


def stack_windows(windows: Sequence[TokenWindow]) -> WindowBatch:
    return WindowBatch(
        states=np.stack([w.states for w in windows]),
        returns=np.stack([w.returns for w in windows]),
        actions=np.stack([w.actions for w in windows]),
        timesteps=np.stack([w.timesteps for w in windows]),
        valid_mask=np.stack([w.valid_mask for w in windows]))


@dataclass
class DatasetStats:
    """Normalization statistics and return range frozen from one dataset."""

    state_mean: np.ndarray
    state_std: np.ndarray
    min_dataset_return: float
    max_dataset_return: float
    ref_min_return: float
    ref_max_return: float

    def normalize(self, state: np.ndarray) -> np.ndarray:
        return (np.asarray(state, dtype=np.float64) - self.state_mean) / self.state_std

    @property
    def return_range(self) -> float:
        return self.max_dataset_return - self.min_dataset_return


def dataset_returns(trajectories: Sequence[Trajectory]) -> np.ndarray:
    return np.array([t.episode_return for t in trajectories])


def compute_stats(trajectories: Sequence[Trajectory]) -> DatasetStats:
    if not trajectories:
        raise ContractError("cannot compute statistics of an empty dataset")
    all_states = np.concatenate([t.states for t in trajectories], axis=0)
    mean = all_states.mean(axis=0)
    std = np.maximum(all_states.std(axis=0), STD_FLOOR)
    returns = dataset_returns(trajectories)
    rmin, rmax = float(returns.min()), float(returns.max())
    return DatasetStats(state_mean=mean, state_std=std,
                        min_dataset_return=rmin, max_dataset_return=rmax,
                        ref_min_return=rmin, ref_max_return=rmax)


def normalize_states(trajectories: Sequence[Trajectory]) -> tuple[list[Trajectory], DatasetStats]:
    """Shift/scale every state dimension to zero mean, unit (floored) std."""
    stats = compute_stats(trajectories)
    normalized = [
        replace(t, states=(t.states - stats.state_mean) / stats.state_std)
        for t in trajectories
    ]
    return normalized, stats


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------


def _traj_to_obj(traj: Trajectory) -> dict:
    actions = traj.actions.tolist()
    return {
        "states": traj.states.tolist(),
        "actions": actions,
        "rewards": traj.rewards.tolist(),
        "terminated": bool(traj.terminated),
    }


def save_dataset(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(_traj_to_obj(traj), separators=(",", ":"), allow_nan=False))
            fh.write("\n")


def load_dataset(path) -> list[Trajectory]:
    trajectories = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            try:
                actions = obj["actions"]
                arr = np.asarray(actions)
                if arr.ndim == 1 and all(isinstance(a, int) for a in actions):
                    arr = arr.astype(np.int64)
                traj = Trajectory(states=obj["states"], actions=arr,
                                  rewards=obj["rewards"], terminated=obj["terminated"])
            except (KeyError, ContractError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
            trajectories.append(traj)
    return trajectories


# ---------------------------------------------------------------------------
# Training-side window sampling
# ---------------------------------------------------------------------------


class WindowSampler:
    """Uniform sampling over every (trajectory, timestep) pair.

    Long trajectories contribute proportionally more windows. The dataset is
    read-only after construction, so batches may be drawn concurrently as
    long as each worker brings its own generator.
    """

    def __init__(self, trajectories: Sequence[ReturnAugmentedTrajectory], k: int):
        if not trajectories:
            raise ContractError("sampler needs a nonempty dataset")
        self.trajectories = list(trajectories)
        self.k = k
        self._index = [(i, t) for i, traj in enumerate(self.trajectories)
                       for t in range(traj.length)]

    def __len__(self) -> int:
        return len(self._index)

    def window_at(self, flat_index: int) -> TokenWindow:
        i, t = self._index[flat_index]
        return sample_window(self.trajectories[i], t, self.k)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> WindowBatch:
        picks = rng.integers(0, len(self._index), size=batch_size)
        return stack_windows([self.window_at(p) for p in picks])
