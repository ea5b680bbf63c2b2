"""Max-return sequence modeling on toy offline-RL environments."""

from .autodiff import Tensor, backward, grad_check
from .data import (DatasetStats, ReturnAugmentedTrajectory, TokenWindow, Trajectory,
                   apply_reward_transform, compute_returns_to_go, load_dataset,
                   normalize_states, sample_window, save_dataset)
from .envs import GridMaze, LineWorld, gen_lineworld_dataset, gen_stitch_dataset
from .expectile import ExpectileConfig, expectile_loss, scalar_expectile_fit
from .checkpoint import load_model, save_model
from .model import ActionDistribution, ModelConfig, ReinformerModel
from .rollout import EvalReport, RolloutRecord, evaluate, naive_max_rollout, reinformer_rollout
from .training import (LambState, TemperatureState, TrainConfig, action_loss,
                       lamb_step, temperature_loss, total_step_loss, train)

__version__ = "0.1.0"
