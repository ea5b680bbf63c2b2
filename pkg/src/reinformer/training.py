"""Combined training objective, adaptive entropy temperature, LAMB, train loop.

The step loss is the masked-mean action term (negative log likelihood minus
the entropy bonus, temperature held constant) plus the expectile return term
with equal weight. The temperature is a separate learned scalar driven by
its own loss toward the entropy target; entropy enters that loss detached,
so temperature gradients never touch the policy and policy gradients never
touch the temperature.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import save_model
from .data import (DatasetStats, Trajectory, WindowBatch, compute_returns_to_go,
                   normalize_states, WindowSampler)
from .errors import ConfigError, ContractError, NumericsError
from .expectile import expectile_loss
from .model import ActionDistribution, ModelConfig, ReinformerModel

METRIC_COLUMNS = ("step", "total_loss", "action_loss", "return_loss", "lambda", "entropy")


@dataclass
class TemperatureState:
    """Learned log temperature and the entropy target it chases."""

    beta: float
    log_lambda: ad.Tensor = field(default=None)

    def __post_init__(self):
        if self.log_lambda is None:
            self.log_lambda = ad.parameter(np.array(math.log(0.1)))

    @property
    def value(self) -> float:
        return float(np.exp(self.log_lambda.data))


def default_entropy_target(config: ModelConfig, discrete_fraction: float = 0.5) -> float:
    """Negative action dimension, or a fraction of the max discrete entropy."""
    if config.discrete:
        return discrete_fraction * math.log(config.action_dim)
    return -float(config.action_dim)


@dataclass
class TrainConfig:
    m: float = 0.99
    learning_rate: float = 1e-3
    steps: int = 2000
    batch_size: int = 64
    seed: int = 0
    grad_clip: float | None = 0.25
    eval_interval: int = 500
    weight_decay: float = 0.0
    beta: float | None = None       # entropy target; None = head-specific default
    init_lambda: float = 0.1
    context_dropout: float = 0.5    # P(hide a history token from later steps)

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if not 0.0 < self.m < 1.0:
            raise ConfigError(f"expectile level must lie in (0, 1), got {self.m}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.context_dropout < 1.0:
            raise ConfigError(f"context_dropout must lie in [0, 1), got {self.context_dropout}")


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def masked_mean(values: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("masked mean over an all-masked batch")
    return ad.mul(ad.sum_(ad.mul(values, ad.Tensor(mask.astype(np.float64)))),
                  ad.Tensor(1.0 / count))


def action_loss(dist: ActionDistribution, actions: np.ndarray, mask: np.ndarray,
                temperature: float) -> ad.Tensor:
    """Masked mean of NLL - temperature * entropy; temperature is a constant here."""
    per_step = ad.sub(dist.nll(actions), ad.mul(dist.entropy(), ad.Tensor(temperature)))
    return masked_mean(per_step, mask)


def temperature_loss(entropy: float, temp: TemperatureState) -> ad.Tensor:
    """lambda * (entropy - beta) with entropy detached.

    Gradient descent on this in log space raises the temperature while the
    policy entropy is below target and lowers it above, which is the stable
    direction for the entropy-tracking fixed point.
    """
    lam = ad.exp(temp.log_lambda)
    return ad.mul(lam, ad.Tensor(float(entropy) - temp.beta))


def total_step_loss(action_term: ad.Tensor, return_term: ad.Tensor) -> ad.Tensor:
    """Equal-weight sum of the two objectives."""
    return ad.add(action_term, return_term)


# ---------------------------------------------------------------------------
# LAMB optimizer
# ---------------------------------------------------------------------------


@dataclass
class LambState:
    """Per-parameter Adam moments plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, name: str, shape) -> None:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)


TRUST_RATIO_MAX = 10.0


def lamb_step(params: dict[str, ad.Tensor], state: LambState, lr: float) -> None:
    """One layerwise-adaptive update over every parameter with a gradient.

    Adam moments with bias correction produce the raw update; each tensor is
    then rescaled by the trust ratio ||w|| / ||update + wd * w||, clamped to
    [0, 10] and replaced by 1 when either norm is zero.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        g = param.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient in {name}; optimizer step aborted")
        state.ensure(name, param.shape)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * param.data
        w_norm = float(np.sqrt((param.data * param.data).sum()))
        u_norm = float(np.sqrt((update * update).sum()))
        if w_norm == 0.0 or u_norm == 0.0:
            ratio = 1.0
        else:
            ratio = min(w_norm / u_norm, TRUST_RATIO_MAX)
        param.data = param.data - lr * ratio * update


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ReinformerModel
    stats: DatasetStats
    metrics: list[dict]
    temperature: TemperatureState
    aborted: bool = False


def _optimizer_extras(opt: LambState, temp: TemperatureState, step: int) -> dict[str, np.ndarray]:
    extras = {"train.step": np.array(float(step)),
              "temp.log_lambda": temp.log_lambda.data,
              "opt.step": np.array(float(opt.step))}
    for name, arr in opt.m.items():
        extras[f"opt.m.{name}"] = arr
        extras[f"opt.v.{name}"] = opt.v[name]
    return extras


def restore_training_extras(extras: dict[str, np.ndarray], opt: LambState,
                            temp: TemperatureState) -> int:
    """Load optimizer/temperature state saved by `train`; returns the saved step."""
    temp.log_lambda.data = np.asarray(extras["temp.log_lambda"], dtype=np.float64).copy()
    opt.step = int(float(extras["opt.step"]))
    for key, arr in extras.items():
        if key.startswith("opt.m."):
            opt.m[key[len("opt.m."):]] = arr.copy()
        elif key.startswith("opt.v."):
            opt.v[key[len("opt.v."):]] = arr.copy()
    return int(float(extras["train.step"]))


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in METRIC_COLUMNS) + "\n")


def train(model: ReinformerModel, trajectories: list[Trajectory], cfg: TrainConfig,
          out_dir=None, resume_extras: dict[str, np.ndarray] | None = None,
          loss_mode: str = "both") -> TrainResult:
    """Optimize the model on an offline dataset.

    States are normalized with dataset statistics that are frozen into every
    checkpoint. Batches are drawn uniformly over (trajectory, timestep).
    `loss_mode` restricts the objective to "action" or "return" for
    diagnostics; the standard mode is "both". A non-finite loss aborts
    training and leaves the last interval checkpoint on disk.
    """
    if not trajectories:
        raise ContractError("training needs a nonempty dataset")
    if loss_mode not in ("both", "action", "return"):
        raise ConfigError(f"unknown loss mode {loss_mode!r}")
    rng = np.random.default_rng(cfg.seed)
    normalized, stats = normalize_states(trajectories)
    sampler = WindowSampler([compute_returns_to_go(t) for t in normalized],
                            model.config.context_k)

    beta = cfg.beta if cfg.beta is not None else default_entropy_target(model.config)
    temp = TemperatureState(beta=beta, log_lambda=ad.parameter(np.array(math.log(cfg.init_lambda))))
    opt = LambState(weight_decay=cfg.weight_decay)
    params = dict(model.parameters())
    params["temperature.log_lambda"] = temp.log_lambda

    start_step = 0
    if resume_extras:
        start_step = restore_training_extras(resume_extras, opt, temp)

    def save_at(step: int) -> None:
        if out_dir is None:
            return
        path = os.path.join(out_dir, f"checkpoint_{step:06d}.rfmr")
        save_model(path, model, stats, _optimizer_extras(opt, temp, step))

    metrics: list[dict] = []
    aborted = False
    for step in range(start_step + 1, start_step + cfg.steps + 1):
        batch = sampler.sample_batch(rng, cfg.batch_size)
        token_valid = np.repeat(batch.valid_mask, 3, axis=1)
        if cfg.context_dropout > 0.0:
            # Hide random tokens from other timesteps; each step always sees
            # its own three tokens, and losses still cover every real step.
            token_valid = token_valid & (rng.random(token_valid.shape) >= cfg.context_dropout)
        return_pred, dist = model.forward(batch, token_valid=token_valid)
        terms = {}
        if loss_mode in ("both", "return"):
            terms["return"] = expectile_loss(return_pred, batch.returns, batch.valid_mask, cfg.m)
        if loss_mode in ("both", "action"):
            terms["action"] = action_loss(dist, batch.actions, batch.valid_mask, temp.value)
        if loss_mode == "both":
            loss = total_step_loss(terms["action"], terms["return"])
        else:
            loss = next(iter(terms.values()))

        entropy_value = float(masked_mean(dist.entropy(), batch.valid_mask).data)
        if not np.isfinite(loss.data) or not math.isfinite(entropy_value):
            aborted = True
            break
        temp_term = temperature_loss(entropy_value, temp)
        objective = ad.add(loss, temp_term)

        ad.zero_grads(params.values())
        ad.backward(objective)
        if cfg.grad_clip is not None:
            ad.clip_grads_(params.values(), cfg.grad_clip)
        lamb_step(params, opt, cfg.learning_rate)

        metrics.append({
            "step": step,
            "total_loss": float(loss.data),
            "action_loss": float(terms["action"].data) if "action" in terms else 0.0,
            "return_loss": float(terms["return"].data) if "return" in terms else 0.0,
            "lambda": temp.value,
            "entropy": entropy_value,
        })
        if step % cfg.eval_interval == 0:
            save_at(step)

    final_step = start_step + cfg.steps
    if out_dir is not None:
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics)
        if not aborted:
            save_model(os.path.join(out_dir, "model_final.rfmr"), model, stats,
                       _optimizer_extras(opt, temp, final_step))
    if aborted:
        raise NumericsError(f"non-finite loss at step {len(metrics) + start_step + 1}; "
                            "training aborted, last interval checkpoint retained")
    return TrainResult(model=model, stats=stats, metrics=metrics, temperature=temp)
