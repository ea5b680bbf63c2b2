"""The sequence policy: token embeddings, causal decoder, return and action heads.

Each timestep contributes three tokens in the order state, return, action,
all summed with a learned timestep embedding. The return head reads the
decoder output at state-token positions, so the predicted return for step t
depends only on history plus the current state; the action head reads the
return-token positions, so the action additionally sees the return it is
conditioned on. The decoder also produces an output at action-token
positions, which is computed and discarded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import TokenWindow, WindowBatch, stack_windows
from .errors import ConfigError, ContractError

GAUSSIAN = "gaussian"
CATEGORICAL = "categorical"
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    `action_dim` is the dimension of continuous actions for the Gaussian
    head, or the number of discrete actions for the categorical head.
    """

    state_dim: int
    action_dim: int
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_k: int = 5
    action_head_kind: str = GAUSSIAN
    log_std_bounds: tuple[float, float] = (-5.0, 2.0)
    max_timestep: int = 128

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} must be divisible by n_heads {self.n_heads}")
        if self.context_k < 2:
            raise ConfigError(f"context_k must be at least 2, got {self.context_k}")
        if self.action_head_kind not in (GAUSSIAN, CATEGORICAL):
            raise ConfigError(f"unknown action head kind {self.action_head_kind!r}")
        lo, hi = self.log_std_bounds
        if not lo < hi:
            raise ConfigError(f"log_std_bounds must be ordered, got {self.log_std_bounds}")

    @property
    def discrete(self) -> bool:
        return self.action_head_kind == CATEGORICAL


@dataclass
class ActionDistribution:
    """Batched policy output: diagonal Gaussian or categorical.

    Parameter tensors have shape (B, K, action_dim); losses reduce the
    action axis so `nll` and `entropy` return (B, K) tensors.
    """

    kind: str
    mean: ad.Tensor | None = None
    log_std: ad.Tensor | None = None
    logits: ad.Tensor | None = None
    log_probs: ad.Tensor | None = field(default=None, repr=False)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    def nll(self, actions: np.ndarray) -> ad.Tensor:
        """Negative log likelihood of `actions`, reduced over the action axis."""
        if self.kind == GAUSSIAN:
            actions = np.asarray(actions, dtype=np.float64)
            inv_std = ad.exp(ad.mul(self.log_std, ad.Tensor(-1.0)))
            z = ad.mul(ad.sub(ad.Tensor(actions), self.mean), inv_std)
            per_dim = ad.add(ad.add(ad.mul(ad.mul(z, z), ad.Tensor(0.5)), self.log_std),
                             ad.Tensor(0.5 * LOG_2PI))
            return ad.sum_(per_dim, axis=per_dim.ndim - 1)
        ids = np.asarray(actions)
        one_hot = np.zeros(self.logits.shape)
        np.put_along_axis(one_hot, ids[..., None], 1.0, axis=-1)
        picked = ad.sum_(ad.mul(self.log_probs, ad.Tensor(one_hot)), axis=self.log_probs.ndim - 1)
        return ad.mul(picked, ad.Tensor(-1.0))

    def entropy(self) -> ad.Tensor:
        if self.kind == GAUSSIAN:
            per_dim = ad.add(self.log_std, ad.Tensor(0.5 * (LOG_2PI + 1.0)))
            return ad.sum_(per_dim, axis=per_dim.ndim - 1)
        p_logp = ad.mul(ad.exp(self.log_probs), self.log_probs)
        return ad.mul(ad.sum_(p_logp, axis=self.log_probs.ndim - 1), ad.Tensor(-1.0))

    def greedy(self) -> np.ndarray:
        if self.kind == GAUSSIAN:
            return self.mean.data.copy()
        return np.argmax(self.log_probs.data, axis=-1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == GAUSSIAN:
            return self.mean.data + self.std * rng.standard_normal(self.mean.shape)
        probs = self.probs
        flat = probs.reshape(-1, probs.shape[-1])
        draws = np.array([rng.choice(flat.shape[1], p=row / row.sum()) for row in flat])
        return draws.reshape(probs.shape[:-1])

    def at(self, b: int, k: int) -> "ActionDistribution":
        """Single-position view used at inference time."""
        if self.kind == GAUSSIAN:
            return ActionDistribution(GAUSSIAN, mean=self.mean[b, k], log_std=self.log_std[b, k])
        return ActionDistribution(CATEGORICAL, logits=self.logits[b, k],
                                  log_probs=self.log_probs[b, k])


@dataclass
class ContextStep:
    """One completed inference step kept in the rolling context."""

    state: np.ndarray
    conditioned_return: float
    action: np.ndarray | int


class ReinformerModel:
    """Parameter container plus forward/inference entry points."""

    INIT_STD = 0.02

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        h = config.hidden_dim
        p: dict[str, ad.Tensor] = {}

        def linear(name: str, n_in: int, n_out: int, zero: bool = False):
            if zero:
                p[f"{name}.w"] = ad.parameter(np.zeros((n_in, n_out)))
            else:
                p[f"{name}.w"] = ad.parameter(np.empty((n_in, n_out)), rng, self.INIT_STD)
            p[f"{name}.b"] = ad.parameter(np.zeros(n_out))

        def norm(name: str):
            p[f"{name}.g"] = ad.parameter(np.ones(h))
            p[f"{name}.b"] = ad.parameter(np.zeros(h))

        linear("embed_state", config.state_dim, h)
        linear("embed_return", 1, h)
        if config.discrete:
            p["embed_action.table"] = ad.parameter(
                np.empty((config.action_dim, h)), rng, self.INIT_STD)
        else:
            linear("embed_action", config.action_dim, h)
        p["embed_time.table"] = ad.parameter(
            np.empty((config.max_timestep, h)), rng, self.INIT_STD)
        norm("embed_ln")
        for i in range(config.n_layers):
            norm(f"block{i}.ln1")
            for proj in ("wq", "wk", "wv", "wo"):
                p[f"block{i}.attn.{proj}"] = ad.parameter(np.empty((h, h)), rng, self.INIT_STD)
            for bias in ("bq", "bk", "bv", "bo"):
                p[f"block{i}.attn.{bias}"] = ad.parameter(np.zeros(h))
            norm(f"block{i}.ln2")
            linear(f"block{i}.mlp_in", h, 4 * h)
            linear(f"block{i}.mlp_out", 4 * h, h)
        norm("final_ln")
        # Zero-initialized return head: an untrained model predicts exactly 0.
        linear("head_return", h, 1, zero=True)
        if config.discrete:
            linear("head_logits", h, config.action_dim)
        else:
            linear("head_mean", h, config.action_dim)
            linear("head_log_std", h, config.action_dim)
        self.params = p

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.params

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ContractError(f"parameter names do not match: missing {sorted(missing)}, "
                                f"unexpected {sorted(extra)}")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ContractError(f"{name}: shape {arr.shape} does not match {t.shape}")
            t.data = arr.copy()

    def _linear(self, name: str, x: ad.Tensor) -> ad.Tensor:
        return ad.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _norm(self, name: str, x: ad.Tensor) -> ad.Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attention_params(self, i: int) -> ad.AttentionParams:
        p = self.params
        return ad.AttentionParams(
            wq=p[f"block{i}.attn.wq"], bq=p[f"block{i}.attn.bq"],
            wk=p[f"block{i}.attn.wk"], bk=p[f"block{i}.attn.bk"],
            wv=p[f"block{i}.attn.wv"], bv=p[f"block{i}.attn.bv"],
            wo=p[f"block{i}.attn.wo"], bo=p[f"block{i}.attn.bo"])

    # -- forward -------------------------------------------------------------

    def embed_tokens(self, batch: WindowBatch) -> ad.Tensor:
        """Interleave (state, return, action) embeddings: (B, 3K, hidden)."""
        cfg = self.config
        b, k = batch.states.shape[:2]
        if batch.states.shape[2] != cfg.state_dim:
            raise ContractError(f"state dim {batch.states.shape[2]} does not match "
                                f"config {cfg.state_dim}")
        if int(batch.timesteps.max()) >= cfg.max_timestep:
            raise ContractError(f"timestep {int(batch.timesteps.max())} is beyond "
                                f"max_timestep {cfg.max_timestep}")
        h = cfg.hidden_dim
        s_emb = self._linear("embed_state", ad.Tensor(batch.states))
        g_emb = self._linear("embed_return", ad.Tensor(batch.returns[..., None]))
        if cfg.discrete:
            a_emb = ad.embedding_lookup(self.params["embed_action.table"],
                                        np.asarray(batch.actions, dtype=np.int64))
        else:
            a_emb = self._linear("embed_action", ad.Tensor(batch.actions))
        triples = ad.concatenate([ad.reshape(e, (b, k, 1, h)) for e in (s_emb, g_emb, a_emb)],
                                 axis=2)
        time_emb = ad.embedding_lookup(self.params["embed_time.table"], batch.timesteps)
        tokens = ad.add(triples, ad.reshape(time_emb, (b, k, 1, h)))
        return ad.reshape(tokens, (b, 3 * k, h))

    def forward(self, batch: WindowBatch | TokenWindow,
                token_valid: np.ndarray | None = None) -> tuple[ad.Tensor, ActionDistribution]:
        """Return per-step return predictions (B, K) and action distributions.

        `token_valid` (B, 3K) overrides the attention validity of individual
        tokens; by default every token of a valid timestep is visible.
        """
        if isinstance(batch, TokenWindow):
            batch = stack_windows([batch])
        cfg = self.config
        b, k = batch.states.shape[:2]
        if token_valid is None:
            token_valid = np.repeat(batch.valid_mask, 3, axis=1)
        x = self._norm("embed_ln", self.embed_tokens(batch))
        for i in range(cfg.n_layers):
            # group_size=3: a timestep's three tokens always see each other
            # (subject to causal order), even when hidden from later steps.
            attn = ad.causal_self_attention(self._norm(f"block{i}.ln1", x),
                                            self._attention_params(i), cfg.n_heads,
                                            key_valid=token_valid, group_size=3)
            x = ad.add(x, attn)
            mlp = self._linear(f"block{i}.mlp_out",
                               ad.gelu(self._linear(f"block{i}.mlp_in",
                                                    self._norm(f"block{i}.ln2", x))))
            x = ad.add(x, mlp)
        x = self._norm("final_ln", x)

        return_all = self._linear("head_return", x)            # (B, 3K, 1), two thirds unused
        positions = ad.reshape(return_all, (b, k, 3))
        return_pred = positions[:, :, 0]

        per_step = ad.reshape(x, (b, k, 3, cfg.hidden_dim))
        return_token_h = per_step[:, :, 1, :]
        if cfg.discrete:
            logits = self._linear("head_logits", return_token_h)
            dist = ActionDistribution(CATEGORICAL, logits=logits,
                                      log_probs=ad.log_softmax(logits))
        else:
            lo, hi = cfg.log_std_bounds
            dist = ActionDistribution(
                GAUSSIAN,
                mean=self._linear("head_mean", return_token_h),
                log_std=ad.clamp(self._linear("head_log_std", return_token_h), lo, hi))
        return return_pred, dist

    # -- inference -----------------------------------------------------------

    def _inference_batch(self, context: Sequence[ContextStep], state: np.ndarray,
                         t: int, conditioned_return: float | None) -> tuple[WindowBatch, np.ndarray, int]:
        cfg = self.config
        if len(context) > cfg.context_k - 1:
            raise ContractError(f"context of {len(context)} steps exceeds K-1 = {cfg.context_k - 1}; "
                                "keep only the most recent steps")
        if t >= cfg.max_timestep:
            raise ContractError(f"timestep {t} is beyond max_timestep {cfg.max_timestep}")
        k = cfg.context_k
        steps = list(context)
        pad = k - len(steps) - 1

        states = np.zeros((k, cfg.state_dim))
        returns = np.zeros(k)
        timesteps = np.zeros(k, dtype=np.int64)
        valid = np.zeros(k, dtype=bool)
        actions = (np.zeros(k, dtype=np.int64) if cfg.discrete
                   else np.zeros((k, cfg.action_dim)))

        for j, step in enumerate(steps):
            idx = pad + j
            states[idx] = step.state
            returns[idx] = step.conditioned_return
            actions[idx] = step.action
            timesteps[idx] = t - len(steps) + j
            valid[idx] = True
        states[-1] = state
        timesteps[-1] = t
        valid[-1] = True
        if conditioned_return is not None:
            returns[-1] = conditioned_return

        token_valid = np.repeat(valid[None, :], 3, axis=1)
        token_valid[0, 3 * (k - 1) + 1] = conditioned_return is not None
        token_valid[0, 3 * (k - 1) + 2] = False  # current action is never visible
        window = TokenWindow(states, returns, actions, timesteps, valid)
        return stack_windows([window]), token_valid, k - 1

    def predict_return(self, context: Sequence[ContextStep], state: np.ndarray, t: int) -> float:
        """Predicted in-distribution maximum return for the current state."""
        batch, token_valid, last = self._inference_batch(context, state, t, None)
        return_pred, _ = self.forward(batch, token_valid=token_valid)
        return float(return_pred.data[0, last])

    def predict_action(self, context: Sequence[ContextStep], state: np.ndarray, t: int,
                       conditioned_return: float, mode: str = "greedy",
                       rng: np.random.Generator | None = None):
        """Action for the current state conditioned on `conditioned_return`."""
        if mode not in ("greedy", "sample"):
            raise ContractError(f"unknown action mode {mode!r}")
        if mode == "sample" and rng is None:
            raise ContractError("sampling requires an rng")
        batch, token_valid, last = self._inference_batch(context, state, t, conditioned_return)
        _, dist = self.forward(batch, token_valid=token_valid)
        point = dist.at(0, last)
        if mode == "greedy":
            out = point.greedy()
        else:
            out = point.sample(rng)
        if self.config.discrete:
            return int(out)
        return np.asarray(out, dtype=np.float64)
