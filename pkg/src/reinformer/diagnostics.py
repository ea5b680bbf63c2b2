"""Finite-difference verification of every backward rule and both losses.

Each check pairs a scalar-valued function with a probe tensor; `run_gradcheck`
compares analytic gradients against central differences and reports the worst
relative error per check. The registry is data so tests can inject broken
rules and assert that the harness catches them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .expectile import expectile_loss
from .model import GAUSSIAN, CATEGORICAL, ActionDistribution

GRADCHECK_TOLERANCE = 1e-4


@dataclass
class GradCheck:
    name: str
    func: Callable[[ad.Tensor], ad.Tensor]
    probe: np.ndarray


@dataclass
class GradCheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < GRADCHECK_TOLERANCE


def _gaussian_dist(x: ad.Tensor) -> ActionDistribution:
    # First half of the probe feeds the mean, second half the log std.
    half = x.shape[-1] // 2
    return ActionDistribution(GAUSSIAN, mean=x[..., :half],
                              log_std=ad.clamp(x[..., half:], -5.0, 2.0))


def default_checks(rng: np.random.Generator) -> list[GradCheck]:
    v = rng.normal(size=(3, 4))
    other = ad.Tensor(rng.normal(size=(3, 4)))
    mat = ad.Tensor(rng.normal(size=(4, 5)))
    gain = ad.Tensor(rng.normal(size=4) * 0.5 + 1.0)
    bias = ad.Tensor(rng.normal(size=4) * 0.1)
    ids = rng.integers(0, 3, size=6)
    row_weights = ad.Tensor(rng.normal(size=4))
    col_weights = ad.Tensor([1.0, -2.0, 0.5])
    lookup_weights = ad.Tensor(rng.normal(size=(6, 4)))

    attn_dim, attn_t = 8, 5
    attn_params = ad.AttentionParams(*[
        ad.Tensor(rng.normal(size=(attn_dim, attn_dim)) * 0.2) if name.startswith("w")
        else ad.Tensor(rng.normal(size=attn_dim) * 0.1)
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")])
    attn_valid = np.array([False, True, True, True, True])
    attn_readout = ad.Tensor(rng.normal(size=(attn_t, attn_dim)))

    # Loss probes stay away from the expectile kink and the clamp corners.
    exp_target = rng.normal(size=(2, 5))
    exp_mask = np.array([[True, True, False, True, True],
                         [True, False, True, True, True]])
    exp_probe = exp_target + np.where(rng.random(size=(2, 5)) < 0.5, -1.0, 1.0) \
        * rng.uniform(0.2, 1.0, size=(2, 5))

    gauss_actions = rng.normal(size=(2, 3, 2))
    cat_ids = rng.integers(0, 4, size=(2, 3))
    mask23 = np.array([[True, True, False], [True, True, True]])

    def masked_mean(t: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
        w = ad.Tensor(mask.astype(np.float64) / mask.sum())
        return ad.sum_(ad.mul(t, w))

    checks = [
        GradCheck("add", lambda x: ad.sum_(ad.mul(ad.add(x, other), other)), v),
        GradCheck("sub", lambda x: ad.sum_(ad.mul(ad.sub(x, other), other)), v),
        GradCheck("multiply", lambda x: ad.sum_(ad.mul(ad.mul(x, other), other)), v),
        GradCheck("matmul", lambda x: ad.sum_(ad.mul(ad.matmul(x, mat), ad.matmul(x, mat))), v),
        GradCheck("reshape", lambda x: ad.sum_(ad.mul(ad.reshape(x, (4, 3)),
                                                      ad.reshape(other, (4, 3)))), v),
        GradCheck("transpose", lambda x: ad.sum_(ad.mul(ad.transpose(x, (1, 0)),
                                                        ad.transpose(other, (1, 0)))), v),
        GradCheck("concatenate", lambda x: ad.sum_(ad.mul(
            ad.concatenate([x, ad.mul(x, other)], axis=1),
            ad.concatenate([other, other], axis=1))), v),
        GradCheck("slice", lambda x: ad.sum_(ad.mul(x[1:, :2], x[1:, :2])), v),
        GradCheck("sum", lambda x: ad.sum_(ad.mul(ad.sum_(x, axis=0), row_weights)), v),
        GradCheck("mean", lambda x: ad.sum_(ad.mul(ad.mean(x, axis=1), col_weights)), v),
        GradCheck("exp", lambda x: ad.sum_(ad.mul(ad.exp(x), other)), v * 0.3),
        GradCheck("log", lambda x: ad.sum_(ad.mul(ad.log(x), other)), np.abs(v) + 0.5),
        GradCheck("tanh", lambda x: ad.sum_(ad.mul(ad.tanh(x), other)), v),
        GradCheck("relu", lambda x: ad.sum_(ad.mul(ad.relu(x), other)),
                  np.where(np.abs(v) < 0.05, 0.5, v)),
        GradCheck("gelu", lambda x: ad.sum_(ad.mul(ad.gelu(x), other)), v),
        GradCheck("clamp", lambda x: ad.sum_(ad.mul(ad.clamp(x, -1.0, 1.0), other)),
                  np.where(np.abs(np.abs(v) - 1.0) < 0.05, 0.0, v)),
        GradCheck("softmax", lambda x: ad.sum_(ad.mul(ad.softmax(x), other)), v),
        GradCheck("log_softmax", lambda x: ad.sum_(ad.mul(ad.log_softmax(x), other)), v),
        GradCheck("embedding_lookup",
                  lambda x: ad.sum_(ad.mul(ad.embedding_lookup(x, ids), lookup_weights)), v),
        GradCheck("layer_norm", lambda x: ad.sum_(ad.mul(ad.layer_norm(x, gain, bias), other)), v),
        GradCheck("causal_self_attention",
                  lambda x: ad.sum_(ad.mul(
                      ad.causal_self_attention(x, attn_params, 2, key_valid=attn_valid),
                      attn_readout)),
                  rng.normal(size=(attn_t, attn_dim))),
        GradCheck("expectile_loss_m0.5",
                  lambda x: expectile_loss(x, exp_target, exp_mask, 0.5), exp_probe),
        GradCheck("expectile_loss_m0.9",
                  lambda x: expectile_loss(x, exp_target, exp_mask, 0.9), exp_probe),
        GradCheck("expectile_loss_m0.99",
                  lambda x: expectile_loss(x, exp_target, exp_mask, 0.99), exp_probe),
        GradCheck("gaussian_nll",
                  lambda x: masked_mean(_gaussian_dist(x).nll(gauss_actions), mask23),
                  rng.normal(size=(2, 3, 4)) * 0.5),
        GradCheck("gaussian_entropy",
                  lambda x: masked_mean(_gaussian_dist(x).entropy(), mask23),
                  rng.normal(size=(2, 3, 4)) * 0.5),
        GradCheck("categorical_nll",
                  lambda x: masked_mean(
                      ActionDistribution(CATEGORICAL, logits=x,
                                         log_probs=ad.log_softmax(x)).nll(cat_ids), mask23),
                  rng.normal(size=(2, 3, 4))),
        GradCheck("categorical_entropy",
                  lambda x: masked_mean(
                      ActionDistribution(CATEGORICAL, logits=x,
                                         log_probs=ad.log_softmax(x)).entropy(), mask23),
                  rng.normal(size=(2, 3, 4))),
    ]
    return checks


def run_gradcheck(seed: int = 0, checks: list[GradCheck] | None = None,
                  h: float = 1e-5) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    if checks is None:
        checks = default_checks(rng)
    return [GradCheckResult(c.name, ad.grad_check(c.func, ad.Tensor(c.probe), h=h))
            for c in checks]
