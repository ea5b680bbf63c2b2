"""Expectile regression: the asymmetric return loss and a scalar oracle.

The loss weights squared errors by m when the target exceeds the prediction
and by 1 - m otherwise, so m above one half pulls predictions toward the
largest targets; the fit approaches the in-sample maximum as m approaches 1.
`scalar_expectile_fit` solves the same objective for a constant predictor by
bisection and serves as the independent reference for the learned head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError


@dataclass
class ExpectileConfig:
    """Asymmetry level of the return regression, in the open interval (0, 1)."""

    m: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.m < 1.0:
            raise ConfigError(f"expectile level must lie in (0, 1), got {self.m}")


def expectile_weights(delta: np.ndarray, m: float) -> np.ndarray:
    """|m - 1(delta < 0)| per element; m on underprediction, 1 - m otherwise."""
    return np.where(delta < 0.0, 1.0 - m, m)


def expectile_loss(predicted: ad.Tensor, target: np.ndarray, mask: np.ndarray,
                   m: float) -> ad.Tensor:
    """Masked mean of |m - 1(dg < 0)| * dg**2 with dg = target - predicted.

    Differentiable in `predicted`; the asymmetric weight is a function of the
    sign of dg only, so it is treated as constant in the backward pass (the
    subgradient at dg == 0 is zero either way).
    """
    if not 0.0 < m < 1.0:
        raise ConfigError(f"expectile level must lie in (0, 1), got {m}")
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != predicted.shape or mask.shape != predicted.shape:
        raise ContractError(
            f"shape mismatch: predicted {predicted.shape}, target {target.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("expectile loss over an all-masked batch")
    delta = ad.sub(ad.Tensor(target), predicted)
    weights = expectile_weights(delta.data, m) * mask
    weighted_sq = ad.mul(ad.Tensor(weights), ad.mul(delta, delta))
    return ad.mul(ad.sum_(weighted_sq), ad.Tensor(1.0 / count))


def scalar_expectile_fit(values: Sequence[float], m: float, tol: float = 1e-9) -> float:
    """Constant minimizer of the expectile objective, found by bisection.

    The first-order condition m * sum_{v > g}(v - g) = (1 - m) * sum_{v <= g}(g - v)
    is monotone in g and bracketed by [min(values), max(values)], so bisection
    converges unconditionally to within `tol`.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractError("expectile fit needs at least one value")
    if not 0.0 < m < 1.0:
        raise ConfigError(f"expectile level must lie in (0, 1), got {m}")
    if tol <= 0:
        raise ContractError(f"tolerance must be positive, got {tol}")

    lo = float(values.min())
    hi = float(values.max())
    if hi - lo <= tol:
        return 0.5 * (lo + hi)

    def balance(g: float) -> float:
        above = values[values > g]
        below = values[values <= g]
        return m * float((above - g).sum()) - (1.0 - m) * float((g - below).sum())

    # balance() is decreasing in g, nonnegative at lo and nonpositive at hi.
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if balance(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
