"""Expectile loss and the bisection oracle, including the limit behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reinformer import autodiff as ad
from reinformer.errors import ConfigError, ContractError
from reinformer.expectile import (ExpectileConfig, expectile_loss, expectile_weights,
                                  scalar_expectile_fit)

ALL_VALID = np.array([True, True])


def test_loss_hand_example():
    loss = expectile_loss(ad.Tensor([0.5, 0.5]), np.array([1.0, 0.0]), ALL_VALID, m=0.9)
    assert loss.item() == pytest.approx(0.125, abs=1e-12)


def test_loss_zero_at_perfect_prediction():
    loss = expectile_loss(ad.Tensor([1.0, -2.0]), np.array([1.0, -2.0]), ALL_VALID, m=0.7)
    assert loss.item() == 0.0


def test_loss_half_mse_at_m_half():
    rng = np.random.default_rng(0)
    pred, target = rng.normal(size=6), rng.normal(size=6)
    loss = expectile_loss(ad.Tensor(pred), target, np.ones(6, bool), m=0.5)
    assert loss.item() == pytest.approx(0.5 * np.mean((target - pred) ** 2), abs=1e-12)


def test_loss_masking_ignores_invalid_entries():
    pred = ad.Tensor([0.0, 123.0])
    loss = expectile_loss(pred, np.array([1.0, -999.0]), np.array([True, False]), m=0.9)
    assert loss.item() == pytest.approx(0.9 * 1.0, abs=1e-12)


def test_loss_all_masked_rejected():
    with pytest.raises(ContractError):
        expectile_loss(ad.Tensor([0.0]), np.array([1.0]), np.array([False]), m=0.9)


def test_loss_asymmetry_factor_exact():
    for m in (0.7, 0.9, 0.99):
        up = expectile_loss(ad.Tensor([0.0]), np.array([0.5]), np.array([True]), m=m)
        down = expectile_loss(ad.Tensor([1.0]), np.array([0.5]), np.array([True]), m=m)
        assert up.item() / down.item() == pytest.approx(m / (1 - m), rel=1e-12)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    target = rng.normal(size=(2, 4))
    mask = np.array([[True, False, True, True], [True, True, True, False]])
    # Probe away from the kink: keep |delta| bounded below.
    probe = target + np.where(rng.random((2, 4)) < 0.5, -1.0, 1.0) * rng.uniform(0.3, 1.0, (2, 4))
    for m in (0.5, 0.9, 0.99):
        err = ad.grad_check(lambda x: expectile_loss(x, target, mask, m),
                            ad.Tensor(probe), h=1e-5)
        assert err < 1e-4, f"m={m}: {err}"


def test_loss_subgradient_zero_at_kink():
    pred = ad.parameter([1.0])
    loss = expectile_loss(pred, np.array([1.0]), np.array([True]), m=0.9)
    ad.backward(loss)
    np.testing.assert_array_equal(pred.grad, [0.0])


def test_weights_definition():
    np.testing.assert_array_equal(expectile_weights(np.array([1.0, -1.0, 0.0]), 0.9),
                                  [0.9, 1.0 - 0.9, 0.9])


def test_config_validation():
    ExpectileConfig(0.5)
    with pytest.raises(ConfigError):
        ExpectileConfig(0.0)
    with pytest.raises(ConfigError):
        ExpectileConfig(1.0)


# ---------------------------------------------------------------------------
# scalar oracle
# ---------------------------------------------------------------------------


def test_fit_mean_at_half():
    assert scalar_expectile_fit([0.0, 1.0], 0.5, tol=1e-10) == pytest.approx(0.5, abs=1e-9)


def test_fit_closed_form_two_points():
    # For values {0, 1}: m * (1 - g) = (1 - m) * g, so g = m.
    assert scalar_expectile_fit([0.0, 1.0], 0.9, tol=1e-10) == pytest.approx(0.9, abs=1e-9)


def test_fit_approaches_max():
    assert scalar_expectile_fit([0.0, 1.0], 0.999, tol=1e-10) == pytest.approx(0.999, abs=1e-9)
    near_one = scalar_expectile_fit([3.0, -1.0, 4.0, 0.0], 1 - 1e-6, tol=1e-10)
    assert near_one == pytest.approx(4.0, abs=1e-3 * 5.0)


def test_fit_input_validation():
    with pytest.raises(ContractError):
        scalar_expectile_fit([], 0.5)
    with pytest.raises(ConfigError):
        scalar_expectile_fit([1.0], 1.5)
    with pytest.raises(ContractError):
        scalar_expectile_fit([1.0, 2.0], 0.5, tol=0.0)


values_strategy = st.lists(st.floats(-100, 100, allow_nan=False, allow_infinity=False),
                           min_size=1, max_size=30)


@settings(max_examples=60, deadline=None)
@given(values=values_strategy, m_pair=st.tuples(st.floats(0.01, 0.99), st.floats(0.01, 0.99)))
def test_fit_monotone_in_m(values, m_pair):
    m1, m2 = sorted(m_pair)
    tol = 1e-9
    f1 = scalar_expectile_fit(values, m1, tol)
    f2 = scalar_expectile_fit(values, m2, tol)
    assert f1 <= f2 + 1e-6


@settings(max_examples=60, deadline=None)
@given(values=values_strategy, m=st.floats(0.001, 0.999))
def test_fit_bounded_by_data_range(values, m):
    fit = scalar_expectile_fit(values, m, 1e-9)
    assert min(values) - 1e-6 <= fit <= max(values) + 1e-6


@settings(max_examples=40, deadline=None)
@given(values=st.lists(st.floats(-50, 50), min_size=2, max_size=20))
def test_fit_limit_reaches_max(values):
    fit = scalar_expectile_fit(values, 1 - 1e-6, 1e-9)
    spread = max(values) - min(values)
    assert abs(fit - max(values)) <= 1e-9 + 1e-3 * spread


def test_fit_agrees_with_gradient_descent_minimizer():
    # Independent check: minimize the loss over a constant predictor directly.
    rng = np.random.default_rng(9)
    values = rng.normal(size=12) * 3.0
    for m in (0.3, 0.8, 0.95):
        g = ad.parameter(np.array([float(values.mean())]))
        for _ in range(4000):
            loss = expectile_loss(ad.concatenate([g] * 12, axis=0), values,
                                  np.ones(12, bool), m)
            ad.zero_grads([g])
            ad.backward(loss)
            g.data = g.data - 0.5 * g.grad
        assert float(g.data[0]) == pytest.approx(scalar_expectile_fit(values, m, 1e-12),
                                                 abs=1e-4)
