import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from armedforest.diagnostics import evaluate
from armedforest.oracle import (OPTIMAL_MSE, MarginalPredictor, OptimalPredictor, OracleSpec,
                                marginal_predict, optimal_predict)
from armedforest.sim import Model8Params, simulate_model8

# E[(Y - gamma.X')^2] = 2 + ((a-b)' S (a-b) + ((a-b).mu)^2) / 4, frozen from the closed form
# and cross-checked against an independent Monte Carlo draw below.
MARGINAL_MSE = {"3alpha/4": 2.4325790405273438, "-alpha": 29.68505859375}


def spec_for(name):
    return OracleSpec.from_params(Model8Params.beta_setting(name))


def test_gamma_is_branch_average():
    spec = spec_for("3alpha/4")
    np.testing.assert_allclose(spec.gamma, 7 * spec.alpha / 8)
    np.testing.assert_array_equal(spec_for("-alpha").gamma, np.zeros(8))


def test_optimal_examples():
    spec = spec_for("3alpha/4")
    assert optimal_predict(np.r_[1, 1, np.ones(8)], spec) == pytest.approx(4.5)
    assert optimal_predict(np.r_[0, 0, np.ones(8)], spec) == pytest.approx(4.5)
    assert optimal_predict(np.r_[0, 1, np.ones(8)], spec) == pytest.approx(3.375)


def test_optimal_rejects_non_binary():
    with pytest.raises(ValueError):
        optimal_predict(np.r_[0.5, 1, np.ones(8)], spec_for("3alpha/4"))


def test_marginal_examples():
    assert marginal_predict(np.ones(8), spec_for("3alpha/4")) == pytest.approx(3.9375)
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(marginal_predict(rng.standard_normal((5, 8)), spec_for("-alpha")), 0.0)


def test_predictor_handles_match_functions():
    spec = spec_for("3alpha/4")
    X = np.column_stack([np.random.default_rng(1).integers(0, 2, (6, 2)), np.ones((6, 8))])
    np.testing.assert_array_equal(OptimalPredictor(spec).predict(X), optimal_predict(X, spec))
    np.testing.assert_array_equal(MarginalPredictor(spec).predict(X), marginal_predict(X[:, 2:], spec))


@pytest.mark.parametrize("name", ["3alpha/4", "-alpha"])
def test_frozen_marginal_mse_matches_independent_monte_carlo(name):
    # plain numpy draw, independent of the package sampler
    p = Model8Params.beta_setting(name)
    rng = np.random.default_rng(99)
    n = 1_000_000
    xp = 1.0 + rng.standard_normal((n, 8)) @ np.linalg.cholesky(p.sigma).T
    delta = rng.integers(0, 2, n)
    signal = np.where(delta == 1, xp @ p.alpha, xp @ p.beta)
    y = signal + rng.standard_normal(n) + rng.standard_normal(n)
    mc = np.mean((y - xp @ ((p.alpha + p.beta) / 2)) ** 2)
    assert mc == pytest.approx(MARGINAL_MSE[name], rel=0.01)


@pytest.fixture(scope="module")
def big_test():
    p = Model8Params.beta_setting("3alpha/4")
    return p, simulate_model8(100_000, p, np.random.default_rng(2))


def test_optimal_mse_is_noise_variance(big_test):
    p, data = big_test
    assert evaluate(OptimalPredictor(OracleSpec.from_params(p)), data).mse == pytest.approx(OPTIMAL_MSE, abs=0.05)


def test_marginal_mse_matches_closed_form(big_test):
    p, data = big_test
    assert evaluate(MarginalPredictor(OracleSpec.from_params(p)), data).mse == pytest.approx(
        MARGINAL_MSE["3alpha/4"], abs=0.05)


def test_marginal_residuals_uncorrelated_with_x_prime(big_test):
    p, data = big_test
    resid = data.response - MarginalPredictor(OracleSpec.from_params(p)).predict(data.features)
    for k in range(2, 10):
        assert abs(np.corrcoef(resid, data.features[:, k])[0, 1]) < 0.01


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["3alpha/4", "-alpha"]))
def test_optimal_never_worse_than_marginal(seed, name):
    p = Model8Params.beta_setting(name)
    data = simulate_model8(10_000, p, np.random.default_rng(seed))
    spec = OracleSpec.from_params(p)
    assert evaluate(OptimalPredictor(spec), data).mse <= evaluate(MarginalPredictor(spec), data).mse
