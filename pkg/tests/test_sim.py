import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from armedforest.dataset import Dataset
from armedforest.errors import RejectedParametersError, SamplerStallError
from armedforest.sim import (
    Model8Params, PairwiseDensitySpec, ProductPerturbation, _SeparableInverse, bernstein_from_coins,
    conditional_cdf, conditional_cdf_inverse, model8_response, sample_bernstein, sample_bernstein_array,
    sample_gaussian_block, sample_pairwise_batch, sample_pairwise_density, simulate_model3, simulate_model8,
)
from oracles import bernstein_enumeration

SUPPORT = {(1, 1, 1), (1, 0, 0), (0, 1, 0), (0, 0, 1)}


# -- Bernstein triples ------------------------------------------------------

def test_bernstein_from_coins_examples():
    assert bernstein_from_coins(1, 1, 1) == (1, 1, 1)
    assert bernstein_from_coins(1, 1, 0) == (1, 0, 0)


@given(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1))
def test_bernstein_x0_is_delta_of_x1_x2(b1, b2, b3):
    t = bernstein_from_coins(b1, b2, b3)
    assert t.x0 == int(t.x1 == t.x2)
    assert t in SUPPORT


def test_bernstein_enumeration_is_uniform_on_support():
    law = bernstein_enumeration()
    assert set(law) == SUPPORT
    assert all(p == 0.25 for p in law.values())


def test_sample_bernstein_scalar(rng):
    draws = {sample_bernstein(rng) for _ in range(200)}
    assert draws == SUPPORT


@pytest.fixture(scope="module")
def million_triples():
    return sample_bernstein_array(10**6, np.random.default_rng(99))


def test_bernstein_frequencies(million_triples):
    keys, counts = np.unique(million_triples, axis=0, return_counts=True)
    assert {tuple(k) for k in keys.tolist()} == SUPPORT
    np.testing.assert_allclose(counts / 10**6, 0.25, atol=0.01)


@pytest.mark.parametrize("j,k", [(0, 1), (0, 2), (1, 2)])
def test_bernstein_pairwise_independence_chi_square(million_triples, j, k):
    table = np.zeros((2, 2))
    np.add.at(table, (million_triples[:, j], million_triples[:, k]), 1)
    _, p, _, _ = stats.chi2_contingency(table, correction=False)
    assert p > 1e-3


def test_bernstein_joint_dependence(million_triples):
    table = np.zeros((2, 2, 2))
    np.add.at(table, tuple(million_triples.T), 1)
    # cells off the support are empty, so mutual independence is rejected
    assert table[0, 0, 0] == table[1, 1, 0] == table[1, 0, 1] == table[0, 1, 1] == 0
    chi2 = ((table - 10**6 / 8) ** 2 / (10**6 / 8)).sum()
    assert stats.chi2.sf(chi2, df=4) < 1e-3


# -- Gaussian block and the two-branch model --------------------------------

def test_default_sigma():
    p = Model8Params()
    np.testing.assert_array_equal(np.diag(p.sigma), 1.0)
    assert p.sigma[2, 5] == 2.0**-3
    np.testing.assert_array_equal(p.mu, np.ones(8))
    np.testing.assert_allclose(p.alpha, np.arange(1, 9) / 8)
    np.testing.assert_allclose(p.beta, 0.75 * p.alpha)
    np.testing.assert_allclose(Model8Params.beta_setting("-alpha").beta, -p.alpha)


def test_gaussian_block_moments(rng):
    x = sample_gaussian_block(10**5, Model8Params(), rng)
    np.testing.assert_allclose(x.mean(axis=0), 1.0, atol=0.02)
    assert np.cov(x.T)[3, 4] == pytest.approx(0.5, abs=0.02)


def test_gaussian_block_rejects_non_pd(rng):
    sigma = np.array([[1.0, 2.0], [2.0, 1.0]])
    p = Model8Params(alpha=[1, 1], beta=[1, 1], sigma=sigma)
    with pytest.raises(RejectedParametersError):
        sample_gaussian_block(3, p, rng)


def test_model8_response_noise_free():
    p = Model8Params()
    ones = np.ones(8)
    assert model8_response(1, 1, ones, p) == pytest.approx(4.5)
    assert model8_response(0, 0, ones, p) == pytest.approx(4.5)
    assert model8_response(1, 0, ones, p) == pytest.approx(3.375)


def test_simulate_model8_noise_free_matches_branches(rng):
    p = Model8Params(noise_sd=(0.0, 0.0, 0.0))
    data = simulate_model8(500, p, rng)
    X = data.features
    expect = np.where(X[:, 0] == X[:, 1], X[:, 2:] @ p.alpha, X[:, 2:] @ p.beta)
    np.testing.assert_allclose(data.response, expect, rtol=0, atol=1e-12)
    assert data.column_names == [f"x{j}" for j in range(1, 11)]


def test_simulate_model8_hides_x1(rng):
    p = Model8Params()
    data = simulate_model8(10**5, p, rng)
    y, X = data.response, data.features
    assert abs(np.corrcoef(X[:, 0], y)[0, 1]) < 0.01
    assert abs(np.corrcoef(X[:, 1], y)[0, 1]) < 0.01
    same = X[:, 0] == X[:, 1]
    gap = y[same].mean() - p.alpha @ p.mu
    assert abs(gap) < 3 * y[same].std() / np.sqrt(same.sum())


def test_simulate_model8_deterministic():
    p = Model8Params()
    a = simulate_model8(100, p, np.random.default_rng(5))
    b = simulate_model8(100, p, np.random.default_rng(5))
    assert a.features.tobytes() == b.features.tobytes()
    assert a.response.tobytes() == b.response.tobytes()


def test_csv_round_trip(tmp_path, rng):
    data = simulate_model8(50, Model8Params(), rng)
    path = tmp_path / "d.csv"
    data.to_csv(path)
    assert path.read_text().splitlines()[0] == ",".join([f"x{j}" for j in range(1, 11)] + ["y"])
    back = Dataset.from_csv(path)
    assert back.features.tobytes() == data.features.tobytes()
    assert back.response.tobytes() == data.response.tobytes()


def test_dataset_rejects_non_finite():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.array([1.0]))


# -- pairwise-independent densities -----------------------------------------

def test_zero_perturbation_acceptance_is_half(rng):
    spec = PairwiseDensitySpec(phi=ProductPerturbation(scale=0.0))
    s = sample_pairwise_batch(50_000, spec, rng)
    assert 50_000 / s.attempts == pytest.approx(0.5, abs=0.01)
    assert stats.kstest(s.x0, "norm").pvalue > 1e-3


def test_default_perturbation_acceptance(rng):
    s = sample_pairwise_batch(50_000, PairwiseDensitySpec(), rng)
    assert s.attempts > 95_000
    assert 50_000 / s.attempts == pytest.approx(0.5, abs=0.01)


def test_single_draw_shapes(rng):
    x0, x1, x2 = sample_pairwise_density(PairwiseDensitySpec(), rng)
    assert isinstance(x0, float) and x1.shape == (2,) and x2.shape == (3,)


@pytest.fixture(scope="module")
def pairwise_sample():
    return sample_pairwise_batch(10**5, PairwiseDensitySpec(), np.random.default_rng(3))


def test_x0_uncorrelated_with_each_block_coordinate(pairwise_sample):
    s = pairwise_sample
    for col in np.column_stack([s.x1, s.x2]).T:
        assert abs(np.corrcoef(s.x0, col)[0, 1]) < 0.01


def test_rejection_marginals_ks(pairwise_sample):
    s = pairwise_sample
    for col in [s.x0, *s.x1.T, *s.x2.T]:
        assert stats.kstest(col, "norm").pvalue > 1e-3


def test_x0_depends_on_blocks_jointly(pairwise_sample):
    s = pairwise_sample
    phi_blocks = ProductPerturbation().block_factor(s.x1, s.x2)
    assert np.corrcoef(s.x0, phi_blocks)[0, 1] < -0.05


def test_sampler_stall(rng):
    spec = PairwiseDensitySpec(phi=lambda x0, x1, x2: np.ones_like(x0), max_attempts=20)
    with pytest.raises(SamplerStallError):
        sample_pairwise_batch(5, spec, rng)


def test_perturbation_bound_enforced():
    with pytest.raises(RejectedParametersError):
        PairwiseDensitySpec(phi=ProductPerturbation(scale=1.5))


# -- conditional CDF inversion ----------------------------------------------

def test_inverse_without_perturbation_is_median():
    spec = PairwiseDensitySpec(phi=ProductPerturbation(scale=0.0))
    assert conditional_cdf_inverse(0.5, [0.4, 1.0], [1.0, 2.0, -0.5], spec) == pytest.approx(0.0, abs=1e-8)


def test_inverse_with_zero_block_sum_is_median():
    spec = PairwiseDensitySpec()
    x1 = np.array([0.7, -0.7])
    assert conditional_cdf_inverse(0.5, x1, [1.0, 2.0, -0.5], spec) == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("u", [0.01, 0.3, 0.77, 0.99])
def test_inverse_round_trip(u):
    spec = PairwiseDensitySpec()
    x1, x2 = np.array([1.2, 0.9]), np.array([0.5, 1.1, 0.3])
    x = conditional_cdf_inverse(u, x1, x2, spec)
    h = conditional_cdf(x, x1, x2, spec)
    assert h >= u
    assert abs(h - u) <= 1e-8


@pytest.mark.parametrize("u", [0.0, 1.0, -0.1, 1.5])
def test_inverse_domain(u):
    with pytest.raises(ValueError):
        conditional_cdf_inverse(u, [0.0, 0.0], [0.0, 0.0, 0.0], PairwiseDensitySpec())


def test_vectorised_inverse_matches_scalar(rng):
    spec = PairwiseDensitySpec()
    inv = _SeparableInverse(spec)
    for _ in range(5):
        x1, x2 = rng.standard_normal(2), rng.standard_normal(3)
        u = rng.random()
        a = spec.phi.block_factor(x1, x2)
        assert inv.inverse(np.array([u]), a)[0] == pytest.approx(conditional_cdf_inverse(u, x1, x2, spec), abs=1e-7)


# -- model with a hidden block pair -----------------------------------------

def test_model3_degenerate_case_independent():
    spec = PairwiseDensitySpec(phi=ProductPerturbation(scale=0.0))
    data = simulate_model3(10**5, spec, psi=lambda h, xp, e: h, rng=np.random.default_rng(11))
    assert data.d == spec.d1 + spec.d2 + spec.d3
    for col in data.features.T:
        assert abs(np.corrcoef(col, data.response)[0, 1]) < 0.01
    assert stats.kstest(data.response, "norm").pvalue > 1e-3


@pytest.fixture(scope="module")
def model3_data():
    return simulate_model3(10**5, PairwiseDensitySpec(), psi=lambda h, xp, e: h + e,
                           rng=np.random.default_rng(21))


def test_model3_response_marginally_independent_of_blocks(model3_data):
    y, X = model3_data.response, model3_data.features
    for col in X[:, :5].T:
        assert abs(np.corrcoef(col, y)[0, 1]) < 0.01


def test_model3_response_jointly_dependent(model3_data):
    y, X = model3_data.response, model3_data.features
    prod = X[:, :2].sum(axis=1) * X[:, 2:5].sum(axis=1)
    assert abs(np.corrcoef(prod, y)[0, 1]) > 0.02


def test_model3_deterministic():
    spec = PairwiseDensitySpec()
    a = simulate_model3(200, spec, rng=np.random.default_rng(4))
    b = simulate_model3(200, spec, rng=np.random.default_rng(4))
    assert a.features.tobytes() == b.features.tobytes() and a.response.tobytes() == b.response.tobytes()


def test_model3_generic_phi_path(rng):
    spec = PairwiseDensitySpec(phi=lambda x0, x1, x2: 0.5 * np.tanh(x0) * np.tanh(np.sum(x1, -1) * np.sum(x2, -1)))
    data = simulate_model3(5, spec, rng=rng)
    assert data.features.shape == (5, 10) and np.isfinite(data.response).all()
