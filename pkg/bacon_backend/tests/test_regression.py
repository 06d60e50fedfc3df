import numpy as np
import pytest
from scipy import integrate, stats

from core.regression import (
    LATENT_REP,
    RegressionChainState,
    RegressionPrior,
    build_problem,
    marginal_log_likelihood,
    median_member,
    posterior_beta_mean,
    predict,
    representative_probabilities,
    run_stage2,
    select_representative,
)
from shared.errors import ConfigError, DataError
from shared.models import (
    AllocationState,
    ChainSettings,
    LatentMatrix,
    RegressionSample,
    RepresentativeMode,
    ResponseData,
)


def hat_matrix(a):
    return a @ np.linalg.solve(a.T @ a, a.T)


@pytest.fixture
def signal_problem():
    gen = np.random.default_rng(21)
    bits = gen.integers(0, 2, (20, 10)).astype(np.uint8)
    y = 2.0 * bits[:, 4] + 0.01 * gen.standard_normal(20)
    data = ResponseData(y_train=y.tolist(), train_idx=list(range(20)))
    return bits, data


def test_fixed_variance_evidence_matches_gaussian_marginal():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    col = np.array([[0.0], [0.0], [1.0], [1.0]])
    a = np.column_stack([np.ones(4), col])
    cov = np.eye(4) + 1.0 * hat_matrix(a)
    expected = stats.multivariate_normal(mean=np.zeros(4), cov=cov).logpdf(y)
    value = marginal_log_likelihood([1], col, y, RegressionPrior(sigma_beta2=1.0), sigma2=1.0)
    assert value == pytest.approx(expected, rel=1e-10)


def test_collapsed_evidence_matches_quadrature_over_variance():
    y = np.array([1.0, 2.5, 2.0, 4.0, 3.5])
    col = np.array([[0.0], [1.0], [0.0], [1.0], [1.0]])
    prior = RegressionPrior(sigma_beta2=4.0, a0=2.0, b0=1.0)
    a = np.column_stack([np.ones(5), col])
    base = np.eye(5) + prior.sigma_beta2 * hat_matrix(a)
    _, logdet = np.linalg.slogdet(base)
    quad_form = float(y @ np.linalg.solve(base, y))

    def integrand(s2):
        if s2 <= 0:
            return 0.0
        log_lik = -0.5 * (5 * np.log(2 * np.pi * s2) + logdet + quad_form / s2)
        return np.exp(log_lik) * stats.invgamma.pdf(s2, prior.a0, scale=prior.b0)

    value, _ = integrate.quad(integrand, 0.0, np.inf, epsabs=1e-16, epsrel=1e-10, limit=200)
    assert marginal_log_likelihood([1], col, y, prior) == pytest.approx(np.log(value), rel=1e-6)


def test_null_model_and_singular_designs():
    y = np.array([1.0, 2.0, 3.0, 5.0, 4.0])
    col = np.array([0.0, 1.0, 0.0, 1.0, 1.0])
    prior = RegressionPrior()
    design = np.column_stack([col, col])
    null = marginal_log_likelihood([0, 0], design, y, prior)
    assert np.isfinite(null)
    assert null - marginal_log_likelihood([0, 0], design, y, prior) == 0.0
    assert np.isfinite(marginal_log_likelihood([1, 0], design, y, prior))
    assert marginal_log_likelihood([1, 1], design, y, prior) == float("-inf")
    # q1 must stay below n - 1
    wide = np.random.default_rng(2).standard_normal((5, 4))
    assert marginal_log_likelihood([1, 1, 1, 1], wide, y, prior) == float("-inf")


def test_large_scale_limit_is_ols():
    gen = np.random.default_rng(8)
    design = gen.standard_normal((50, 3))
    y = 1.0 + design @ np.array([0.5, -2.0, 3.0]) + gen.standard_normal(50)
    mean = posterior_beta_mean([1, 1, 1], design, y, RegressionPrior(sigma_beta2=1e12))
    ols, *_ = np.linalg.lstsq(np.column_stack([np.ones(50), design]), y, rcond=None)
    np.testing.assert_allclose(mean, ols, atol=1e-6)


def test_median_member_picks_central_vector():
    bits = np.array([[0, 0, 1], [0, 1, 1], [1, 1, 1]]).T
    assert median_member(bits, np.array([0, 1, 2])) == 1
    assert median_member(bits, np.array([2])) == 2


def test_random_member_mode(signal_problem):
    bits, data = signal_problem
    alloc = AllocationState(labels=(0, 1, 1, 1, 2, 3, 4, 5, 6, 7))
    problem = build_problem(bits, data, alloc)
    state = RegressionChainState(
        gamma=np.zeros(alloc.q, dtype=np.int64), reps=np.array([0, 1, 4, 5, 6, 7, 8, 9]),
        omega1=0.5, beta=np.zeros(alloc.q + 1), sigma2=1.0, rng=np.random.default_rng(0),
    )
    assert select_representative(0, RepresentativeMode.RANDOM_MEMBER, state, problem, RegressionPrior()) == 0
    draws = {select_representative(1, RepresentativeMode.RANDOM_MEMBER, state, problem, RegressionPrior())
             for _ in range(60)}
    assert draws == {1, 2, 3}
    assert select_representative(1, RepresentativeMode.LATENT_VECTOR, state, problem, RegressionPrior()) == LATENT_REP


def test_strong_signal_is_selected(signal_problem):
    bits, data = signal_problem
    alloc = AllocationState(labels=tuple(range(10)))
    chain = ChainSettings(burn_in=50, kept=200, thin=10, seed=4, log_every=1000)
    result = run_stage2(bits, data, alloc, RepresentativeMode.MEDIAN_MEMBER, chain, RegressionPrior())
    assert result.inclusion[4] > 0.99
    assert all(sum(s.gamma) < 19 for s in result.samples)
    assert len(result.samples) == 20


def test_random_member_representative_probabilities(signal_problem):
    bits, data = signal_problem
    alloc = AllocationState(labels=(0, 0, 1, 1, 2, 2, 3, 3, 4, 4))
    chain = ChainSettings(burn_in=10, kept=60, thin=2, seed=9, log_every=1000)
    result = run_stage2(bits, data, alloc, RepresentativeMode.RANDOM_MEMBER, chain, RegressionPrior())
    table = representative_probabilities(result.samples, alloc)
    sums = table.groupby("cluster")["rep_prob"].sum()
    np.testing.assert_allclose(sums.to_numpy(), 1.0)
    for sample in result.samples:
        for k, rep in enumerate(sample.reps):
            assert alloc.labels[rep] == k
    assert table.iloc[0]["cluster"] == 2


def test_latent_mode_requires_configuration(signal_problem):
    bits, data = signal_problem
    alloc = AllocationState(labels=tuple(range(10)))
    chain = ChainSettings(burn_in=1, kept=2, thin=1)
    with pytest.raises(ConfigError):
        run_stage2(bits, data, alloc, RepresentativeMode.LATENT_VECTOR, chain, RegressionPrior())
    with pytest.raises(ConfigError):
        run_stage2(bits, data, alloc, RepresentativeMode.MEDIAN_MEMBER, chain.model_copy(update={"kept": 0}),
                   RegressionPrior())


def test_latent_mode_uses_configuration(signal_problem):
    bits, data = signal_problem
    alloc = AllocationState(labels=(0, 0, 1, 1, 1, 1, 1, 1, 1, 1))
    v = np.column_stack([bits[:, 0], bits[:, 4]])
    config = LatentMatrix(v=v, p_star=0.5)
    chain = ChainSettings(burn_in=20, kept=50, thin=5, seed=1, log_every=1000)
    result = run_stage2(bits, data, alloc, RepresentativeMode.LATENT_VECTOR, chain, RegressionPrior(), config)
    assert all(s.reps == [LATENT_REP, LATENT_REP] for s in result.samples)
    assert result.inclusion[1] > 0.99


def test_build_problem_rejects_mismatch(signal_problem):
    bits, data = signal_problem
    with pytest.raises(DataError):
        build_problem(bits, data, AllocationState(labels=(0, 1)))


def test_prediction_means():
    intercept_only = RegressionSample(gamma=[0], reps=[0], beta=[2.5, 0.0], sigma2=0.1, omega1=0.5)
    x_test = np.array([[0], [1], [1]])
    summary = predict([intercept_only], x_test, np.random.default_rng(0))
    np.testing.assert_allclose(summary.mean, 2.5)
    assert all(lo <= hi for lo, hi in zip(summary.lower, summary.upper))

    slope = RegressionSample(gamma=[1], reps=[0], beta=[1.0, 2.0], sigma2=0.1, omega1=0.5)
    once = predict([slope, intercept_only], x_test, np.random.default_rng(0))
    twice = predict([slope, intercept_only] * 2, x_test, np.random.default_rng(0))
    np.testing.assert_allclose(once.mean, [1.75, 2.75, 2.75])
    np.testing.assert_allclose(once.mean, twice.mean)
    with pytest.raises(DataError):
        predict([], x_test, np.random.default_rng(0))
