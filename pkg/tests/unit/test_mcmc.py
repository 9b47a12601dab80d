import numpy as np
import pytest

from backend.sglmm_core.exceptions import ConfigError, DataError, SamplerError
from backend.sglmm_core.families import Family
from backend.sglmm_core.mcmc import (
    HmcConfig, MhConfig, batch_means_se, ess, hamiltonian, hmc_fit, leapfrog, mh_fit, mh_log_accept_ratio,
)
from backend.sglmm_core.model import ModelSpec, PriorSpec, log_joint


def normal_target(dim=1, var=1.0):
    """Prior-only model whose posterior over beta is N(0, var I)."""
    return ModelSpec(
        family=Family.GAUSSIAN,
        priors=PriorSpec(beta_mean=0.0, beta_var=var),
        X=np.zeros((0, dim)),
        Z=np.zeros(0),
        phi=np.zeros((0, 0)),
        prior_cov_diag=np.ones(0),
        fixed_log_sigma2=0.0,
        fixed_gamma_t=0.0,
    )


def _responses(family, rng, n):
    if family is Family.GAUSSIAN:
        return rng.normal(size=n)
    if family is Family.BERNOULLI:
        return rng.integers(0, 2, size=n).astype(float)
    if family is Family.GAMMA:
        return rng.gamma(2.0, 1.0, size=n)
    return rng.poisson(2.0, size=n).astype(float)


def count_model(family, seed=0, n=20, **fixed):
    rng = np.random.default_rng(seed)
    return ModelSpec(
        family=family,
        priors=PriorSpec(kappa_shape=2.0, kappa_rate=1.0, tau_mean=0.1, tau_var=0.8,
                         alpha_mean=0.5, alpha_var=0.7),
        X=rng.uniform(-1, 1, size=(n, 2)),
        Z=_responses(family, rng, n),
        phi=rng.normal(scale=0.3, size=(n, 3)),
        prior_cov_diag=rng.uniform(0.5, 1.5, size=3),
        **fixed,
    )


def test_configs_validate():
    with pytest.raises(ConfigError):
        MhConfig(iters=100, burn_in=100)
    with pytest.raises(ConfigError):
        MhConfig(thin=0)
    with pytest.raises(ConfigError):
        HmcConfig(leapfrog_steps=0)
    with pytest.raises(ConfigError):
        HmcConfig(init_step_size=0.0)


@pytest.mark.parametrize("family, fixed", [(f, {}) for f in Family] + [
    (Family.NEGBIN, {"fixed_log_sigma2": -0.4}),
    (Family.GAMMA, {"fixed_gamma_t": 0.6}),
    (Family.GAUSSIAN, {"fixed_log_sigma2": 0.2, "fixed_gamma_t": -0.3}),
    (Family.BERNOULLI, {"fixed_log_sigma2": 0.1}),
])
def test_mh_accept_ratio_matches_log_joint_difference(family, fixed):
    model = count_model(family, **fixed)
    rng = np.random.default_rng(1)
    for _ in range(10):
        theta = rng.normal(scale=0.3, size=model.dim)
        for coord in range(model.dim):
            new_value = theta[coord] + rng.normal(scale=0.3)
            moved = theta.copy()
            moved[coord] = new_value
            expected = log_joint(moved, model) - log_joint(theta, model)
            assert mh_log_accept_ratio(theta, coord, new_value, model) == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_mh_standard_normal_moments():
    chain = mh_fit(normal_target(), MhConfig(iters=51000, burn_in=1000, thin=1, seed=2, log_every=0))
    assert chain.samples.shape == (50000, 1)
    assert abs(chain.samples.mean()) < 0.05
    assert abs(chain.samples.std() - 1.0) < 0.1
    assert chain.names == ["beta_1"]


def test_mh_adapts_toward_target_acceptance():
    chain = mh_fit(normal_target(dim=10), MhConfig(iters=6000, burn_in=3000, thin=5, seed=3, log_every=0))
    assert 0.15 <= chain.accept_rate <= 0.35
    assert chain.samples.shape == (600, 10)
    assert np.all(chain.iterations > 3000)


def test_mh_keeps_every_iteration_without_burn_in_or_thinning():
    chain = mh_fit(normal_target(), MhConfig(iters=1000, burn_in=0, thin=1, seed=4, log_every=0))
    assert chain.samples.shape == (1000, 1)
    np.testing.assert_array_equal(chain.iterations, np.arange(1, 1001))
    assert chain.iterations_run == 1000


def test_mh_is_seed_deterministic():
    model = count_model(Family.NEGBIN)
    config = MhConfig(iters=500, burn_in=100, thin=2, seed=5, log_every=0)
    a, b = mh_fit(model, config), mh_fit(model, config)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.walltime_s > 0


def test_mh_rejects_unsupported_start():
    model = count_model(Family.POISSON)
    model.priors.sigma_mean = float("inf")
    with pytest.raises(SamplerError):
        mh_fit(model, MhConfig(iters=10, burn_in=0, log_every=0))


def test_leapfrog_conserves_energy_and_reverses():
    model = normal_target(dim=10, var=2.0)
    rng = np.random.default_rng(6)
    theta, momentum = rng.normal(size=10), rng.normal(size=10)
    h0 = hamiltonian(theta, momentum, model)
    end_theta, end_p, end_logp, _ = leapfrog(theta, momentum, 1e-3, 10, model)
    assert abs(hamiltonian(end_theta, end_p, model) - h0) < 1e-3
    assert end_logp == pytest.approx(log_joint(end_theta, model))

    back_theta, back_p, _, _ = leapfrog(end_theta, -end_p, 1e-3, 10, model)
    np.testing.assert_allclose(back_theta, theta, atol=1e-8)
    np.testing.assert_allclose(-back_p, momentum, atol=1e-8)


def test_hmc_standard_normal_moments():
    chain = hmc_fit(normal_target(), HmcConfig(iters=10500, warmup=500, leapfrog_steps=1,
                                               init_step_size=0.1, seed=7, log_every=0))
    assert chain.samples.shape == (10000, 1)
    assert abs(chain.samples.mean()) < 0.05
    assert abs(chain.samples.std() - 1.0) < 0.1


def test_hmc_dual_averaging_reaches_target_band():
    chain = hmc_fit(normal_target(dim=10), HmcConfig(iters=1500, warmup=500, leapfrog_steps=10,
                                                     init_step_size=0.01, seed=8, log_every=0))
    assert 0.6 <= chain.accept_rate <= 0.95
    assert chain.divergences == 0


def test_hmc_is_seed_deterministic():
    model = count_model(Family.POISSON)
    config = HmcConfig(iters=120, warmup=40, leapfrog_steps=5, seed=9, log_every=0)
    a, b = hmc_fit(model, config), hmc_fit(model, config)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_hmc_aborts_when_most_trajectories_diverge():
    model = count_model(Family.POISSON)
    with pytest.raises(SamplerError, match="diverged"):
        hmc_fit(model, HmcConfig(iters=20, warmup=0, leapfrog_steps=5, init_step_size=100.0, log_every=0))


def test_ess_of_iid_draws():
    draws = np.random.default_rng(10).standard_normal(10000)
    assert ess(draws)[0] == pytest.approx(10000, rel=0.2)


def test_ess_of_ar1_chain():
    rng = np.random.default_rng(11)
    rho, n = 0.9, 50000
    x = np.empty(n)
    x[0] = rng.standard_normal()
    noise = rng.standard_normal(n) * np.sqrt(1 - rho ** 2)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + noise[t]
    assert ess(x)[0] / n == pytest.approx((1 - rho) / (1 + rho), rel=0.3)


def test_ess_edge_cases():
    assert ess(np.full((50, 2), 3.0)).tolist() == [1.0, 1.0]
    with pytest.raises(ValueError):
        ess(np.zeros(9))


def test_batch_means_se_of_iid_draws():
    rng = np.random.default_rng(12)
    assert batch_means_se(rng.standard_normal(10000))[0] == pytest.approx(0.01, rel=0.3)
    scaled = [batch_means_se(rng.standard_normal(n))[0] * np.sqrt(n) for n in (2500, 10000)]
    assert scaled[1] == pytest.approx(scaled[0], rel=0.4)


def test_batch_means_se_needs_one_hundred_draws():
    with pytest.raises(DataError, match="at least 100 draws"):
        batch_means_se(np.zeros(99))
    np.testing.assert_array_equal(batch_means_se(np.full((100, 2), 1.5)), [0.0, 0.0])
