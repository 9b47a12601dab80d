import math

import numpy as np
import pytest
from scipy import stats

from backend.sglmm_core.exceptions import ConfigError, DataError
from backend.sglmm_core.families import (
    Family, check_support, inverse_link, loglik_and_grads, pointwise_loglik, sample_response,
)


def test_parse_accepts_names_and_members():
    assert Family.parse("NegBin") is Family.NEGBIN
    assert Family.parse(Family.GAMMA) is Family.GAMMA
    with pytest.raises(ConfigError, match="unknown family"):
        Family.parse("weibull")


def test_links_and_extra_parameters():
    assert Family.GAUSSIAN.link == "identity"
    assert Family.BERNOULLI.link == "logit"
    assert {f.link for f in (Family.POISSON, Family.NEGBIN, Family.GAMMA)} == {"log"}
    assert [f.extra_param_name for f in Family] == ["tau2", None, None, "kappa", "alpha"]
    assert Family.NEGBIN.gamma_param_name == "log_kappa"


def test_inverse_link_values():
    assert inverse_link(Family.BERNOULLI, np.array([0.0]))[0] == 0.5
    assert inverse_link(Family.POISSON, np.array([0.0]))[0] == 1.0
    assert inverse_link(Family.GAUSSIAN, np.array([-2.0]))[0] == -2.0


@pytest.mark.parametrize("family,z,row", [
    (Family.BERNOULLI, [0, 1, 0.5], 3),
    (Family.POISSON, [1, -1, 2], 2),
    (Family.NEGBIN, [1.5, 1, 2], 1),
    (Family.GAMMA, [1.0, 0.0], 2),
    (Family.GAUSSIAN, [0.0, np.nan], 2),
])
def test_check_support_names_first_bad_row(family, z, row):
    with pytest.raises(DataError, match=f"row {row}:"):
        check_support(family, np.array(z, dtype=float))


def test_pointwise_loglik_matches_scipy():
    """Each density agrees with scipy.stats under the same parameterization."""
    eta = np.array([-0.3, 0.2, 1.1])
    z_count = np.array([0.0, 2.0, 5.0])
    np.testing.assert_allclose(pointwise_loglik(Family.POISSON, z_count, eta),
                               stats.poisson.logpmf(z_count, np.exp(eta)), rtol=1e-12)
    np.testing.assert_allclose(pointwise_loglik(Family.BERNOULLI, np.array([0.0, 1.0, 1.0]), eta),
                               stats.bernoulli.logpmf([0, 1, 1], 1 / (1 + np.exp(-eta))), rtol=1e-12)
    kappa = 2.5
    mu = np.exp(eta)
    np.testing.assert_allclose(pointwise_loglik(Family.NEGBIN, z_count, eta, np.log(kappa)),
                               stats.nbinom.logpmf(z_count, kappa, kappa / (kappa + mu)), rtol=1e-10)
    alpha = 1.7
    z_pos = np.array([0.4, 1.3, 2.2])
    np.testing.assert_allclose(pointwise_loglik(Family.GAMMA, z_pos, eta, np.log(alpha)),
                               stats.gamma.logpdf(z_pos, alpha, scale=mu / alpha), rtol=1e-10)
    tau2 = 0.6
    np.testing.assert_allclose(pointwise_loglik(Family.GAUSSIAN, z_pos, eta, np.log(tau2)),
                               stats.norm.logpdf(z_pos, eta, math.sqrt(tau2)), rtol=1e-12)


def test_pointwise_loglik_batches_over_leading_axes():
    eta = np.random.default_rng(0).normal(size=(4, 6))
    z = np.arange(6, dtype=float)
    g = np.array([0.1, 0.2, 0.3, 0.4])
    batch = pointwise_loglik(Family.NEGBIN, z, eta, g)
    assert batch.shape == (4, 6)
    np.testing.assert_allclose(batch[2], pointwise_loglik(Family.NEGBIN, z, eta[2], 0.3))


def test_extra_parameter_presence_is_checked():
    with pytest.raises(ValueError):
        pointwise_loglik(Family.GAMMA, np.ones(2), np.zeros(2))
    with pytest.raises(ValueError):
        pointwise_loglik(Family.POISSON, np.ones(2), np.zeros(2), 0.0)


@pytest.mark.parametrize("family", list(Family))
def test_loglik_gradients_match_finite_differences(family):
    rng = np.random.default_rng(1)
    eta = rng.normal(scale=0.5, size=5)
    z = {
        Family.GAUSSIAN: rng.normal(size=5),
        Family.POISSON: rng.poisson(2.0, size=5).astype(float),
        Family.BERNOULLI: rng.integers(0, 2, size=5).astype(float),
        Family.NEGBIN: rng.poisson(3.0, size=5).astype(float),
        Family.GAMMA: rng.gamma(2.0, 1.0, size=5),
    }[family]
    g = 0.3 if family.has_extra_param else None
    _, d_eta, d_g = loglik_and_grads(family, z, eta, g)
    h = 1e-6
    for i in range(5):
        up, down = eta.copy(), eta.copy()
        up[i] += h
        down[i] -= h
        fd = (pointwise_loglik(family, z, up, g).sum() - pointwise_loglik(family, z, down, g).sum()) / (2 * h)
        assert d_eta[i] == pytest.approx(fd, rel=1e-6, abs=1e-7)
    if g is not None:
        fd = (pointwise_loglik(family, z, eta, g + h).sum() - pointwise_loglik(family, z, eta, g - h).sum()) / (2 * h)
        assert float(d_g) == pytest.approx(fd, rel=1e-6, abs=1e-7)
    else:
        assert d_g is None


def test_sample_response_supports():
    rng = np.random.default_rng(4)
    eta = rng.normal(size=200)
    assert set(np.unique(sample_response(Family.BERNOULLI, eta, None, rng))) <= {0.0, 1.0}
    counts = sample_response(Family.NEGBIN, eta, 2.0, rng)
    assert np.all(counts >= 0) and np.all(counts == np.floor(counts))
    assert np.all(sample_response(Family.GAMMA, eta, 2.0, rng) > 0)


def test_gamma_and_negbin_draw_means():
    rng = np.random.default_rng(8)
    eta = np.full(40000, np.log(3.0))
    assert sample_response(Family.GAMMA, eta, 2.0, rng).mean() == pytest.approx(3.0, rel=0.02)
    assert sample_response(Family.NEGBIN, eta, 2.0, rng).mean() == pytest.approx(3.0, rel=0.03)


@pytest.mark.parametrize("kappa", [1e6, 1e8])
def test_negbin_tends_to_poisson_for_large_kappa(kappa):
    eta = np.array([-0.5, 0.0, 0.7, 1.4])
    z = np.array([0.0, 1.0, 3.0, 6.0])
    negbin = pointwise_loglik(Family.NEGBIN, z, eta, np.log(kappa))
    poisson = stats.poisson.logpmf(z, np.exp(eta))
    assert abs(negbin.sum() - poisson.sum()) < 1e-3
    np.testing.assert_allclose(negbin, poisson, atol=1e-3)


def test_gamma_with_unit_shape_is_exponential():
    eta = np.array([-1.0, 0.0, 0.3, 2.0])
    z = np.array([0.05, 1.0, 2.5, 9.0])
    np.testing.assert_allclose(pointwise_loglik(Family.GAMMA, z, eta, 0.0),
                               stats.expon.logpdf(z, scale=np.exp(eta)), rtol=0, atol=1e-12)
    assert pointwise_loglik(Family.GAMMA, np.array([1.0]), np.array([0.0]), 0.0)[0] == pytest.approx(-1.0, abs=1e-12)
