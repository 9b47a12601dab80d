"""Response families of the basis-SGLMM: links, supports, densities, draws.

Every density is written for a batch of linear predictors ``eta`` of shape
``(..., N)`` with the transformed extra parameter broadcast over the leading
axes, so the same code serves single evaluations, SIVI's J-sample batches and
the samplers.
"""
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import expit, gammaln, digamma

from .exceptions import ConfigError, DataError

LOG_2PI = np.log(2.0 * np.pi)

ArrayOrFloat = Union[np.ndarray, float]


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"
    BERNOULLI = "bernoulli"
    NEGBIN = "negbin"
    GAMMA = "gamma"

    @classmethod
    def parse(cls, name: Union[str, "Family"]) -> "Family":
        if isinstance(name, Family):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            valid = ", ".join(f.value for f in cls)
            raise ConfigError(f"unknown family '{name}' (expected one of: {valid})") from None

    @property
    def link(self) -> str:
        if self is Family.GAUSSIAN:
            return "identity"
        if self is Family.BERNOULLI:
            return "logit"
        return "log"

    @property
    def has_extra_param(self) -> bool:
        return self in (Family.GAUSSIAN, Family.NEGBIN, Family.GAMMA)

    @property
    def extra_param_name(self) -> Optional[str]:
        """Natural-scale name of the extra parameter (tau2, kappa or alpha)."""
        return {
            Family.GAUSSIAN: "tau2",
            Family.NEGBIN: "kappa",
            Family.GAMMA: "alpha",
        }.get(self)

    @property
    def gamma_param_name(self) -> Optional[str]:
        """Name of the extra parameter on the log scale it is fitted on."""
        name = self.extra_param_name
        return f"log_{name}" if name else None


def inverse_link(family: Family, eta: np.ndarray) -> np.ndarray:
    """Map linear predictors to the response-scale mean."""
    if family.link == "identity":
        return np.asarray(eta, dtype=float)
    if family.link == "logit":
        return expit(eta)
    return np.exp(eta)


def check_support(family: Family, z: np.ndarray) -> None:
    """Raise DataError naming the first (1-based) row outside the family support."""
    z = np.asarray(z, dtype=float)
    bad = ~np.isfinite(z)
    if family is Family.BERNOULLI:
        bad |= (z != 0.0) & (z != 1.0)
        reason = "bernoulli response must be 0 or 1"
    elif family in (Family.POISSON, Family.NEGBIN):
        bad |= (z < 0) | (np.floor(z) != z)
        reason = f"{family.value} response must be a nonnegative integer"
    elif family is Family.GAMMA:
        bad |= z <= 0
        reason = "gamma response must be strictly positive"
    else:
        reason = "gaussian response must be finite"
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise DataError(f"{reason}, got {z[idx]!r}", row=idx + 1)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _gamma_column(family: Family, gamma_t: Optional[ArrayOrFloat]) -> Optional[np.ndarray]:
    if family.has_extra_param:
        if gamma_t is None:
            raise ValueError(f"{family.value} family requires the transformed extra parameter")
        return np.asarray(gamma_t, dtype=float)[..., None]
    if gamma_t is not None:
        raise ValueError(f"{family.value} family has no extra parameter")
    return None


def pointwise_loglik(family: Family, z: np.ndarray, eta: np.ndarray,
                     gamma_t: Optional[ArrayOrFloat] = None) -> np.ndarray:
    """Per-observation log density/mass with all normalizing constants.

    Args:
        family: Response family
        z: Responses, shape (N,)
        eta: Linear predictors, shape (..., N)
        gamma_t: Transformed extra parameter (log tau2 / log kappa / log alpha),
            scalar or shape (...,); must be None for Poisson and Bernoulli

    Returns:
        Array of shape (..., N)
    """
    g = _gamma_column(family, gamma_t)
    if family is Family.GAUSSIAN:
        resid = z - eta
        return -0.5 * LOG_2PI - 0.5 * g - 0.5 * resid ** 2 * np.exp(-g)
    if family is Family.POISSON:
        return z * eta - np.exp(eta) - gammaln(z + 1.0)
    if family is Family.BERNOULLI:
        return z * eta - _softplus(eta)
    if family is Family.NEGBIN:
        kappa = np.exp(g)
        return (gammaln(z + kappa) - gammaln(kappa) - gammaln(z + 1.0)
                - kappa * _softplus(eta - g) - z * _softplus(g - eta))
    # gamma: shape alpha, rate alpha / exp(eta)
    alpha = np.exp(g)
    return (alpha * (g - eta) - gammaln(alpha) + (alpha - 1.0) * np.log(z)
            - alpha * z * np.exp(-eta))


def loglik_and_grads(family: Family, z: np.ndarray, eta: np.ndarray,
                     gamma_t: Optional[ArrayOrFloat] = None
                     ) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Summed log-likelihood with its gradients in eta and in the transformed extra parameter.

    Returns:
        Tuple of (loglik of shape (...,), d/d eta of shape (..., N),
        d/d gamma_t of shape (...,) or None)
    """
    ll = pointwise_loglik(family, z, eta, gamma_t).sum(axis=-1)
    g = _gamma_column(family, gamma_t)
    d_gamma = None
    if family is Family.GAUSSIAN:
        inv_tau2 = np.exp(-g)
        resid = z - eta
        d_eta = resid * inv_tau2
        d_gamma = (-0.5 + 0.5 * resid ** 2 * inv_tau2).sum(axis=-1)
    elif family is Family.POISSON:
        d_eta = z - np.exp(eta)
    elif family is Family.BERNOULLI:
        d_eta = z - expit(eta)
    elif family is Family.NEGBIN:
        kappa = np.exp(g)
        w = expit(eta - g)
        d_eta = z - (z + kappa) * w
        d_gamma = (kappa * (digamma(z + kappa) - digamma(kappa))
                   - kappa * _softplus(eta - g) + kappa * w - z * (1.0 - w)).sum(axis=-1)
    else:
        alpha = np.exp(g)
        scaled = z * np.exp(-eta)
        d_eta = alpha * (scaled - 1.0)
        d_gamma = (alpha * ((g - eta) + 1.0 - digamma(alpha) + np.log(z) - scaled)).sum(axis=-1)
    return ll, d_eta, d_gamma


def sample_response(family: Family, eta: np.ndarray, extra_param: Optional[float],
                    rng: np.random.Generator) -> np.ndarray:
    """Draw responses given linear predictors.

    Args:
        family: Response family
        eta: Linear predictors, shape (N,)
        extra_param: Natural-scale tau2 / kappa / alpha (ignored when the family has none)
        rng: Seeded generator

    Returns:
        Float array of responses, shape (N,)
    """
    eta = np.asarray(eta, dtype=float)
    mean = inverse_link(family, eta)
    if family is Family.GAUSSIAN:
        return mean + np.sqrt(extra_param) * rng.standard_normal(eta.shape)
    if family is Family.POISSON:
        return rng.poisson(mean).astype(float)
    if family is Family.BERNOULLI:
        return rng.binomial(1, mean).astype(float)
    if family is Family.NEGBIN:
        kappa = float(extra_param)
        return rng.negative_binomial(kappa, kappa / (kappa + mean)).astype(float)
    alpha = float(extra_param)
    return rng.gamma(alpha, mean / alpha)
