"""Basis-SGLMM log-joint density and its analytic gradient.

The packed parameter vector is theta = (beta_1..beta_p, delta_1..delta_m,
log sigma2, [gamma]) where gamma is log tau2 (gaussian), log kappa (negbin)
or log alpha (gamma). log sigma2 and gamma may be held fixed at known
values, in which case their slots are dropped from theta.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import gammaln

from .exceptions import ConfigError
from .families import LOG_2PI, Family, check_support, loglik_and_grads, pointwise_loglik
from .spatial import BasisSystem, SpatialDataset

logger = logging.getLogger(__name__)


@dataclass
class PriorSpec:
    """Priors on the fitted scale: beta ~ N, log sigma2 ~ N, log tau2 ~ N,
    kappa ~ Gamma(shape, rate), log alpha ~ N. Variances, not sds."""
    beta_mean: Union[float, np.ndarray] = 0.0
    beta_var: Union[float, np.ndarray] = 100.0
    sigma_mean: float = 1.0
    sigma_var: float = 1.0
    tau_mean: float = 0.0
    tau_var: float = 1.0
    kappa_shape: float = 2.0
    kappa_rate: float = 1.0
    alpha_mean: float = 1.0
    alpha_var: float = 1.0

    def __post_init__(self):
        positive = {
            "beta_var": self.beta_var,
            "sigma_var": self.sigma_var,
            "tau_var": self.tau_var,
            "kappa_shape": self.kappa_shape,
            "kappa_rate": self.kappa_rate,
            "alpha_var": self.alpha_var,
        }
        for name, value in positive.items():
            if np.any(np.asarray(value, dtype=float) <= 0):
                raise ConfigError(f"prior {name} must be strictly positive, got {value}")

    def beta_moments(self, p: int) -> Tuple[np.ndarray, np.ndarray]:
        mean = np.broadcast_to(np.asarray(self.beta_mean, dtype=float), (p,)).copy()
        var = np.broadcast_to(np.asarray(self.beta_var, dtype=float), (p,)).copy()
        return mean, var

    def gamma_prior_mean(self, family: Family) -> Optional[float]:
        """Prior-centred value of the transformed extra parameter."""
        if family is Family.GAUSSIAN:
            return self.tau_mean
        if family is Family.GAMMA:
            return self.alpha_mean
        if family is Family.NEGBIN:
            # log of the Gamma prior mean of kappa
            return float(np.log(self.kappa_shape / self.kappa_rate))
        return None


@dataclass(frozen=True)
class ParameterLayout:
    p: int
    m: int
    family: Family
    fixed_log_sigma2: Optional[float] = None
    fixed_gamma_t: Optional[float] = None

    def __post_init__(self):
        if self.p < 0 or self.m < 0:
            raise ValueError(f"p and m must be nonnegative, got p={self.p}, m={self.m}")
        if self.fixed_gamma_t is not None and not self.family.has_extra_param:
            raise ValueError(f"{self.family.value} family has no extra parameter to fix")

    @property
    def sigma_free(self) -> bool:
        return self.fixed_log_sigma2 is None

    @property
    def gamma_free(self) -> bool:
        return self.family.has_extra_param and self.fixed_gamma_t is None

    @property
    def dim(self) -> int:
        return self.p + self.m + int(self.sigma_free) + int(self.gamma_free)

    @property
    def beta_slice(self) -> slice:
        return slice(0, self.p)

    @property
    def delta_slice(self) -> slice:
        return slice(self.p, self.p + self.m)

    @property
    def sigma_index(self) -> Optional[int]:
        return self.p + self.m if self.sigma_free else None

    @property
    def gamma_index(self) -> Optional[int]:
        if not self.gamma_free:
            return None
        return self.p + self.m + int(self.sigma_free)

    def names(self) -> List[str]:
        names = [f"beta_{i + 1}" for i in range(self.p)]
        names += [f"delta_{i + 1}" for i in range(self.m)]
        if self.sigma_free:
            names.append("log_sigma2")
        if self.gamma_free:
            names.append(self.family.gamma_param_name)
        return names

    def block_of(self) -> List[str]:
        """Block tag (beta, delta, log_sigma2, gamma) per packed coordinate."""
        blocks = ["beta"] * self.p + ["delta"] * self.m
        if self.sigma_free:
            blocks.append("log_sigma2")
        if self.gamma_free:
            blocks.append("gamma")
        return blocks


@dataclass
class ParameterVector:
    beta: np.ndarray
    delta: np.ndarray
    log_sigma2: float
    gamma_t: Optional[float] = None


def pack(parts: ParameterVector, layout: ParameterLayout) -> np.ndarray:
    """Flatten structured parameters into theta; fixed components are not packed."""
    beta = np.asarray(parts.beta, dtype=float).ravel()
    delta = np.asarray(parts.delta, dtype=float).ravel()
    if beta.size != layout.p or delta.size != layout.m:
        raise ValueError(f"expected beta of length {layout.p} and delta of length {layout.m}, "
                         f"got {beta.size} and {delta.size}")
    pieces = [beta, delta]
    if layout.sigma_free:
        pieces.append(np.array([parts.log_sigma2], dtype=float))
    if layout.gamma_free:
        if parts.gamma_t is None:
            raise ValueError(f"{layout.family.value} family requires gamma_t")
        pieces.append(np.array([parts.gamma_t], dtype=float))
    return np.concatenate(pieces)


def unpack(theta: np.ndarray, layout: ParameterLayout) -> ParameterVector:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.dim,):
        raise ValueError(f"theta must have shape ({layout.dim},), got {theta.shape}")
    log_sigma2 = theta[layout.sigma_index] if layout.sigma_free else layout.fixed_log_sigma2
    if layout.gamma_free:
        gamma_t = theta[layout.gamma_index]
    else:
        gamma_t = layout.fixed_gamma_t
    return ParameterVector(
        beta=theta[layout.beta_slice].copy(),
        delta=theta[layout.delta_slice].copy(),
        log_sigma2=float(log_sigma2),
        gamma_t=None if gamma_t is None else float(gamma_t),
    )


def _as_design(matrix, n: int, name: str) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim == 1 and n > 0:
        matrix = matrix.reshape(n, -1)
    if matrix.ndim != 2 or matrix.shape[0] != n:
        raise ValueError(f"{name} must be a 2-D matrix with {n} rows, got shape {matrix.shape}")
    return matrix


@dataclass
class ModelSpec:
    """Training data, basis rows and priors of one basis-SGLMM; treat as immutable."""
    family: Family
    priors: PriorSpec
    X: np.ndarray
    Z: np.ndarray
    phi: np.ndarray
    prior_cov_diag: np.ndarray
    fixed_log_sigma2: Optional[float] = None
    fixed_gamma_t: Optional[float] = None
    layout: ParameterLayout = field(init=False)

    def __post_init__(self):
        self.family = Family.parse(self.family)
        self.Z = np.asarray(self.Z, dtype=float).ravel()
        n = self.Z.size
        self.X = _as_design(self.X, n, "X")
        self.phi = _as_design(self.phi, n, "phi")
        self.prior_cov_diag = np.asarray(self.prior_cov_diag, dtype=float).ravel()
        if self.prior_cov_diag.size != self.phi.shape[1]:
            raise ValueError(f"prior_cov_diag must have length m={self.phi.shape[1]}")
        if np.any(self.prior_cov_diag <= 0):
            raise ValueError("prior_cov_diag must be strictly positive")
        check_support(self.family, self.Z)
        self.layout = ParameterLayout(
            p=self.X.shape[1],
            m=self.phi.shape[1],
            family=self.family,
            fixed_log_sigma2=self.fixed_log_sigma2,
            fixed_gamma_t=self.fixed_gamma_t,
        )

    @classmethod
    def from_training(cls, dataset: SpatialDataset, basis: BasisSystem, priors: PriorSpec,
                      fixed_log_sigma2: Optional[float] = None,
                      fixed_gamma_t: Optional[float] = None) -> "ModelSpec":
        if basis.n != dataset.n:
            raise ValueError(f"basis has {basis.n} rows but dataset has {dataset.n}")
        idx = dataset.train_idx
        return cls(
            family=dataset.family,
            priors=priors,
            X=dataset.X[idx],
            Z=dataset.Z[idx],
            phi=basis.rows(idx),
            prior_cov_diag=basis.prior_cov_diag(),
            fixed_log_sigma2=fixed_log_sigma2,
            fixed_gamma_t=fixed_gamma_t,
        )

    @classmethod
    def prior_only(cls, family: Family, priors: PriorSpec, p: int, m: int,
                   fixed_log_sigma2: Optional[float] = None,
                   fixed_gamma_t: Optional[float] = None) -> "ModelSpec":
        """A model with no observations: the posterior is the prior."""
        return cls(
            family=family,
            priors=priors,
            X=np.zeros((0, p)),
            Z=np.zeros(0),
            phi=np.zeros((0, m)),
            prior_cov_diag=np.ones(m),
            fixed_log_sigma2=fixed_log_sigma2,
            fixed_gamma_t=fixed_gamma_t,
        )

    @property
    def n(self) -> int:
        return self.Z.size

    @property
    def dim(self) -> int:
        return self.layout.dim

    def initial_theta(self) -> np.ndarray:
        """beta, delta at zero; log sigma2 and gamma at their prior means."""
        parts = ParameterVector(
            beta=np.zeros(self.layout.p),
            delta=np.zeros(self.layout.m),
            log_sigma2=self.priors.sigma_mean,
            gamma_t=self.priors.gamma_prior_mean(self.family),
        )
        return pack(parts, self.layout)


ThetaLike = Union[np.ndarray, ParameterVector]


def _as_theta(theta: ThetaLike, spec: ModelSpec) -> np.ndarray:
    if isinstance(theta, ParameterVector):
        return pack(theta, spec.layout)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.dim,):
        raise ValueError(f"theta must have shape ({spec.dim},), got {theta.shape}")
    return theta


def linear_predictor(theta: ThetaLike, spec: ModelSpec) -> np.ndarray:
    """eta = X beta + Phi delta over the training rows."""
    theta = _as_theta(theta, spec)
    layout = spec.layout
    return spec.X @ theta[layout.beta_slice] + spec.phi @ theta[layout.delta_slice]


def log_likelihood(family: Family, Z: np.ndarray, eta: np.ndarray,
                   gamma_t: Optional[float] = None) -> float:
    """Exact log-likelihood sum(log F(Z_i | eta_i, gamma)); raises DataError off-support."""
    family = Family.parse(family)
    Z = np.asarray(Z, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if Z.shape != eta.shape:
        raise ValueError(f"Z and eta must have equal shapes, got {Z.shape} and {eta.shape}")
    check_support(family, Z)
    return float(pointwise_loglik(family, Z, eta, gamma_t).sum())


def _normal_logpdf(x: np.ndarray, mean, var) -> np.ndarray:
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def _gamma_log_prior_and_grad(family: Family, g: np.ndarray, priors: PriorSpec) -> Tuple[np.ndarray, np.ndarray]:
    if family is Family.GAUSSIAN:
        return _normal_logpdf(g, priors.tau_mean, priors.tau_var), -(g - priors.tau_mean) / priors.tau_var
    if family is Family.GAMMA:
        return _normal_logpdf(g, priors.alpha_mean, priors.alpha_var), -(g - priors.alpha_mean) / priors.alpha_var
    # kappa = exp(g) ~ Gamma(a, b), density on g includes the Jacobian kappa
    a, b = priors.kappa_shape, priors.kappa_rate
    kappa = np.exp(g)
    return a * np.log(b) - gammaln(a) + a * g - b * kappa, a - b * kappa


def log_prior(params: ParameterVector, priors: PriorSpec, family: Optional[Family] = None,
              prior_cov_diag: Optional[np.ndarray] = None,
              sigma_free: bool = True) -> float:
    """Log prior density of structured parameters on the fitted scale.

    Args:
        params: beta, delta, log sigma2 and optional transformed extra parameter
        priors: Prior hyperparameters
        family: Needed when params.gamma_t is set, to pick its prior
        prior_cov_diag: Diagonal of Sigma_delta (identity when omitted)
        sigma_free: Include the log sigma2 prior term; False when sigma2 is a known constant

    Returns:
        Scalar log density
    """
    beta = np.asarray(params.beta, dtype=float).ravel()
    delta = np.asarray(params.delta, dtype=float).ravel()
    c = np.ones(delta.size) if prior_cov_diag is None else np.asarray(prior_cov_diag, dtype=float)
    b_mean, b_var = priors.beta_moments(beta.size)

    total = _normal_logpdf(beta, b_mean, b_var).sum()
    total += _normal_logpdf(delta, 0.0, np.exp(params.log_sigma2) * c).sum()
    if sigma_free:
        total += _normal_logpdf(params.log_sigma2, priors.sigma_mean, priors.sigma_var)
    if params.gamma_t is not None:
        if family is None:
            raise ValueError("family is required to evaluate the extra-parameter prior")
        lp, _ = _gamma_log_prior_and_grad(Family.parse(family), np.asarray(params.gamma_t, dtype=float), priors)
        total += lp
    return float(total)


def log_joint_batch(thetas: np.ndarray, spec: ModelSpec,
                    with_grad: bool = True) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Log joint and its gradient for a (J, D) batch of packed parameters.

    Prior terms of fixed components are treated as constants and left out.

    Returns:
        Tuple of (values of shape (J,), gradients of shape (J, D) or None)
    """
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim != 2 or thetas.shape[1] != spec.dim:
        raise ValueError(f"thetas must have shape (J, {spec.dim}), got {thetas.shape}")
    layout, priors = spec.layout, spec.priors
    n_batch = thetas.shape[0]

    beta = thetas[:, layout.beta_slice]
    delta = thetas[:, layout.delta_slice]
    if layout.sigma_free:
        log_s2 = thetas[:, layout.sigma_index]
    else:
        log_s2 = np.full(n_batch, layout.fixed_log_sigma2)
    if layout.gamma_free:
        g = thetas[:, layout.gamma_index]
    elif spec.family.has_extra_param:
        g = np.full(n_batch, layout.fixed_gamma_t)
    else:
        g = None

    eta = beta @ spec.X.T + delta @ spec.phi.T
    ll, d_eta, d_g = loglik_and_grads(spec.family, spec.Z, eta, g)

    b_mean, b_var = priors.beta_moments(layout.p)
    delta_var = np.exp(log_s2)[:, None] * spec.prior_cov_diag[None, :]
    value = ll + _normal_logpdf(beta, b_mean, b_var).sum(axis=1)
    value = value + _normal_logpdf(delta, 0.0, delta_var).sum(axis=1)
    if layout.sigma_free:
        value = value + _normal_logpdf(log_s2, priors.sigma_mean, priors.sigma_var)
    if layout.gamma_free:
        lp_g, dlp_g = _gamma_log_prior_and_grad(spec.family, g, priors)
        value = value + lp_g

    if not with_grad:
        return value, None

    grad = np.empty_like(thetas)
    grad[:, layout.beta_slice] = d_eta @ spec.X - (beta - b_mean) / b_var
    grad[:, layout.delta_slice] = d_eta @ spec.phi - delta / delta_var
    if layout.sigma_free:
        grad[:, layout.sigma_index] = (
            -0.5 * layout.m + 0.5 * (delta ** 2 / delta_var).sum(axis=1)
            - (log_s2 - priors.sigma_mean) / priors.sigma_var
        )
    if layout.gamma_free:
        grad[:, layout.gamma_index] = d_g + dlp_g
    return value, grad


def log_joint(theta: ThetaLike, spec: ModelSpec) -> float:
    """log p(Z | theta) + log p(theta)."""
    value, _ = log_joint_batch(_as_theta(theta, spec)[None, :], spec, with_grad=False)
    return float(value[0])


def grad_log_joint(theta: ThetaLike, spec: ModelSpec) -> np.ndarray:
    """Analytic gradient of log_joint with respect to the packed parameters."""
    _, grad = log_joint_batch(_as_theta(theta, spec)[None, :], spec)
    return grad[0]


def log_joint_and_grad(theta: ThetaLike, spec: ModelSpec) -> Tuple[float, np.ndarray]:
    value, grad = log_joint_batch(_as_theta(theta, spec)[None, :], spec)
    return float(value[0]), grad[0]


def grad_log_joint_batch(thetas: np.ndarray, spec: ModelSpec) -> np.ndarray:
    return log_joint_batch(thetas, spec)[1]
