"""MCMC baselines targeting the same log joint as the variational fitter.

- Component-wise adaptive random-walk Metropolis-Hastings; one sweep over all
  coordinates is a numba-compiled kernel that updates the linear predictor
  incrementally.
- Hamiltonian Monte Carlo with a fixed number of leapfrog steps and a
  dual-averaged step size.
- Chain diagnostics: initial-monotone-sequence ESS and batch-means standard
  errors.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy.fft import irfft, next_fast_len, rfft

from .exceptions import ConfigError, DataError, SamplerError
from .families import Family
from .model import ModelSpec, log_joint, log_joint_and_grad

logger = logging.getLogger(__name__)

FAMILY_CODES = {
    Family.GAUSSIAN: 0,
    Family.POISSON: 1,
    Family.BERNOULLI: 2,
    Family.NEGBIN: 3,
    Family.GAMMA: 4,
}
DIVERGENCE_THRESHOLD = 1000.0
MAX_DIVERGENT_FRACTION = 0.5
ETA_REFRESH_EVERY = 1000
MIN_BATCH_MEANS_DRAWS = 100


@dataclass
class MhConfig:
    iters: int = 100000
    burn_in: int = 20000
    thin: int = 10
    init_step_sds: Optional[Sequence[float]] = None
    adapt: bool = True
    adapt_target: float = 0.234
    seed: int = 0
    log_every: int = 10000

    def __post_init__(self):
        if self.iters < 1 or not 0 <= self.burn_in < self.iters:
            raise ConfigError(f"mh needs 0 <= burn_in < iters, got burn_in={self.burn_in}, iters={self.iters}")
        if self.thin < 1:
            raise ConfigError(f"mh thin must be >= 1, got {self.thin}")
        if not 0 < self.adapt_target < 1:
            raise ConfigError(f"mh adapt_target must lie in (0, 1), got {self.adapt_target}")


@dataclass
class HmcConfig:
    iters: int = 2000
    warmup: int = 500
    leapfrog_steps: int = 20
    init_step_size: float = 0.01
    mass_diag: Optional[Sequence[float]] = None
    target_accept: float = 0.8
    seed: int = 0
    log_every: int = 500

    def __post_init__(self):
        if self.iters < 1 or not 0 <= self.warmup < self.iters:
            raise ConfigError(f"hmc needs 0 <= warmup < iters, got warmup={self.warmup}, iters={self.iters}")
        if self.leapfrog_steps < 1:
            raise ConfigError(f"hmc leapfrog_steps must be >= 1, got {self.leapfrog_steps}")
        if not self.init_step_size > 0:
            raise ConfigError(f"hmc init_step_size must be positive, got {self.init_step_size}")


@dataclass
class ChainOutput:
    samples: np.ndarray
    accept_rate: float
    walltime_s: float
    ess: np.ndarray
    names: List[str] = field(default_factory=list)
    iterations: np.ndarray = field(default=None, repr=False)
    iterations_run: int = 0
    divergences: int = 0
    step_sizes: np.ndarray = field(default=None, repr=False)

    @property
    def ess_per_second(self) -> np.ndarray:
        return self.ess / self.walltime_s if self.walltime_s > 0 else np.full_like(self.ess, np.nan)


# ---------------------------------------------------------------------------
# Metropolis-Hastings kernel
# ---------------------------------------------------------------------------

@njit(cache=True)
def _softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True)
def _eta_part(code, z, eta, g):
    """Terms of the pointwise log-likelihood that depend on eta."""
    if code == 0:
        r = z - eta
        return -0.5 * r * r * math.exp(-g)
    if code == 1:
        return z * eta - math.exp(eta)
    if code == 2:
        return z * eta - _softplus(eta)
    if code == 3:
        return -math.exp(g) * _softplus(eta - g) - z * _softplus(g - eta)
    a = math.exp(g)
    return -a * eta - a * z * math.exp(-eta)


@njit(cache=True)
def _full_point(code, z, eta, g):
    """Pointwise log-likelihood including every term that depends on g."""
    if code == 0:
        return -0.5 * g + _eta_part(code, z, eta, g)
    if code == 3:
        k = math.exp(g)
        return math.lgamma(z + k) - math.lgamma(k) + _eta_part(code, z, eta, g)
    if code == 4:
        a = math.exp(g)
        return a * g - math.lgamma(a) + (a - 1.0) * math.log(z) + _eta_part(code, z, eta, g)
    return _eta_part(code, z, eta, g)


@njit(cache=True)
def _gamma_log_prior(code, g, h1, h2):
    if code == 3:
        # kappa = exp(g) ~ Gamma(h1, h2) with the log-scale Jacobian
        return h1 * g - h2 * math.exp(g)
    return -0.5 * (g - h1) ** 2 / h2


@njit(cache=True)
def _coord_log_ratio(k, new, theta, eta, X, Phi, z, c_diag, beta_mean, beta_var, ints, hyper):
    """log p(theta') - log p(theta) when coordinate k moves to new."""
    code, p, m, sig_idx, gam_idx = ints[0], ints[1], ints[2], ints[3], ints[4]
    ls2 = theta[sig_idx] if sig_idx >= 0 else hyper[4]
    g = theta[gam_idx] if gam_idx >= 0 else hyper[5]
    old = theta[k]
    n = z.shape[0]
    out = 0.0
    if k < p + m:
        step = new - old
        if k < p:
            for i in range(n):
                e = eta[i]
                out += _eta_part(code, z[i], e + step * X[i, k], g) - _eta_part(code, z[i], e, g)
            out += -0.5 * ((new - beta_mean[k]) ** 2 - (old - beta_mean[k]) ** 2) / beta_var[k]
        else:
            j = k - p
            for i in range(n):
                e = eta[i]
                out += _eta_part(code, z[i], e + step * Phi[i, j], g) - _eta_part(code, z[i], e, g)
            out += -0.5 * (new * new - old * old) / (math.exp(ls2) * c_diag[j])
    elif k == sig_idx:
        ss = 0.0
        for j in range(m):
            ss += theta[p + j] ** 2 / c_diag[j]
        out += -0.5 * m * (new - old) - 0.5 * ss * (math.exp(-new) - math.exp(-old))
        out += -0.5 * ((new - hyper[0]) ** 2 - (old - hyper[0]) ** 2) / hyper[1]
    else:
        for i in range(n):
            out += _full_point(code, z[i], eta[i], new) - _full_point(code, z[i], eta[i], old)
        out += _gamma_log_prior(code, new, hyper[2], hyper[3]) - _gamma_log_prior(code, old, hyper[2], hyper[3])
    return out


@njit(cache=True)
def _mh_sweep(theta, eta, log_scales, normals, log_us, accepted, X, Phi, z, c_diag,
              beta_mean, beta_var, ints, hyper):
    p, m = ints[1], ints[2]
    for k in range(theta.shape[0]):
        old = theta[k]
        new = old + math.exp(log_scales[k]) * normals[k]
        ratio = _coord_log_ratio(k, new, theta, eta, X, Phi, z, c_diag, beta_mean, beta_var, ints, hyper)
        if log_us[k] < ratio:
            step = new - old
            if k < p:
                for i in range(eta.shape[0]):
                    eta[i] += step * X[i, k]
            elif k < p + m:
                for i in range(eta.shape[0]):
                    eta[i] += step * Phi[i, k - p]
            theta[k] = new
            accepted[k] = 1
        else:
            accepted[k] = 0


class _MhTarget:
    """Flat arrays handed to the compiled kernel."""

    def __init__(self, model: ModelSpec):
        layout, priors = model.layout, model.priors
        family = model.family
        self.X = np.ascontiguousarray(model.X)
        self.Phi = np.ascontiguousarray(model.phi)
        self.z = model.Z
        self.c_diag = model.prior_cov_diag
        self.beta_mean, self.beta_var = priors.beta_moments(layout.p)
        self.ints = np.array([
            FAMILY_CODES[family],
            layout.p,
            layout.m,
            -1 if layout.sigma_index is None else layout.sigma_index,
            -1 if layout.gamma_index is None else layout.gamma_index,
        ], dtype=np.int64)
        if family is Family.NEGBIN:
            g1, g2 = priors.kappa_shape, priors.kappa_rate
        elif family is Family.GAUSSIAN:
            g1, g2 = priors.tau_mean, priors.tau_var
        else:
            g1, g2 = priors.alpha_mean, priors.alpha_var
        fixed_ls2 = layout.fixed_log_sigma2 if layout.fixed_log_sigma2 is not None else 0.0
        fixed_g = layout.fixed_gamma_t if layout.fixed_gamma_t is not None else 0.0
        self.hyper = np.array([priors.sigma_mean, priors.sigma_var, g1, g2, fixed_ls2, fixed_g], dtype=float)
        self.layout = layout

    def eta(self, theta: np.ndarray) -> np.ndarray:
        return self.X @ theta[self.layout.beta_slice] + self.Phi @ theta[self.layout.delta_slice]


def mh_log_accept_ratio(theta: np.ndarray, coord: int, new_value: float, model: ModelSpec) -> float:
    """Log acceptance ratio of moving one coordinate, as the compiled sweep computes it.

    The random-walk proposal is symmetric, so the acceptance probability is
    min(1, exp(ratio)).
    """
    theta = np.asarray(theta, dtype=float).copy()
    target = _MhTarget(model)
    return float(_coord_log_ratio(int(coord), float(new_value), theta, target.eta(theta), target.X, target.Phi,
                                  target.z, target.c_diag, target.beta_mean, target.beta_var,
                                  target.ints, target.hyper))


def _warm_up_kernels() -> None:
    """Compile the sweep outside any timed region."""
    theta = np.zeros(3)
    ints = np.array([0, 1, 1, 2, -1], dtype=np.int64)
    _mh_sweep(theta, np.zeros(2), np.zeros(3), np.zeros(3), np.full(3, -np.inf), np.zeros(3, dtype=np.int64),
              np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(2), np.ones(1), np.zeros(1), np.ones(1),
              ints, np.array([0.0, 1.0, 0.0, 1.0, 0.0, 0.0]))


def _resolve_step_sds(cfg_sds: Optional[Sequence[float]], dim: int, default: float = 0.1) -> np.ndarray:
    if cfg_sds is None:
        return np.full(dim, default)
    sds = np.broadcast_to(np.asarray(cfg_sds, dtype=float), (dim,)).copy()
    if np.any(sds <= 0):
        raise ConfigError("init_step_sds must be strictly positive")
    return sds


def mh_fit(model: ModelSpec, cfg: MhConfig) -> ChainOutput:
    """Component-wise adaptive random-walk Metropolis-Hastings.

    During burn-in each coordinate's log proposal scale moves by
    t^-0.6 * (accepted - adapt_target); afterwards the scales are frozen.
    Draws after burn-in are kept every `thin` iterations.
    """
    rng = np.random.default_rng(cfg.seed)
    dim = model.dim
    theta = model.initial_theta()
    if not np.isfinite(log_joint(theta, model)):
        raise SamplerError("initial log joint is not finite; check data support and priors")
    target = _MhTarget(model)
    eta = target.eta(theta)
    log_scales = np.log(_resolve_step_sds(cfg.init_step_sds, dim))
    accepted = np.zeros(dim, dtype=np.int64)
    _warm_up_kernels()

    kept, kept_iters = [], []
    post_accepts = np.zeros(dim)
    logger.info(f"[MH] mh_fit: D={dim} N={model.n} iters={cfg.iters} burn_in={cfg.burn_in} thin={cfg.thin}")

    start = time.perf_counter()
    for t in range(1, cfg.iters + 1):
        normals = rng.standard_normal(dim)
        log_us = np.log(rng.uniform(size=dim))
        _mh_sweep(theta, eta, log_scales, normals, log_us, accepted, target.X, target.Phi, target.z,
                  target.c_diag, target.beta_mean, target.beta_var, target.ints, target.hyper)
        if t <= cfg.burn_in:
            if cfg.adapt:
                log_scales += t ** -0.6 * (accepted - cfg.adapt_target)
        else:
            post_accepts += accepted
            if (t - cfg.burn_in) % cfg.thin == 0:
                kept.append(theta.copy())
                kept_iters.append(t)
        if t % ETA_REFRESH_EVERY == 0:
            eta = target.eta(theta)
        if cfg.log_every and t % cfg.log_every == 0:
            logger.info(f"[MH] mh_fit: iter {t} mean step sd={np.exp(log_scales).mean():.4g}")
    walltime = time.perf_counter() - start

    samples = np.array(kept, dtype=float).reshape(-1, dim)
    accept_rate = float(post_accepts.sum() / (dim * (cfg.iters - cfg.burn_in)))
    ess_values = ess(samples) if samples.shape[0] >= 10 else np.full(dim, np.nan)
    logger.info(f"[MH] mh_fit: kept {samples.shape[0]} draws, acceptance {accept_rate:.3f}, {walltime:.3f}s")
    return ChainOutput(
        samples=samples,
        accept_rate=accept_rate,
        walltime_s=walltime,
        ess=ess_values,
        names=model.layout.names(),
        iterations=np.asarray(kept_iters, dtype=np.int64),
        iterations_run=cfg.iters,
        step_sizes=np.exp(log_scales),
    )


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo
# ---------------------------------------------------------------------------

class DualAveragingStepSize:
    """Dual-averaging step-size adaptation toward a target acceptance probability."""

    def __init__(self, initial_step_size: float, target_accept: float = 0.8, gamma: float = 0.05,
                 t0: float = 10.0, kappa: float = 0.75):
        self.mu = np.log(10 * initial_step_size)
        self.target_accept = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.t = 0
        self.error_avg = 0.0
        self.log_averaged_step = 0.0

    def update(self, p_accept: float) -> Tuple[float, float]:
        """Returns (next step size, smoothed step size)."""
        if not np.isfinite(p_accept):
            p_accept = 0.0
        p_accept = min(p_accept, 1.0)
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.error_avg = (1 - w) * self.error_avg + w * (self.target_accept - p_accept)
        log_step = self.mu - np.sqrt(self.t) / self.gamma * self.error_avg
        eta = self.t ** -self.kappa
        self.log_averaged_step = eta * log_step + (1 - eta) * self.log_averaged_step
        return float(np.exp(log_step)), float(np.exp(self.log_averaged_step))


def hamiltonian(theta: np.ndarray, momentum: np.ndarray, model: ModelSpec,
                inv_mass: Optional[np.ndarray] = None) -> float:
    inv_mass = np.ones_like(momentum) if inv_mass is None else inv_mass
    return -log_joint(theta, model) + 0.5 * float(np.sum(momentum ** 2 * inv_mass))


def leapfrog(theta: np.ndarray, momentum: np.ndarray, step_size: float, n_steps: int,
             model: ModelSpec, inv_mass: Optional[np.ndarray] = None,
             grad: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Integrate Hamilton's equations for n_steps leapfrog steps.

    Args:
        theta: Start position
        momentum: Start momentum
        step_size: Integrator step
        n_steps: Number of leapfrog steps
        model: Target (potential = -log joint)
        inv_mass: Diagonal inverse mass; identity when omitted
        grad: Gradient of the log joint at theta, recomputed when omitted

    Returns:
        Tuple of (position, momentum, log joint at the end, gradient at the end);
        the log joint is NaN when the trajectory left the finite region.
    """
    inv_mass = np.ones_like(theta) if inv_mass is None else inv_mass
    theta = np.array(theta, dtype=float)
    p = np.array(momentum, dtype=float)
    if grad is None:
        _, grad = log_joint_and_grad(theta, model)
    logp = np.nan
    with np.errstate(over="ignore", invalid="ignore"):
        p = p + 0.5 * step_size * grad
        for i in range(n_steps):
            theta = theta + step_size * inv_mass * p
            logp, grad = log_joint_and_grad(theta, model)
            if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
                return theta, p, float("nan"), grad
            if i < n_steps - 1:
                p = p + step_size * grad
        p = p + 0.5 * step_size * grad
    return theta, p, float(logp), grad


def hmc_fit(model: ModelSpec, cfg: HmcConfig) -> ChainOutput:
    """Fixed-length HMC; the step size is dual-averaged during warmup, then frozen.

    Trajectories whose energy error exceeds 1000 (or turns non-finite) are
    rejected and counted as divergent; more than half divergent aborts.
    """
    rng = np.random.default_rng(cfg.seed)
    dim = model.dim
    if cfg.mass_diag is None:
        mass = np.ones(dim)
    else:
        mass = np.broadcast_to(np.asarray(cfg.mass_diag, dtype=float), (dim,)).copy()
        if np.any(mass <= 0):
            raise ConfigError("hmc mass_diag must be strictly positive")
    inv_mass = 1.0 / mass

    theta = model.initial_theta()
    logp, grad = log_joint_and_grad(theta, model)
    if not np.isfinite(logp):
        raise SamplerError("initial log joint is not finite; check data support and priors")

    step = cfg.init_step_size
    adapter = DualAveragingStepSize(step, target_accept=cfg.target_accept)
    kept, kept_iters = [], []
    post_accept_prob = 0.0
    divergences = 0
    logger.info(f"[HMC] hmc_fit: D={dim} N={model.n} iters={cfg.iters} warmup={cfg.warmup} "
                f"L={cfg.leapfrog_steps}")

    start = time.perf_counter()
    for t in range(1, cfg.iters + 1):
        p0 = rng.standard_normal(dim) * np.sqrt(mass)
        log_u = np.log(rng.uniform())
        new_theta, p1, new_logp, new_grad = leapfrog(theta, p0, step, cfg.leapfrog_steps, model, inv_mass, grad)
        h0 = -logp + 0.5 * np.sum(p0 ** 2 * inv_mass)
        h1 = -new_logp + 0.5 * np.sum(p1 ** 2 * inv_mass)
        energy_error = h1 - h0
        if not np.isfinite(energy_error) or energy_error > DIVERGENCE_THRESHOLD:
            divergences += 1
            accept_prob = 0.0
        else:
            accept_prob = float(min(1.0, np.exp(-energy_error)))
            if log_u < -energy_error:
                theta, logp, grad = new_theta, new_logp, new_grad

        if t <= cfg.warmup:
            step, smoothed = adapter.update(accept_prob)
            if t == cfg.warmup:
                step = smoothed
                logger.info(f"[HMC] hmc_fit: warmup done, step size fixed to {step:.4g}")
        else:
            post_accept_prob += accept_prob
            kept.append(theta.copy())
            kept_iters.append(t)
        if t == cfg.warmup and divergences > MAX_DIVERGENT_FRACTION * t:
            raise SamplerError(f"{divergences} of {t} warmup trajectories diverged; "
                               "lower init_step_size or rescale the model")
        if cfg.log_every and t % cfg.log_every == 0:
            logger.info(f"[HMC] hmc_fit: iter {t} step={step:.4g} divergences={divergences}")
    walltime = time.perf_counter() - start

    if divergences > MAX_DIVERGENT_FRACTION * cfg.iters:
        raise SamplerError(f"{divergences} of {cfg.iters} trajectories diverged (energy error > "
                           f"{DIVERGENCE_THRESHOLD:g}); lower init_step_size or increase warmup")
    samples = np.array(kept, dtype=float).reshape(-1, dim)
    accept_rate = post_accept_prob / max(1, cfg.iters - cfg.warmup)
    ess_values = ess(samples) if samples.shape[0] >= 10 else np.full(dim, np.nan)
    logger.info(f"[HMC] hmc_fit: kept {samples.shape[0]} draws, mean acceptance {accept_rate:.3f}, "
                f"{divergences} divergences, {walltime:.3f}s")
    return ChainOutput(
        samples=samples,
        accept_rate=float(accept_rate),
        walltime_s=walltime,
        ess=ess_values,
        names=model.layout.names(),
        iterations=np.asarray(kept_iters, dtype=np.int64),
        iterations_run=cfg.iters,
        divergences=divergences,
        step_sizes=np.full(dim, step),
    )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def _autocorrelation(x: np.ndarray) -> np.ndarray:
    n = x.size
    centered = x - x.mean()
    n_fft = next_fast_len(2 * n)
    spectrum = rfft(centered, n=n_fft)
    acov = irfft(spectrum * np.conjugate(spectrum), n=n_fft)[:n] / n
    return acov / acov[0]


def _ess_1d(x: np.ndarray) -> float:
    n = x.size
    if np.ptp(x) == 0:
        return 1.0
    rho = _autocorrelation(x)
    n_pairs = n // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    # initial positive sequence, then enforce monotone decrease
    nonpositive = np.flatnonzero(pairs <= 0)
    if nonpositive.size:
        pairs = pairs[:nonpositive[0]]
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    if tau <= 0:
        return float(n)
    return float(min(max(n / tau, 1.0), n))


def ess(samples: np.ndarray) -> np.ndarray:
    """Per-coordinate effective sample size (Geyer initial monotone sequence).

    Args:
        samples: Draws of shape (N,) or (N, D), N >= 10

    Returns:
        Array of D values, each in [1, N]
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] < 10:
        raise ValueError(f"ESS needs at least 10 draws, got {samples.shape[0]}")
    return np.array([_ess_1d(samples[:, j]) for j in range(samples.shape[1])])


def batch_means_se(samples: np.ndarray) -> np.ndarray:
    """Monte Carlo standard error by non-overlapping batch means with batch size floor(sqrt(N)), N >= 100."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n = samples.shape[0]
    if n < MIN_BATCH_MEANS_DRAWS:
        raise DataError(f"batch means need at least {MIN_BATCH_MEANS_DRAWS} draws, got {n}")
    size = int(np.floor(np.sqrt(n)))
    n_batches = n // size
    batches = samples[:n_batches * size].reshape(n_batches, size, -1).mean(axis=1)
    var_bm = size * batches.var(axis=0, ddof=1)
    return np.sqrt(var_bm / n)
