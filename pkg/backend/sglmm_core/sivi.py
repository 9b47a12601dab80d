"""Semi-implicit variational fitting of basis-SGLMMs.

The variational family mixes a diagonal Gaussian q(theta | psi) =
N(psi, diag(s^2)) over psi = T(eps), the push-forward of Gaussian noise
through an MLP. The entropy is replaced by the (K+1)-sample surrogate

    log (1/(K+1)) [ q(theta_j | psi_j) + sum_k q(theta_j | psi^(k)) ]

and the surrogate bound is maximized with reparameterized gradients that
flow through theta_j, psi_j and every bank member psi^(k).
"""
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from .exceptions import ConfigError, OptimizationError
from .families import LOG_2PI, Family
from .mlp import AdamState, MlpMixer, adam_step, mlp_backward, mlp_forward, mlp_forward_cached, mlp_init
from .model import ModelSpec, ParameterLayout, log_joint_batch

logger = logging.getLogger(__name__)


class StopReason(str, Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    NON_FINITE = "non_finite"


@dataclass
class SiviConfig:
    J: int = 20
    K: int = 1000
    max_iters: int = 5000
    stop_eps: float = 1e-2
    stop_window: int = 50
    noise_dim: int = 10
    hidden_dims: Tuple[int, ...] = (40, 60, 40)
    # sds for the beta, delta, log sigma2 and extra-parameter blocks
    cond_scales: Tuple[float, float, float, float] = (0.05, 0.05, 0.05, 0.05)
    lr: float = 1e-3
    seed: int = 0
    k_schedule: str = "constant"
    k_ramp_iters: int = 1000
    clip_norm: Optional[float] = 100.0
    max_non_finite: int = 3
    log_every: int = 100
    n_draws: int = 1000

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.cond_scales = tuple(float(s) for s in self.cond_scales)
        if self.J < 1:
            raise ConfigError(f"sivi J must be >= 1, got {self.J}")
        if self.K < 0:
            raise ConfigError(f"sivi K must be >= 0, got {self.K}")
        if len(self.cond_scales) != 4 or any(not s > 0 for s in self.cond_scales):
            raise ConfigError(f"sivi cond_scales must be 4 positive values, got {self.cond_scales}")
        if not self.stop_eps > 0:
            raise ConfigError(f"sivi stop_eps must be positive, got {self.stop_eps}")
        if self.stop_window < 1 or self.max_iters < 1 or self.noise_dim < 1:
            raise ConfigError("sivi stop_window, max_iters and noise_dim must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"sivi hidden_dims must be positive, got {self.hidden_dims}")
        if self.k_schedule not in ("constant", "linear"):
            raise ConfigError(f"sivi k_schedule must be 'constant' or 'linear', got {self.k_schedule!r}")

    def scale_vector(self, layout: ParameterLayout) -> np.ndarray:
        """Per-coordinate conditional sds following the packing order."""
        by_block = dict(zip(("beta", "delta", "log_sigma2", "gamma"), self.cond_scales))
        return np.array([by_block[b] for b in layout.block_of()], dtype=float)

    def k_at(self, iteration: int) -> int:
        """Bank size at a 1-based iteration; non-decreasing in the iteration."""
        if self.k_schedule == "constant" or self.K == 0:
            return self.K
        frac = min(1.0, iteration / float(self.k_ramp_iters))
        return max(1, int(math.ceil(self.K * frac)))

    def layer_dims(self, d_out: int) -> Tuple[int, ...]:
        return (self.noise_dim, *self.hidden_dims, d_out)


@dataclass
class SiviNoise:
    """Pre-drawn randomness for one surrogate evaluation."""
    eps_j: np.ndarray
    eps_bank: np.ndarray
    eps_tilde: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, J: int, K: int, noise_dim: int, dim: int) -> "SiviNoise":
        return cls(
            eps_j=rng.standard_normal((J, noise_dim)),
            eps_bank=rng.standard_normal((K, noise_dim)),
            eps_tilde=rng.standard_normal((J, dim)),
        )


@dataclass
class FitResult:
    net: MlpMixer
    elbo_trace: np.ndarray
    iters_run: int
    stop_reason: StopReason
    walltime_s: float
    layout: ParameterLayout
    scales: np.ndarray
    walltime_trace: np.ndarray = field(default=None, repr=False)
    n_clipped: int = 0

    @property
    def family(self) -> Family:
        return self.layout.family


@dataclass
class PosteriorDraws:
    samples: np.ndarray
    family: Family
    layout: ParameterLayout

    @property
    def names(self) -> List[str]:
        return self.layout.names()


def sample_mixing(net: MlpMixer, rng: np.random.Generator) -> np.ndarray:
    """psi = T(eps) with eps ~ N(0, I) of the network's input dimension."""
    return mlp_forward(net, rng.standard_normal(net.d_in))


def conditional_sample(psi: np.ndarray, scales: np.ndarray, rng: Optional[np.random.Generator] = None,
                       eps_tilde: Optional[np.ndarray] = None) -> np.ndarray:
    """Reparameterized draw theta = psi + scales * eps_tilde."""
    psi = np.asarray(psi, dtype=float)
    scales = np.asarray(scales, dtype=float)
    if psi.shape[-1:] != scales.shape:
        raise ValueError(f"psi {psi.shape} and scales {scales.shape} differ in dimension")
    if eps_tilde is None:
        eps_tilde = rng.standard_normal(psi.shape)
    return psi + scales * eps_tilde


def conditional_log_density(theta: np.ndarray, psi: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """log N(theta; psi, diag(scales^2)), summed over the last axis."""
    scales = np.asarray(scales, dtype=float)
    if np.any(scales <= 0):
        raise ValueError("conditional scales must be strictly positive")
    u = (np.asarray(theta, dtype=float) - np.asarray(psi, dtype=float)) / scales
    const = -0.5 * scales.size * LOG_2PI - np.log(scales).sum()
    return const - 0.5 * np.sum(u * u, axis=-1)


def kplus1_log_marginal(theta_j: np.ndarray, psi_j: np.ndarray, psi_bank: np.ndarray,
                        scales: np.ndarray) -> float:
    """log of the average of q(theta_j | .) over psi_j and the K bank members."""
    theta_j = np.asarray(theta_j, dtype=float)
    psi_bank = np.asarray(psi_bank, dtype=float).reshape(-1, np.size(psi_j))
    terms = np.concatenate([
        np.atleast_1d(conditional_log_density(theta_j, psi_j, scales)),
        conditional_log_density(theta_j[None, :], psi_bank, scales),
    ])
    return float(logsumexp(terms) - np.log(terms.size))


def surrogate_elbo_and_grad(net: MlpMixer, config: SiviConfig, model: ModelSpec,
                            rng: Optional[np.random.Generator] = None,
                            noise: Optional[SiviNoise] = None,
                            K: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """One Monte Carlo estimate of the surrogate bound and its gradient in the net parameters.

    Args:
        net: Mixing network with output dimension model.dim
        config: Supplies J, K and the conditional scales
        model: Target basis-SGLMM
        rng: Generator for fresh noise (unused when noise is given)
        noise: Frozen noise to replay an evaluation
        K: Bank size override (the K schedule)

    Returns:
        Tuple of (estimate, flat gradient with the layout of net.flatten())

    Raises:
        OptimizationError: if the estimate is not finite
    """
    dim = model.dim
    if net.d_out != dim:
        raise ValueError(f"network output dimension {net.d_out} does not match model dimension {dim}")
    scales = config.scale_vector(model.layout)
    if noise is None:
        noise = SiviNoise.draw(rng, config.J, config.K if K is None else K, net.d_in, dim)
    J = noise.eps_j.shape[0]
    K = noise.eps_bank.shape[0]

    inputs = np.vstack([noise.eps_j, noise.eps_bank])
    activations = mlp_forward_cached(net, inputs)
    psi_all = activations[-1]
    psi_j, bank = psi_all[:J], psi_all[J:]
    theta = psi_j + scales * noise.eps_tilde

    log_p, grad_log_p = log_joint_batch(theta, model)

    inv_var = 1.0 / scales ** 2
    const = -0.5 * dim * LOG_2PI - np.log(scales).sum()
    own = const - 0.5 * np.sum(noise.eps_tilde ** 2, axis=1)
    diff = theta[:, None, :] - bank[None, :, :]
    cross = const - 0.5 * np.einsum("jkd,d->jk", diff * diff, inv_var)
    log_terms = np.concatenate([own[:, None], cross], axis=1)
    log_marg = logsumexp(log_terms, axis=1) - np.log(K + 1)

    per_sample = log_p - log_marg
    if not np.all(np.isfinite(per_sample)):
        bad = int(np.flatnonzero(~np.isfinite(per_sample))[0])
        raise OptimizationError("non-finite surrogate ELBO estimate", theta=theta[bad].copy())
    estimate = float(per_sample.mean())

    weights = softmax(log_terms, axis=1)[:, 1:]
    # sum_k w_jk (theta_j - psi_k) / s^2 and sum_j w_jk (theta_j - psi_k) / s^2
    pull_j = (weights.sum(axis=1)[:, None] * theta - weights @ bank) * inv_var
    pull_k = (weights.T @ theta - weights.sum(axis=0)[:, None] * bank) * inv_var

    upstream = np.vstack([grad_log_p + pull_j, -pull_k]) / J
    grad_flat, _ = mlp_backward(net, inputs, upstream, activations)
    return estimate, grad_flat


def _window_converged(trace: List[float], window: int, stop_eps: float) -> bool:
    if len(trace) < 2 * window:
        return False
    last = np.mean(trace[-window:])
    prior = np.mean(trace[-2 * window:-window])
    if not (np.isfinite(last) and np.isfinite(prior)):
        return False
    return abs(last - prior) / (abs(prior) + 1e-12) < stop_eps


def fit_sivi(model: ModelSpec, config: SiviConfig) -> FitResult:
    """Maximize the surrogate bound with Adam until the trailing-window rule or max_iters.

    The same seed, config and model reproduce the trace and net bit-exactly.
    """
    rng = np.random.default_rng(config.seed)
    dims = config.layer_dims(model.dim)
    net = mlp_init(dims, rng)
    adam = AdamState(lr=config.lr, clip_norm=config.clip_norm)
    scales = config.scale_vector(model.layout)

    trace: List[float] = []
    walltimes: List[float] = []
    stop_reason = StopReason.MAX_ITERS
    n_bad = 0
    logger.info(f"[SIVI] fit_sivi: D={model.dim} N={model.n} family={model.family.value} "
                f"J={config.J} K={config.K} net={dims} seed={config.seed}")

    start = time.perf_counter()
    for it in range(1, config.max_iters + 1):
        try:
            estimate, grad = surrogate_elbo_and_grad(net, config, model, rng, K=config.k_at(it))
            params, adam = adam_step(adam, net.flatten(), grad)
        except OptimizationError as e:
            n_bad += 1
            trace.append(float("nan"))
            walltimes.append(time.perf_counter() - start)
            logger.warning(f"[SIVI] fit_sivi: iter {it} non-finite step ({n_bad} consecutive): {e}")
            if n_bad >= config.max_non_finite:
                stop_reason = StopReason.NON_FINITE
                break
            continue
        n_bad = 0
        net = MlpMixer.from_flat(dims, params)
        trace.append(estimate)
        walltimes.append(time.perf_counter() - start)

        if config.log_every and it % config.log_every == 0:
            logger.info(f"[SIVI] fit_sivi: iter {it} elbo={estimate:.6g} "
                        f"trailing={np.mean(trace[-config.stop_window:]):.6g}")
        if _window_converged(trace, config.stop_window, config.stop_eps):
            stop_reason = StopReason.CONVERGED
            break
    walltime = time.perf_counter() - start

    if adam.n_clipped:
        logger.info(f"[SIVI] fit_sivi: gradient clipped on {adam.n_clipped} of {len(trace)} iterations")
    logger.info(f"[SIVI] fit_sivi: stopped ({stop_reason.value}) after {len(trace)} iterations in {walltime:.3f}s")
    return FitResult(
        net=net,
        elbo_trace=np.asarray(trace, dtype=float),
        iters_run=len(trace),
        stop_reason=stop_reason,
        walltime_s=walltime,
        layout=model.layout,
        scales=scales,
        walltime_trace=np.asarray(walltimes, dtype=float),
        n_clipped=adam.n_clipped,
    )


def draws_from_net(net: MlpMixer, layout: ParameterLayout, scales: np.ndarray, S: int,
                   rng: np.random.Generator) -> PosteriorDraws:
    """S independent draws theta_s = T(eps_s) + scales * eps_tilde_s."""
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    if net.d_out != layout.dim:
        raise ValueError(f"network outputs {net.d_out} values, layout needs {layout.dim}")
    psi = mlp_forward(net, rng.standard_normal((S, net.d_in)))
    samples = psi + np.asarray(scales, dtype=float) * rng.standard_normal((S, layout.dim))
    return PosteriorDraws(samples=samples, family=layout.family, layout=layout)


def draw_posterior(fit: FitResult, config: Optional[SiviConfig], S: int,
                   rng: np.random.Generator) -> PosteriorDraws:
    scales = fit.scales if config is None else config.scale_vector(fit.layout)
    return draws_from_net(fit.net, fit.layout, scales, S, rng)
