"""Spatial kernels, covariance construction, GP simulation and eigenbases.

The Matern kernel uses the sqrt(2 nu) scaling:

    C(d) = s2 * 2^(1-nu) / Gamma(nu) * x^nu * K_nu(x),   x = sqrt(2 nu) d / range

with closed forms for nu in {0.5, 1.5, 2.5}.
"""
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import gamma as gamma_fn, kv

from .exceptions import CholeskyError, ConfigError, NumericalError
from .families import Family, check_support, inverse_link, sample_response

logger = logging.getLogger(__name__)

DEFAULT_JITTER_SCALE = 1e-8
MAX_JITTER_DOUBLINGS = 3

# Generative defaults for the family extra parameter (tau2, kappa, alpha).
DEFAULT_EXTRA_PARAM = {
    Family.GAUSSIAN: 1.0,
    Family.NEGBIN: 2.0,
    Family.GAMMA: 2.0,
}


class Location2D(NamedTuple):
    x: float
    y: float


LocationsLike = Union[np.ndarray, Sequence[Location2D], Sequence[Tuple[float, float]]]


@dataclass(frozen=True)
class MaternParams:
    nu: float
    range: float
    marg_var: float = 1.0

    def __post_init__(self):
        for name in ("nu", "range", "marg_var"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"Matern {name} must be finite and strictly positive, got {value}")


def as_coordinates(locations: LocationsLike) -> np.ndarray:
    """Coerce locations to a finite (N, 2) float array."""
    coords = np.asarray(locations, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"locations must have shape (N, 2), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise ValueError("locations must be finite")
    return coords


def matern_kernel(d: Union[float, np.ndarray], params: MaternParams) -> Union[float, np.ndarray]:
    """Evaluate the Matern covariance at distance(s) d.

    Args:
        d: Nonnegative finite distance or array of distances
        params: Kernel parameters

    Returns:
        Covariance value(s) with the same shape as d
    """
    d_arr = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d_arr)) or np.any(d_arr < 0):
        raise ValueError("distances must be finite and nonnegative")

    nu, s2 = params.nu, params.marg_var
    if nu == 0.5:
        out = s2 * np.exp(-d_arr / params.range)
    elif nu == 1.5:
        x = np.sqrt(3.0) * d_arr / params.range
        out = s2 * (1.0 + x) * np.exp(-x)
    elif nu == 2.5:
        x = np.sqrt(5.0) * d_arr / params.range
        out = s2 * (1.0 + x + x * x / 3.0) * np.exp(-x)
    else:
        x = np.sqrt(2.0 * nu) * d_arr / params.range
        with np.errstate(invalid="ignore", over="ignore"):
            out = s2 * (2.0 ** (1.0 - nu) / gamma_fn(nu)) * x ** nu * kv(nu, x)
        out = np.where(d_arr == 0, s2, np.nan_to_num(out, nan=0.0))

    if np.ndim(d) == 0:
        return float(out)
    return out


@dataclass
class CovarianceMatrix:
    entries: np.ndarray
    jitter: float = 0.0
    params: Optional[MaternParams] = None

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def build_covariance(locations: LocationsLike, params: MaternParams,
                     jitter: Optional[float] = None) -> CovarianceMatrix:
    """Dense Matern covariance over a set of locations.

    Args:
        locations: N locations (N >= 1)
        params: Kernel parameters
        jitter: Value added to the diagonal; defaults to 1e-8 * marg_var

    Returns:
        CovarianceMatrix with entries of shape (N, N)
    """
    coords = as_coordinates(locations)
    if coords.shape[0] < 1:
        raise ValueError("at least one location is required")
    if jitter is None:
        jitter = DEFAULT_JITTER_SCALE * params.marg_var
    if jitter < 0:
        raise ValueError(f"jitter must be nonnegative, got {jitter}")

    dist = cdist(coords, coords)
    if jitter == 0 and coords.shape[0] > 1:
        off_diag = dist[~np.eye(coords.shape[0], dtype=bool)]
        if np.any(off_diag == 0):
            msg = "duplicate locations with zero jitter: covariance matrix is singular"
            logger.warning(f"[SPATIAL] build_covariance: {msg}")
            warnings.warn(msg, RuntimeWarning)

    entries = matern_kernel(dist, params)
    entries[np.diag_indices_from(entries)] += jitter
    return CovarianceMatrix(entries=entries, jitter=float(jitter), params=params)


def robust_cholesky(cov: CovarianceMatrix) -> np.ndarray:
    """Lower Cholesky factor, doubling the diagonal jitter up to three times on failure."""
    base = cov.jitter
    for attempt in range(MAX_JITTER_DOUBLINGS + 1):
        extra = base * (2 ** attempt - 1)
        try:
            matrix = cov.entries if extra == 0 else cov.entries + extra * np.eye(cov.n)
            factor = linalg.cholesky(matrix, lower=True)
            if attempt:
                logger.info(f"[SPATIAL] robust_cholesky: succeeded with jitter {base * 2 ** attempt:.3e}")
            return factor
        except linalg.LinAlgError:
            logger.debug(f"[SPATIAL] robust_cholesky: attempt {attempt} failed (jitter {base + extra:.3e})")
            if base == 0:
                break
    raise CholeskyError(
        f"Cholesky factorization failed with jitter {cov.jitter:.3e}; "
        f"increase the jitter (escalated {MAX_JITTER_DOUBLINGS} doublings)"
    )


def sample_gp(cov: CovarianceMatrix, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Zero-mean GP draw(s) L z with L the lower Cholesky factor of cov.

    Args:
        cov: Covariance to sample from
        rng: Seeded generator
        size: Number of independent replicates; None for a single field

    Returns:
        Field of shape (N,) or (size, N)
    """
    factor = robust_cholesky(cov)
    if size is None:
        return factor @ rng.standard_normal(cov.n)
    return rng.standard_normal((size, cov.n)) @ factor.T


class PriorCovMode(str, Enum):
    IDENTITY = "identity"
    EIGENVALUE_DIAGONAL = "eigenvalue-diagonal"


@dataclass
class BasisSystem:
    phi_matrix: np.ndarray
    eigenvalues: np.ndarray
    prior_cov_mode: PriorCovMode = PriorCovMode.IDENTITY

    @property
    def m(self) -> int:
        return self.phi_matrix.shape[1]

    @property
    def n(self) -> int:
        return self.phi_matrix.shape[0]

    def prior_cov_diag(self) -> np.ndarray:
        """Diagonal of Sigma_delta (the coefficient prior covariance before scaling by sigma2)."""
        if self.prior_cov_mode is PriorCovMode.EIGENVALUE_DIAGONAL:
            return self.eigenvalues.copy()
        return np.ones(self.m)

    def rows(self, idx: np.ndarray) -> np.ndarray:
        return self.phi_matrix[np.asarray(idx)]


def leading_eigenbasis(cov: CovarianceMatrix, m: int,
                       prior_cov_mode: Union[str, PriorCovMode] = PriorCovMode.IDENTITY) -> BasisSystem:
    """The m leading eigenvectors of a covariance matrix.

    Columns are ordered by descending eigenvalue and sign-normalized so that
    the entry of largest magnitude in each column is positive.
    """
    n = cov.n
    if m < 1 or m > n:
        raise ValueError(f"m must satisfy 1 <= m <= N={n}, got {m}")
    mode = PriorCovMode(prior_cov_mode)

    values, vectors = linalg.eigh(cov.entries, subset_by_index=[n - m, n - 1])
    values = values[::-1].copy()
    vectors = vectors[:, ::-1].copy()

    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(m)])
    signs[signs == 0] = 1.0
    vectors *= signs

    if np.any(values <= 0):
        raise NumericalError(
            f"leading eigenvalues must be positive (smallest kept: {values[-1]:.3e}); "
            "increase the jitter or reduce m"
        )
    logger.info(f"[SPATIAL] leading_eigenbasis: N={n}, m={m}, "
                f"eigenvalue range [{values[-1]:.4g}, {values[0]:.4g}]")
    return BasisSystem(phi_matrix=vectors, eigenvalues=values, prior_cov_mode=mode)


@dataclass
class SyntheticScenario:
    family: Family
    matern: MaternParams
    beta_true: Tuple[float, ...] = (1.0, 1.0)
    n_train: int = 1600
    n_test: int = 400
    extra_param_true: Optional[float] = None
    seed: int = 1
    jitter: Optional[float] = None

    def __post_init__(self):
        self.family = Family.parse(self.family)
        self.beta_true = tuple(float(b) for b in self.beta_true)
        if self.n_train <= 0 or self.n_test <= 0:
            raise ConfigError(f"n_train and n_test must be positive, got {self.n_train}, {self.n_test}")
        if self.extra_param_true is not None and self.extra_param_true < 0:
            raise ConfigError(f"extra_param_true must be nonnegative, got {self.extra_param_true}")

    @property
    def n(self) -> int:
        return self.n_train + self.n_test

    @property
    def extra_param(self) -> Optional[float]:
        """Natural-scale extra parameter used for generation (None for Poisson/Bernoulli)."""
        if not self.family.has_extra_param:
            return None
        if self.extra_param_true is None:
            return DEFAULT_EXTRA_PARAM[self.family]
        return float(self.extra_param_true)

    @property
    def label(self) -> str:
        return f"{self.family.value}_nu{self.matern.nu:g}_phi{self.matern.range:g}"


@dataclass
class SpatialDataset:
    """Locations (N x 2), covariates (N x p), responses and a train/test split."""
    locations: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    family: Family

    def __post_init__(self):
        self.family = Family.parse(self.family)
        self.locations = as_coordinates(self.locations)
        n = self.locations.shape[0]
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X.reshape(n, -1)
        if self.X.shape[0] != n:
            raise ValueError(f"X must have {n} rows, got {self.X.shape[0]}")
        self.Z = np.asarray(self.Z, dtype=float)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        if self.Z.shape != (n,):
            raise ValueError(f"Z must have length {n}, got shape {self.Z.shape}")
        split = np.concatenate([self.train_idx, self.test_idx])
        if split.size != n or np.unique(split).size != n or (n and (split.min() < 0 or split.max() >= n)):
            raise ValueError("train_idx and test_idx must partition the N rows")
        check_support(self.family, self.Z)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def location_list(self) -> List[Location2D]:
        return [Location2D(float(x), float(y)) for x, y in self.locations]


@dataclass
class TruthRecord:
    beta: np.ndarray
    omega: np.ndarray
    extra_param: Optional[float] = None
    eta: np.ndarray = field(default=None, repr=False)

    @property
    def gamma_t(self) -> Optional[float]:
        if self.extra_param is None or self.extra_param <= 0:
            return None
        return float(np.log(self.extra_param))


def simulate_dataset(scenario: SyntheticScenario,
                     omega: Optional[np.ndarray] = None) -> Tuple[SpatialDataset, TruthRecord]:
    """Generate one synthetic basis-SGLMM dataset.

    Locations are uniform on the unit square, covariates Unif(-1, 1), the
    latent field a Matern GP draw (or the supplied omega), and responses are
    drawn from the family with its link. The first n_train rows form the
    training split.

    Args:
        scenario: Scenario definition (its seed fixes every draw)
        omega: Optional latent field of length N that replaces the GP draw

    Returns:
        Tuple of (dataset, truth record)
    """
    rng = np.random.default_rng(scenario.seed)
    n, p = scenario.n, len(scenario.beta_true)
    locations = rng.uniform(0.0, 1.0, size=(n, 2))
    X = rng.uniform(-1.0, 1.0, size=(n, p))
    if omega is None:
        cov = build_covariance(locations, scenario.matern, scenario.jitter)
        omega = sample_gp(cov, rng)
    else:
        omega = np.asarray(omega, dtype=float)
        if omega.shape != (n,):
            raise ValueError(f"omega must have length {n}, got shape {omega.shape}")
    beta = np.asarray(scenario.beta_true, dtype=float)
    eta = X @ beta + omega
    Z = sample_response(scenario.family, eta, scenario.extra_param, rng)

    dataset = SpatialDataset(
        locations=locations,
        X=X,
        Z=Z,
        train_idx=np.arange(scenario.n_train),
        test_idx=np.arange(scenario.n_train, n),
        family=scenario.family,
    )
    truth = TruthRecord(beta=beta, omega=omega, extra_param=scenario.extra_param, eta=eta)
    logger.info(f"[SPATIAL] simulate_dataset: {scenario.label} N={n} seed={scenario.seed} "
                f"mean(Z)={Z.mean():.4g} mean(mu)={inverse_link(scenario.family, eta).mean():.4g}")
    return dataset, truth


def scenario_grid(n_train: int = 1600, n_test: int = 400, seed: int = 1,
                  beta_true: Tuple[float, ...] = (1.0, 1.0),
                  nus: Sequence[float] = (0.5, 1.5),
                  ranges: Sequence[float] = (0.1, 0.3),
                  marg_var: float = 1.0) -> List[SyntheticScenario]:
    """The (family x nu x range) simulation grid; 20 scenarios with the defaults."""
    return [
        SyntheticScenario(
            family=family,
            matern=MaternParams(nu=nu, range=rng_, marg_var=marg_var),
            beta_true=beta_true,
            n_train=n_train,
            n_test=n_test,
            seed=seed,
        )
        for family, nu, rng_ in product(
            (Family.GAMMA, Family.NEGBIN, Family.BERNOULLI, Family.POISSON, Family.GAUSSIAN), nus, ranges)
    ]
