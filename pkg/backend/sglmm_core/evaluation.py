"""Held-out prediction, accuracy metrics and posterior summaries."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .exceptions import MetricError
from .families import Family, inverse_link
from .mcmc import ChainOutput
from .model import ParameterLayout
from .sivi import PosteriorDraws

logger = logging.getLogger(__name__)

SUMMARY_QUANTILES = (0.025, 0.5, 0.975)


@dataclass
class PredictionSet:
    point_pred: np.ndarray
    pred_draws: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class PosteriorSummary:
    table: pd.DataFrame
    histograms: Dict[str, pd.DataFrame]


def predict(draws: Union[PosteriorDraws, ChainOutput, np.ndarray], X_test: np.ndarray, Phi_test: np.ndarray,
            family: Family, layout: Optional[ParameterLayout] = None,
            keep_draws: bool = False) -> PredictionSet:
    """Posterior predictive mean of g^-1(X beta + Phi delta) at held-out rows.

    Args:
        draws: PosteriorDraws, a ChainOutput or an (S, D) sample matrix
        X_test: Covariates, shape (n_test, p)
        Phi_test: Basis rows, shape (n_test, m)
        family: Response family (fixes the inverse link)
        layout: Packing layout; taken from PosteriorDraws when omitted,
            otherwise beta and delta are assumed to lead each row
        keep_draws: Also return the S x n_test per-draw means

    Returns:
        PredictionSet
    """
    family = Family.parse(family)
    if isinstance(draws, PosteriorDraws):
        layout = layout or draws.layout
        samples = draws.samples
    elif isinstance(draws, ChainOutput):
        samples = draws.samples
    else:
        samples = np.asarray(draws, dtype=float)
    samples = np.atleast_2d(samples)
    X_test = np.asarray(X_test, dtype=float)
    Phi_test = np.asarray(Phi_test, dtype=float)
    if X_test.ndim != 2 or Phi_test.ndim != 2 or X_test.shape[0] != Phi_test.shape[0]:
        raise ValueError(f"X_test {X_test.shape} and Phi_test {Phi_test.shape} must be 2-D with equal rows")
    p, m = X_test.shape[1], Phi_test.shape[1]
    if layout is not None and (layout.p != p or layout.m != m):
        raise ValueError(f"layout expects p={layout.p}, m={layout.m}; got p={p}, m={m}")
    if samples.shape[1] < p + m:
        raise ValueError(f"draws have {samples.shape[1]} columns, need at least p + m = {p + m}")

    eta = samples[:, :p] @ X_test.T + samples[:, p:p + m] @ Phi_test.T
    means = inverse_link(family, eta)
    return PredictionSet(point_pred=means.mean(axis=0), pred_draws=means if keep_draws else None)


def rmspe(z_true: Sequence[float], z_pred: Sequence[float]) -> float:
    z_true = np.asarray(z_true, dtype=float)
    z_pred = np.asarray(z_pred, dtype=float)
    if z_true.shape != z_pred.shape:
        raise ValueError(f"length mismatch: {z_true.shape} vs {z_pred.shape}")
    if z_true.size == 0:
        raise ValueError("rmspe of empty input")
    return float(np.sqrt(np.mean((z_true - z_pred) ** 2)))


def auc(z_true: Sequence[float], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    z_true = np.asarray(z_true, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if z_true.shape != scores.shape:
        raise ValueError(f"length mismatch: {z_true.shape} vs {scores.shape}")
    positive = z_true == 1
    n_pos = int(positive.sum())
    n_neg = int((z_true == 0).sum())
    if n_pos + n_neg != z_true.size:
        raise MetricError("AUC labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def score(family: Family, z_true: np.ndarray, z_pred: np.ndarray) -> Dict[str, float]:
    """The family's held-out metric: AUC for Bernoulli, RMSPE otherwise."""
    if Family.parse(family) is Family.BERNOULLI:
        return {"auc": auc(z_true, z_pred)}
    return {"rmspe": rmspe(z_true, z_pred)}


def speedup(walltime_baseline: float, walltime_sivi: float) -> float:
    return float(walltime_baseline) / float(walltime_sivi)


def summarize(draws: Union[PosteriorDraws, ChainOutput, np.ndarray], names: Optional[List[str]] = None,
              bins: int = 50, histogram_params: Optional[Sequence[str]] = None) -> PosteriorSummary:
    """Moments, type-7 quantiles and fixed-width histograms per parameter.

    Args:
        draws: Posterior draws (S >= 10)
        names: Parameter names; taken from the draws when available
        bins: Histogram bins spanning each parameter's draw range
        histogram_params: Parameters to histogram; all when omitted

    Returns:
        PosteriorSummary with a `param,mean,sd,q025,q50,q975` table and one
        `bin_left,bin_right,mass` frame per histogrammed parameter
    """
    if isinstance(draws, (PosteriorDraws, ChainOutput)):
        names = names or list(draws.names)
        samples = draws.samples
    else:
        samples = np.asarray(draws, dtype=float)
    samples = samples.reshape(samples.shape[0], -1)
    if samples.shape[0] < 10:
        raise ValueError(f"summaries need at least 10 draws, got {samples.shape[0]}")
    names = names or [f"theta_{j + 1}" for j in range(samples.shape[1])]
    if len(names) != samples.shape[1]:
        raise ValueError(f"{len(names)} names for {samples.shape[1]} parameters")

    q = np.quantile(samples, SUMMARY_QUANTILES, axis=0, method="linear")
    table = pd.DataFrame({
        "param": names,
        "mean": samples.mean(axis=0),
        "sd": samples.std(axis=0, ddof=1),
        "q025": q[0],
        "q50": q[1],
        "q975": q[2],
    })

    wanted = set(histogram_params) if histogram_params is not None else set(names)
    histograms = {}
    for j, name in enumerate(names):
        if name not in wanted:
            continue
        column = samples[:, j]
        counts, edges = np.histogram(column, bins=bins, range=(column.min(), column.max()))
        histograms[name] = pd.DataFrame({
            "bin_left": edges[:-1],
            "bin_right": edges[1:],
            "mass": counts / counts.sum(),
        })
    return PosteriorSummary(table=table, histograms=histograms)


def walltime_quantiles(walltimes: Dict[str, Sequence[float]],
                       probs: Sequence[float] = (0.25, 0.5, 0.75)) -> pd.DataFrame:
    """Walltime quantiles per method plus speedup quantiles of each baseline over sivi."""
    rows = []
    for method, values in walltimes.items():
        values = np.asarray(values, dtype=float)
        rows.append({"method": method, **{f"q{int(round(100 * p)):02d}": v
                                          for p, v in zip(probs, np.quantile(values, probs))}})
    if "sivi" in walltimes:
        sivi = np.asarray(walltimes["sivi"], dtype=float)
        for method in ("mh", "hmc"):
            if method in walltimes:
                ratios = np.asarray(walltimes[method], dtype=float) / sivi
                rows.append({"method": f"{method}/sivi", **{f"q{int(round(100 * p)):02d}": v
                                                             for p, v in zip(probs, np.quantile(ratios, probs))}})
    return pd.DataFrame(rows)
