"""
Experiment service.

Implements the command-line operations: simulating scenarios, fitting a
model by SIVI, MH or HMC, predicting held-out rows from a fit directory,
comparing the three methods, and sweeping the SIVI stopping threshold.
Walltimes come from the fitters and cover the fit loops only.
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from .. import __version__
from ..database.db_handler import RunRegistry
from ..sglmm_core.evaluation import PredictionSet, predict, score, speedup, summarize, walltime_quantiles
from ..sglmm_core.exceptions import CompatibilityError, ConfigError
from ..sglmm_core.families import Family
from ..sglmm_core.mcmc import MIN_BATCH_MEANS_DRAWS, ChainOutput, batch_means_se, hmc_fit, mh_fit
from ..sglmm_core.mlp import load_mlp, save_mlp
from ..sglmm_core.model import ModelSpec, ParameterLayout
from ..sglmm_core.sivi import FitResult, SiviConfig, draw_posterior, draws_from_net, fit_sivi
from ..sglmm_core.spatial import BasisSystem, SpatialDataset, build_covariance, leading_eigenbasis, scenario_grid, simulate_dataset
from . import dataset_io
from .run_config import METHODS, RunConfig

logger = logging.getLogger(__name__)

SIVI_DRAW_STREAM = 1
PREDICT_DRAW_STREAM = 2


@dataclass
class PreparedData:
    dataset: SpatialDataset
    basis: BasisSystem
    model: ModelSpec


@dataclass
class MethodRun:
    method: str
    samples: np.ndarray
    iterations: np.ndarray
    walltime_s: float
    diagnostics: Dict[str, Any]
    fit: Optional[FitResult] = field(default=None, repr=False)
    chain: Optional[ChainOutput] = field(default=None, repr=False)


def registry_from_env() -> Optional[RunRegistry]:
    path = os.getenv('SGLMM_REGISTRY')
    return RunRegistry(path) if path else None


def build_basis(dataset: SpatialDataset, config: RunConfig) -> BasisSystem:
    """Eigenbasis over all N rows (train and test) from the basis section."""
    params, m, mode, jitter = config.basis_settings()
    if m > dataset.n:
        raise ConfigError(f"basis.m={m} exceeds the number of locations N={dataset.n}")
    cov = build_covariance(dataset.locations, params, jitter)
    return leading_eigenbasis(cov, m, mode)


def prepare(config: RunConfig) -> PreparedData:
    family = config.family()
    dataset = dataset_io.read_dataset_csv(config.data_path(), family, bool(config.section("data")["intercept"]))
    priors = config.priors(family)
    fixed_log_sigma2, fixed_gamma = config.fixed_values(family)
    basis = build_basis(dataset, config)
    model = ModelSpec.from_training(dataset, basis, priors, fixed_log_sigma2, fixed_gamma)
    return PreparedData(dataset=dataset, basis=basis, model=model)


def _chain_diagnostics(method: str, chain: ChainOutput) -> Dict[str, Any]:
    names = chain.names
    enough = chain.samples.shape[0] >= MIN_BATCH_MEANS_DRAWS
    bmse = batch_means_se(chain.samples) if enough else np.full(len(names), np.nan)
    return {
        "method": method,
        "walltime_s": chain.walltime_s,
        "accept_rate": chain.accept_rate,
        "ess": dict(zip(names, chain.ess)),
        "ess_per_second": dict(zip(names, chain.ess_per_second)),
        "batch_means_se": dict(zip(names, bmse)),
        "iterations_run": chain.iterations_run,
        "kept_draws": int(chain.samples.shape[0]),
        "divergences": chain.divergences,
        "step_sizes": dict(zip(names, chain.step_sizes)),
    }


def run_method(model: ModelSpec, method: str, config: RunConfig, seed_offset: int = 0,
               **sivi_overrides) -> MethodRun:
    """Fit one model by one method and collect draws plus diagnostics."""
    if method == "sivi":
        cfg = config.sivi_config(seed_offset, **sivi_overrides)
        fit = fit_sivi(model, cfg)
        draws = draw_posterior(fit, cfg, cfg.n_draws, np.random.default_rng([cfg.seed, SIVI_DRAW_STREAM]))
        window = fit.elbo_trace[-cfg.stop_window:]
        diagnostics = {
            "method": method,
            "walltime_s": fit.walltime_s,
            "iters_run": fit.iters_run,
            "stop_reason": fit.stop_reason.value,
            "final_elbo": float(np.nanmean(window)) if np.isfinite(window).any() else None,
            "n_clipped": fit.n_clipped,
            "noise_dim": cfg.noise_dim,
            "n_draws": cfg.n_draws,
        }
        return MethodRun(method, draws.samples, np.arange(1, cfg.n_draws + 1), fit.walltime_s, diagnostics, fit=fit)
    if method == "mh":
        chain = mh_fit(model, config.mh_config(seed_offset))
    elif method == "hmc":
        chain = hmc_fit(model, config.hmc_config(seed_offset))
    else:
        raise ConfigError(f"unknown method {method!r} (expected one of: {', '.join(METHODS)})")
    return MethodRun(method, chain.samples, chain.iterations, chain.walltime_s,
                     _chain_diagnostics(method, chain), chain=chain)


def _run_method_job(model: ModelSpec, method: str, config: RunConfig, seed_offset: int) -> MethodRun:
    return run_method(model, method, config, seed_offset)


def evaluate_run(samples: np.ndarray, prepared: PreparedData) -> Tuple[PredictionSet, Dict[str, float]]:
    dataset, test_idx = prepared.dataset, prepared.dataset.test_idx
    if test_idx.size == 0:
        raise ConfigError("the dataset has no test rows to evaluate on")
    prediction = predict(samples, dataset.X[test_idx], prepared.basis.rows(test_idx), dataset.family,
                         layout=prepared.model.layout)
    return prediction, score(dataset.family, dataset.Z[test_idx], prediction.point_pred)


def _histogram_params(names: List[str]) -> List[str]:
    deltas = [n for n in names if n.startswith("delta_")]
    return [n for n in names if not n.startswith("delta_")] + deltas[:2]


class ExperimentRunner:
    """Runs one CLI command against a resolved RunConfig."""

    def __init__(self, config: RunConfig, registry: Optional[RunRegistry] = None):
        self.config = config
        self.registry = registry
        self.out_dir = Path(config.output_dir)

    @contextmanager
    def _tracked(self, command: str, method: Optional[str] = None) -> Iterator[Dict[str, Any]]:
        result: Dict[str, Any] = {}
        run_id = None
        if self.registry is not None:
            run_id = self.registry.create_run(command, method, self.config.seed, str(self.out_dir),
                                              self.config.to_metadata())
        try:
            yield result
        except Exception as e:
            if run_id:
                self.registry.fail_run(run_id, f"{type(e).__name__}: {e}")
            raise
        if run_id:
            self.registry.complete_run(run_id, result, result.get("walltime_s"))

    def _write_metadata(self, out_dir: Path, method: Optional[str] = None, **extra) -> Path:
        payload = {
            "command": self.config.command,
            "method": method,
            "seed": self.config.seed,
            "version": __version__,
            "config": self.config.to_metadata(),
            **extra,
        }
        return dataset_io.write_json(out_dir / "metadata.json", payload)

    # -- simulate ------------------------------------------------------------

    def simulate(self) -> Dict[str, Any]:
        with self._tracked("simulate") as result:
            base = self.config.scenario()
            grid = self.config.section("grid")
            if grid["enabled"]:
                scenarios = scenario_grid(base.n_train, base.n_test, base.seed, base.beta_true,
                                          grid["nus"], grid["ranges"], base.matern.marg_var)
            else:
                scenarios = [base]

            written = []
            for scenario in scenarios:
                target = self.out_dir / scenario.label if grid["enabled"] else self.out_dir
                dataset, truth = simulate_dataset(scenario)
                dataset_io.write_dataset_csv(dataset, target / "data.csv")
                dataset_io.write_truth_csv(truth, scenario.family, target / "truth.csv")
                dataset_io.write_json(target / "scenario.json", {
                    "family": scenario.family.value,
                    "nu": scenario.matern.nu,
                    "range": scenario.matern.range,
                    "marg_var": scenario.matern.marg_var,
                    "beta": list(scenario.beta_true),
                    "n_train": scenario.n_train,
                    "n_test": scenario.n_test,
                    "extra_param": scenario.extra_param,
                    "jitter": scenario.jitter,
                    "seed": scenario.seed,
                })
                written.append(str(target))
            self._write_metadata(self.out_dir, scenarios=[s.label for s in scenarios])
            logger.info(f"[RUNNER] simulate: wrote {len(written)} scenario(s) under {self.out_dir}")
            result.update({"success": True, "output_dir": str(self.out_dir), "scenarios": written})
        return result

    # -- fit -----------------------------------------------------------------

    def fit(self, method: str) -> Dict[str, Any]:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r} (expected one of: {', '.join(METHODS)})")
        with self._tracked("fit", method) as result:
            prepared = prepare(self.config)
            run = run_method(prepared.model, method, self.config)
            layout = prepared.model.layout
            names = layout.names()

            dataset_io.save_basis(self.out_dir / "basis.npz", prepared.basis)
            if run.fit is not None:
                save_mlp(run.fit.net, self.out_dir / "mlp.bin")
                dataset_io.write_trace_csv(self.out_dir / "trace.csv", run.fit.elbo_trace, run.fit.walltime_trace)
                dataset_io.write_chain_csv(self.out_dir / "samples.csv", run.iterations, run.samples, names)
            else:
                dataset_io.write_chain_csv(self.out_dir / "chain.csv", run.iterations, run.samples, names)
            if run.samples.shape[0] >= 10:
                summary = summarize(run.samples, names, histogram_params=_histogram_params(names))
                dataset_io.write_summary(self.out_dir, summary)
            dataset_io.write_json(self.out_dir / "diagnostics.json", run.diagnostics)
            self._write_metadata(
                self.out_dir, method,
                family=prepared.model.family.value,
                n=prepared.dataset.n,
                p=layout.p,
                m=layout.m,
                n_train=int(prepared.dataset.train_idx.size),
                param_names=names,
                fixed={"log_sigma2": layout.fixed_log_sigma2, "gamma": layout.fixed_gamma_t},
            )
            logger.info(f"[RUNNER] fit: {method} finished in {run.walltime_s:.3f}s, artifacts in {self.out_dir}")
            result.update({"success": True, "output_dir": str(self.out_dir), "method": method,
                           "walltime_s": run.walltime_s})
        return result

    # -- predict -------------------------------------------------------------

    def _load_fit(self, fit_dir: Path, dataset: SpatialDataset) -> Tuple[str, np.ndarray, BasisSystem, ParameterLayout, Dict[str, Any]]:
        meta = dataset_io.read_json(fit_dir / "metadata.json")
        method = meta.get("method")
        if meta.get("command") != "fit" or method not in METHODS:
            raise CompatibilityError(f"{fit_dir} does not hold fit artifacts")
        if meta.get("family") != dataset.family.value:
            raise CompatibilityError(f"fit family {meta.get('family')!r} does not match data family "
                                     f"{dataset.family.value!r}")
        basis = dataset_io.load_basis(fit_dir / "basis.npz")
        if basis.n != dataset.n:
            raise CompatibilityError(f"fit basis covers {basis.n} locations, data has {dataset.n}")
        if meta.get("p") != dataset.p or meta.get("m") != basis.m:
            raise CompatibilityError(f"fit dimensions p={meta.get('p')}, m={meta.get('m')} do not match "
                                     f"data p={dataset.p}, basis m={basis.m}")
        fixed = meta.get("fixed") or {}
        layout = ParameterLayout(dataset.p, basis.m, dataset.family, fixed.get("log_sigma2"), fixed.get("gamma"))

        if method == "sivi":
            net = load_mlp(fit_dir / "mlp.bin")
            if net.d_out != layout.dim:
                raise CompatibilityError(f"checkpoint outputs {net.d_out} values, model needs {layout.dim}")
            scales = SiviConfig(cond_scales=tuple(meta["config"]["sivi"]["cond_scales"])).scale_vector(layout)
            n_draws = int(self.config.section("predict")["draws"])
            rng = np.random.default_rng([self.config.seed, PREDICT_DRAW_STREAM])
            samples = draws_from_net(net, layout, scales, n_draws, rng).samples
        else:
            _, samples, names = dataset_io.read_chain_csv(fit_dir / "chain.csv")
            if names != layout.names():
                raise CompatibilityError(f"chain columns {names} do not match the model parameters")
        return method, samples, basis, layout, meta

    def predict(self) -> Dict[str, Any]:
        with self._tracked("predict") as result:
            fit_dir = self.config.section("predict")["fit_dir"]
            if not fit_dir:
                raise ConfigError("missing config key: predict.fit_dir")
            fit_dir = Path(fit_dir)
            family = self.config.family()
            dataset = dataset_io.read_dataset_csv(self.config.data_path(), family,
                                                  bool(self.config.section("data")["intercept"]))
            method, samples, basis, layout, _ = self._load_fit(fit_dir, dataset)
            test_idx = dataset.test_idx
            if test_idx.size == 0:
                raise ConfigError("the dataset has no test rows to predict")

            prediction = predict(samples, dataset.X[test_idx], basis.rows(test_idx), family, layout=layout)
            metrics = score(family, dataset.Z[test_idx], prediction.point_pred)
            fit_diag_path = fit_dir / "diagnostics.json"
            walltime = dataset_io.read_json(fit_diag_path).get("walltime_s") if fit_diag_path.exists() else None
            metrics.update({"walltime_s": walltime, "method": method})

            dataset_io.write_predictions_csv(self.out_dir / "predictions.csv", test_idx,
                                             dataset.Z[test_idx], prediction.point_pred)
            dataset_io.write_json(self.out_dir / "metrics.json", metrics)
            self._write_metadata(self.out_dir, method, fit_dir=str(fit_dir))
            logger.info(f"[RUNNER] predict: {method} {metrics}")
            result.update({"success": True, "output_dir": str(self.out_dir), **metrics})
        return result

    # -- compare -------------------------------------------------------------

    def _fit_all(self, model: ModelSpec, seed_offset: int, parallel: bool) -> Dict[str, MethodRun]:
        if not parallel:
            return {m: run_method(model, m, self.config, seed_offset) for m in METHODS}
        with ProcessPoolExecutor(max_workers=len(METHODS)) as executor:
            futures = {m: executor.submit(_run_method_job, model, m, self.config, seed_offset) for m in METHODS}
            return {m: f.result() for m, f in futures.items()}

    def compare(self) -> Dict[str, Any]:
        with self._tracked("compare") as result:
            settings = self.config.section("compare")
            replicates = int(settings["replicates"])
            if replicates < 1:
                raise ConfigError(f"compare.replicates must be >= 1, got {replicates}")
            parallel = bool(settings["parallel"])
            prepared = prepare(self.config)

            metric_values: Dict[str, List[float]] = {m: [] for m in METHODS}
            walltimes: Dict[str, List[float]] = {m: [] for m in METHODS}
            metric_name = None
            for r in range(replicates):
                runs = self._fit_all(prepared.model, r, parallel)
                for method, run in runs.items():
                    _, metrics = evaluate_run(run.samples, prepared)
                    metric_name, value = next(iter(metrics.items()))
                    metric_values[method].append(value)
                    walltimes[method].append(run.walltime_s)
                    if r == 0:
                        dataset_io.write_json(self.out_dir / f"diagnostics_{method}.json", run.diagnostics)
                logger.info(f"[RUNNER] compare: replicate {r + 1}/{replicates} done")

            rows = []
            for method in METHODS:
                rows.append({"method": method, "metric": metric_name,
                             "value": float(np.mean(metric_values[method])),
                             "walltime_s": float(np.median(walltimes[method]))})
            sivi_time = float(np.median(walltimes["sivi"]))
            for method in ("mh", "hmc"):
                rows.append({"method": f"{method}/sivi", "metric": "speedup",
                             "value": speedup(float(np.median(walltimes[method])), sivi_time),
                             "walltime_s": np.nan})
            table = pd.DataFrame(rows, columns=["method", "metric", "value", "walltime_s"])
            self.out_dir.mkdir(parents=True, exist_ok=True)
            table.to_csv(self.out_dir / "compare.csv", index=False, float_format=dataset_io.FLOAT_FORMAT)
            if replicates > 1:
                quantiles = walltime_quantiles(walltimes)
                quantiles.to_csv(self.out_dir / "walltime_quantiles.csv", index=False,
                                 float_format=dataset_io.FLOAT_FORMAT)
            self._write_metadata(self.out_dir, walltime_contended=parallel, replicates=replicates)
            result.update({"success": True, "output_dir": str(self.out_dir),
                           "table": table.to_dict(orient="records")})
        return result

    # -- sensitivity ---------------------------------------------------------

    def sensitivity(self) -> Dict[str, Any]:
        with self._tracked("sensitivity", "sivi") as result:
            grid = [float(e) for e in self.config.section("sensitivity")["stop_eps_grid"]]
            if not grid:
                raise ConfigError("sensitivity.stop_eps_grid must not be empty")
            prepared = prepare(self.config)
            rows = []
            for eps in grid:
                run = run_method(prepared.model, "sivi", self.config, stop_eps=eps)
                _, metrics = evaluate_run(run.samples, prepared)
                metric_name, value = next(iter(metrics.items()))
                rows.append({
                    "stop_eps": eps,
                    "metric": metric_name,
                    "value": value,
                    "walltime_s": run.walltime_s,
                    "iters_run": run.fit.iters_run,
                    "stop_reason": run.fit.stop_reason.value,
                })
                logger.info(f"[RUNNER] sensitivity: stop_eps={eps:g} {metric_name}={value:.6g} "
                            f"walltime={run.walltime_s:.3f}s iters={run.fit.iters_run}")
            table = pd.DataFrame(rows)
            self.out_dir.mkdir(parents=True, exist_ok=True)
            table.to_csv(self.out_dir / "sensitivity.csv", index=False, float_format=dataset_io.FLOAT_FORMAT)
            self._write_metadata(self.out_dir, "sivi")
            result.update({"success": True, "output_dir": str(self.out_dir),
                           "table": table.to_dict(orient="records")})
        return result


def cmd_simulate(config: RunConfig, registry: Optional[RunRegistry] = None) -> Dict[str, Any]:
    return ExperimentRunner(config, registry).simulate()


def cmd_fit(config: RunConfig, method: str, registry: Optional[RunRegistry] = None) -> Dict[str, Any]:
    return ExperimentRunner(config, registry).fit(method)


def cmd_predict(config: RunConfig, registry: Optional[RunRegistry] = None) -> Dict[str, Any]:
    return ExperimentRunner(config, registry).predict()


def cmd_compare(config: RunConfig, registry: Optional[RunRegistry] = None) -> Dict[str, Any]:
    return ExperimentRunner(config, registry).compare()


def cmd_sensitivity(config: RunConfig, registry: Optional[RunRegistry] = None) -> Dict[str, Any]:
    return ExperimentRunner(config, registry).sensitivity()
