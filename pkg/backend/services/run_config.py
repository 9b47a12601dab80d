"""
Run configuration.

One JSON object per run, split into sections. Every key is checked against
the known schema, defaults are filled in, and the resolved result is what
gets echoed into each run's metadata.json.
"""
import copy
import json
import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from ..sglmm_core.exceptions import ConfigError
from ..sglmm_core.families import Family
from ..sglmm_core.mcmc import HmcConfig, MhConfig
from ..sglmm_core.model import PriorSpec
from ..sglmm_core.sivi import SiviConfig
from ..sglmm_core.spatial import MaternParams, PriorCovMode, SyntheticScenario

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "fit", "predict", "compare", "sensitivity")
METHODS = ("sivi", "mh", "hmc")


def _dataclass_defaults(cls, exclude: Iterable[str] = ("seed",)) -> Dict[str, Any]:
    defaults = {}
    for f in fields(cls):
        if f.name in exclude or not f.init:
            continue
        value = f.default
        defaults[f.name] = list(value) if isinstance(value, tuple) else value
    return defaults


SECTION_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "scenario": {
        "family": None,
        "nu": 0.5,
        "range": 0.1,
        "marg_var": 1.0,
        "beta": [1.0, 1.0],
        "n_train": 1600,
        "n_test": 400,
        "extra_param": None,
        "jitter": None,
    },
    "grid": {
        "enabled": False,
        "nus": [0.5, 1.5],
        "ranges": [0.1, 0.3],
    },
    "data": {
        "path": None,
        "family": None,
        "intercept": False,
    },
    "basis": {
        "m": 50,
        "nu": 0.5,
        "range": 0.1,
        "marg_var": 1.0,
        "prior_cov_mode": PriorCovMode.IDENTITY.value,
        "jitter": None,
    },
    # extra-parameter priors have no defaults: they must be stated for the family in use
    "priors": {
        "beta_mean": 0.0,
        "beta_var": 100.0,
        "sigma_mean": 1.0,
        "sigma_var": 1.0,
        "tau_mean": None,
        "tau_var": None,
        "kappa_shape": None,
        "kappa_rate": None,
        "alpha_mean": None,
        "alpha_var": None,
    },
    "fixed": {
        "log_sigma2": None,
        "gamma": None,
    },
    "sivi": _dataclass_defaults(SiviConfig),
    "mh": _dataclass_defaults(MhConfig),
    "hmc": _dataclass_defaults(HmcConfig),
    "predict": {
        "fit_dir": None,
        "draws": 1000,
    },
    "compare": {
        "parallel": False,
        "replicates": 1,
    },
    "sensitivity": {
        "stop_eps_grid": [1e-1, 1e-2, 1e-3, 1e-4],
    },
}

TOP_LEVEL_KEYS = {"seed", "output_dir"}

GAMMA_PRIOR_KEYS = {
    Family.GAUSSIAN: ("tau_mean", "tau_var"),
    Family.NEGBIN: ("kappa_shape", "kappa_rate"),
    Family.GAMMA: ("alpha_mean", "alpha_var"),
}

REQUIRED_SECTIONS = {
    "simulate": ("scenario",),
    "fit": ("data",),
    "predict": ("data", "predict"),
    "compare": ("data", "sivi", "mh", "hmc"),
    "sensitivity": ("data",),
}


def _parse_seed(value: Any, source: str) -> int:
    try:
        seed = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{source} must be an integer, got {value!r}") from None
    if seed < 0:
        raise ConfigError(f"{source} must be nonnegative, got {seed}")
    return seed


@dataclass
class RunConfig:
    command: str
    seed: int
    sections: Dict[str, Dict[str, Any]]
    output_dir: Path
    source_path: Optional[Path] = None

    @classmethod
    def load(cls, path: str, command: str, out_dir: Optional[str] = None,
             env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        config = cls.from_dict(raw, command, out_dir=out_dir, env=env)
        config.source_path = path
        return config

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], command: str, out_dir: Optional[str] = None,
                  env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        if not isinstance(raw, Mapping):
            raise ConfigError("config must be a JSON object")
        env = os.environ if env is None else env

        unknown = set(raw) - TOP_LEVEL_KEYS - set(SECTION_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
        for section in REQUIRED_SECTIONS[command]:
            if section not in raw:
                raise ConfigError(f"missing config section: {section} (required by '{command}')")

        sections = {}
        for name, defaults in SECTION_DEFAULTS.items():
            given = raw.get(name, {})
            if not isinstance(given, Mapping):
                raise ConfigError(f"config section {name} must be an object")
            extra = set(given) - set(defaults)
            if extra:
                raise ConfigError(f"unknown config key: {name}.{sorted(extra)[0]}")
            merged = copy.deepcopy(defaults)
            merged.update(copy.deepcopy(dict(given)))
            sections[name] = merged

        seed = _parse_seed(raw.get("seed", 1), "seed")
        if env.get("SIVI_SEED"):
            seed = _parse_seed(env["SIVI_SEED"], "SIVI_SEED")
            logger.info(f"[CONFIG] from_dict: seed overridden by SIVI_SEED={seed}")
        output_dir = Path(out_dir or raw.get("output_dir") or os.path.join("runs", command))
        return cls(command=command, seed=seed, sections=sections, output_dir=output_dir)

    def section(self, name: str) -> Dict[str, Any]:
        return self.sections[name]

    def to_metadata(self) -> Dict[str, Any]:
        """The full effective configuration, defaults resolved."""
        return {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            **copy.deepcopy(self.sections),
        }

    # -- typed views -------------------------------------------------------

    def _require(self, section: str, key: str) -> Any:
        value = self.sections[section][key]
        if value is None:
            raise ConfigError(f"missing config key: {section}.{key}")
        return value

    def scenario(self) -> SyntheticScenario:
        sc = self.sections["scenario"]
        try:
            return SyntheticScenario(
                family=Family.parse(self._require("scenario", "family")),
                matern=MaternParams(nu=float(sc["nu"]), range=float(sc["range"]), marg_var=float(sc["marg_var"])),
                beta_true=tuple(sc["beta"]),
                n_train=int(sc["n_train"]),
                n_test=int(sc["n_test"]),
                extra_param_true=sc["extra_param"],
                seed=self.seed,
                jitter=sc["jitter"],
            )
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid scenario: {e}") from None

    def family(self) -> Family:
        return Family.parse(self._require("data", "family"))

    def data_path(self) -> Path:
        return Path(self._require("data", "path"))

    def basis_settings(self) -> Tuple[MaternParams, int, PriorCovMode, Optional[float]]:
        b = self.sections["basis"]
        try:
            params = MaternParams(nu=float(b["nu"]), range=float(b["range"]), marg_var=float(b["marg_var"]))
            mode = PriorCovMode(b["prior_cov_mode"])
        except ValueError as e:
            raise ConfigError(f"invalid basis settings: {e}") from None
        m = int(b["m"])
        if m < 1:
            raise ConfigError(f"basis.m must be >= 1, got {m}")
        return params, m, mode, b["jitter"]

    def fixed_values(self, family: Family) -> Tuple[Optional[float], Optional[float]]:
        fx = self.sections["fixed"]
        if fx["gamma"] is not None and not family.has_extra_param:
            raise ConfigError(f"fixed.gamma given but the {family.value} family has no extra parameter")
        log_sigma2 = None if fx["log_sigma2"] is None else float(fx["log_sigma2"])
        gamma = None if fx["gamma"] is None else float(fx["gamma"])
        return log_sigma2, gamma

    def priors(self, family: Family) -> PriorSpec:
        pr = self.sections["priors"]
        _, fixed_gamma = self.fixed_values(family)
        kwargs = {k: pr[k] for k in ("beta_mean", "beta_var", "sigma_mean", "sigma_var")}
        if family.has_extra_param and fixed_gamma is None:
            for key in GAMMA_PRIOR_KEYS[family]:
                kwargs[key] = self._require("priors", key)
        for key, value in pr.items():
            if key not in kwargs and value is not None:
                kwargs[key] = value
        kwargs = {k: np.asarray(v, dtype=float) if isinstance(v, list) else v for k, v in kwargs.items()}
        return PriorSpec(**kwargs)

    def sivi_config(self, seed_offset: int = 0, **overrides) -> SiviConfig:
        return self._method_config(SiviConfig, "sivi", seed_offset, overrides)

    def mh_config(self, seed_offset: int = 0, **overrides) -> MhConfig:
        return self._method_config(MhConfig, "mh", seed_offset, overrides)

    def hmc_config(self, seed_offset: int = 0, **overrides) -> HmcConfig:
        return self._method_config(HmcConfig, "hmc", seed_offset, overrides)

    def _method_config(self, cls, section: str, seed_offset: int, overrides: Dict[str, Any]):
        values = {**self.sections[section], **overrides}
        try:
            return cls(seed=self.seed + seed_offset, **values)
        except TypeError as e:
            raise ConfigError(f"invalid {section} settings: {e}") from None
