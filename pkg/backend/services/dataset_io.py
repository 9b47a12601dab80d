"""
File formats: data/truth CSVs, chains, traces, predictions, summaries,
JSON documents and the stored basis.

Floats are written with 17 significant digits so every CSV parses back to
the identical binary values.
"""
import json
import logging
import math
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..sglmm_core.evaluation import PosteriorSummary
from ..sglmm_core.exceptions import DataError
from ..sglmm_core.families import Family
from ..sglmm_core.spatial import BasisSystem, PriorCovMode, SpatialDataset, TruthRecord

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
PathLike = Union[str, Path]


def _ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def _to_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    _ensure_parent(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    _ensure_parent(path)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}") from None


def dataset_frame(dataset: SpatialDataset) -> pd.DataFrame:
    split = np.empty(dataset.n, dtype=object)
    split[dataset.train_idx] = "train"
    split[dataset.test_idx] = "test"
    columns = {"s1": dataset.locations[:, 0], "s2": dataset.locations[:, 1]}
    for j in range(dataset.p):
        columns[f"x{j + 1}"] = dataset.X[:, j]
    columns["z"] = dataset.Z
    columns["split"] = split
    return pd.DataFrame(columns)


def write_dataset_csv(dataset: SpatialDataset, path: PathLike) -> Path:
    """Write `s1,s2,x1..xp,z,split`."""
    path = _to_csv(dataset_frame(dataset), path)
    logger.info(f"[DATASET_IO] write_dataset_csv: wrote {dataset.n} rows to {path}")
    return path


def _check_numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"column '{column}' has a missing or non-numeric value {frame[column].iloc[row]!r}",
                        row=row + 1)
    return values.to_numpy(dtype=float)


def read_dataset_csv(path: PathLike, family: Union[str, Family], intercept: bool = False) -> SpatialDataset:
    """Parse a data CSV and validate it against the family support.

    Args:
        path: CSV with header `s1,s2,x1,...,xp,z,split`
        family: Response family of the z column
        intercept: Prepend a column of ones to the covariates

    Returns:
        SpatialDataset (rows keep file order; row numbers in errors are 1-based data rows)
    """
    path = Path(path)
    family = Family.parse(family)
    try:
        frame = pd.read_csv(path, float_precision="round_trip", dtype={"split": str}, keep_default_na=False,
                            na_values=[""])
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    except pd.errors.ParserError as e:
        raise DataError(f"cannot parse {path}: {e}") from None

    header = list(frame.columns)
    n_cov = len(header) - 4
    expected = ["s1", "s2"] + [f"x{j + 1}" for j in range(max(n_cov, 0))] + ["z", "split"]
    if header != expected:
        raise DataError(f"{path}: header must be {','.join(expected)}, got {','.join(map(str, header))}")

    coords = np.column_stack([_check_numeric(frame, "s1"), _check_numeric(frame, "s2")])
    X = np.column_stack([_check_numeric(frame, f"x{j + 1}") for j in range(n_cov)]) if n_cov else np.zeros((len(frame), 0))
    Z = _check_numeric(frame, "z")
    split = frame["split"].to_numpy()
    invalid = ~np.isin(split, ["train", "test"])
    if invalid.any():
        row = int(np.flatnonzero(invalid)[0])
        raise DataError(f"split must be 'train' or 'test', got {split[row]!r}", row=row + 1)
    if intercept:
        X = np.column_stack([np.ones(len(frame)), X])

    dataset = SpatialDataset(
        locations=coords,
        X=X,
        Z=Z,
        train_idx=np.flatnonzero(split == "train"),
        test_idx=np.flatnonzero(split == "test"),
        family=family,
    )
    logger.info(f"[DATASET_IO] read_dataset_csv: {path} N={dataset.n} p={dataset.p} "
                f"train={dataset.train_idx.size} test={dataset.test_idx.size}")
    return dataset


def write_truth_csv(truth: TruthRecord, family: Family, path: PathLike) -> Path:
    """`name,value` rows: beta_i, the extra parameter (natural scale) and omega_i per location."""
    names = [f"beta_{i + 1}" for i in range(truth.beta.size)]
    values = list(truth.beta)
    if truth.extra_param is not None:
        names.append(family.extra_param_name)
        values.append(truth.extra_param)
    names += [f"omega_{i + 1}" for i in range(truth.omega.size)]
    values += list(truth.omega)
    return _to_csv(pd.DataFrame({"name": names, "value": values}), path)


def write_chain_csv(path: PathLike, iterations: Sequence[int], samples: np.ndarray, names: List[str]) -> Path:
    frame = pd.DataFrame(np.asarray(samples, dtype=float), columns=names)
    frame.insert(0, "iter", np.asarray(iterations, dtype=np.int64))
    return _to_csv(frame, path)


def read_chain_csv(path: PathLike) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    frame = pd.read_csv(path, float_precision="round_trip")
    if not len(frame.columns) or frame.columns[0] != "iter":
        raise DataError(f"{path}: first column must be 'iter'")
    names = list(frame.columns[1:])
    return frame["iter"].to_numpy(), frame[names].to_numpy(dtype=float), names


def write_trace_csv(path: PathLike, elbo: np.ndarray, walltime: np.ndarray) -> Path:
    frame = pd.DataFrame({
        "iteration": np.arange(1, len(elbo) + 1),
        "elbo": elbo,
        "walltime_cumulative_s": walltime,
    })
    return _to_csv(frame, path)


def write_predictions_csv(path: PathLike, loc_ids: np.ndarray, z_true: np.ndarray, z_pred: np.ndarray) -> Path:
    return _to_csv(pd.DataFrame({"loc_id": loc_ids, "z_true": z_true, "z_pred": z_pred}), path)


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def write_summary(out_dir: PathLike, summary: PosteriorSummary) -> List[Path]:
    """summary.csv plus one hist_<param>.csv per histogrammed parameter."""
    out_dir = Path(out_dir)
    written = [_to_csv(summary.table, out_dir / "summary.csv")]
    for name, frame in summary.histograms.items():
        written.append(_to_csv(frame, out_dir / f"hist_{_safe_name(name)}.csv"))
    return written


def save_basis(path: PathLike, basis: BasisSystem) -> Path:
    path = Path(path)
    _ensure_parent(path)
    with open(path, "wb") as f:
        np.savez(f, phi_matrix=basis.phi_matrix, eigenvalues=basis.eigenvalues,
                 prior_cov_mode=np.array(basis.prior_cov_mode.value))
    return path


def load_basis(path: PathLike) -> BasisSystem:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with np.load(path, allow_pickle=False) as archive:
        return BasisSystem(
            phi_matrix=archive["phi_matrix"],
            eigenvalues=archive["eigenvalues"],
            prior_cov_mode=PriorCovMode(str(archive["prior_cov_mode"])),
        )
