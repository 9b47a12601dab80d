"""End-to-end runs of the sglmm command line on tiny problems."""
import json

import numpy as np
import pandas as pd
import pytest

from backend.app import main
from backend.database.db_handler import RunRegistry
from backend.services import dataset_io
from backend.services.experiment_runner import build_basis
from backend.services.run_config import RunConfig
from backend.sglmm_core.families import Family
from backend.sglmm_core.model import ParameterLayout
from backend.sglmm_core.spatial import SpatialDataset

TINY_SIVI = {"J": 4, "K": 8, "max_iters": 30, "noise_dim": 3, "hidden_dims": [5], "n_draws": 50, "log_every": 0}
TINY_MH = {"iters": 300, "burn_in": 100, "thin": 2, "log_every": 0}
TINY_HMC = {"iters": 60, "warmup": 20, "leapfrog_steps": 3, "log_every": 0}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    for name in ("SIVI_SEED", "SGLMM_REGISTRY", "SGLMM_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


def write_config(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def simulate(tmp_path, family="poisson", n_train=60, n_test=20, name="sim"):
    cfg = write_config(tmp_path / f"{name}.json", {
        "seed": 3,
        "scenario": {"family": family, "n_train": n_train, "n_test": n_test, "range": 0.2},
    })
    out = tmp_path / name
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    return out


def fit_payload(data_path, family="poisson", **sections):
    payload = {
        "seed": 3,
        "data": {"path": str(data_path), "family": family},
        "basis": {"m": 5, "range": 0.2},
        "sivi": TINY_SIVI,
        "mh": TINY_MH,
        "hmc": TINY_HMC,
    }
    payload.update(sections)
    return payload


def test_simulate_writes_dataset_truth_and_metadata(tmp_path):
    out = simulate(tmp_path)
    data = pd.read_csv(out / "data.csv")
    assert list(data.columns) == ["s1", "s2", "x1", "x2", "z", "split"]
    assert (data["split"] == "train").sum() == 60
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["command"] == "simulate"
    assert meta["config"]["scenario"]["n_train"] == 60
    assert meta["version"]


def test_simulate_reruns_are_byte_identical(tmp_path):
    first = simulate(tmp_path, name="a")
    second = simulate(tmp_path, name="b")
    for name in ("data.csv", "truth.csv", "scenario.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_simulate_grid_writes_one_directory_per_scenario(tmp_path):
    cfg = write_config(tmp_path / "grid.json", {
        "seed": 1,
        "scenario": {"family": "poisson", "n_train": 15, "n_test": 5},
        "grid": {"enabled": True},
    })
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "grid")]) == 0
    subdirs = sorted(p.name for p in (tmp_path / "grid").iterdir() if p.is_dir())
    assert len(subdirs) == 20
    assert "gamma_nu0.5_phi0.1" in subdirs
    assert (tmp_path / "grid" / "gaussian_nu1.5_phi0.3" / "data.csv").exists()


def test_sivi_fit_then_predict(tmp_path):
    data = simulate(tmp_path) / "data.csv"
    cfg = write_config(tmp_path / "fit.json", fit_payload(data))
    fit_dir = tmp_path / "fit"
    assert main(["fit", "--config", cfg, "--method", "sivi", "--out", str(fit_dir)]) == 0
    for name in ("mlp.bin", "trace.csv", "samples.csv", "summary.csv", "basis.npz", "diagnostics.json"):
        assert (fit_dir / name).exists(), name
    diagnostics = json.loads((fit_dir / "diagnostics.json").read_text())
    assert diagnostics["walltime_s"] > 0
    assert diagnostics["iters_run"] <= 30

    pred_cfg = write_config(tmp_path / "predict.json",
                            fit_payload(data, predict={"fit_dir": str(fit_dir), "draws": 100}))
    assert main(["predict", "--config", pred_cfg, "--out", str(tmp_path / "p1")]) == 0
    assert main(["predict", "--config", pred_cfg, "--out", str(tmp_path / "p2")]) == 0

    preds = pd.read_csv(tmp_path / "p1" / "predictions.csv")
    assert list(preds.columns) == ["loc_id", "z_true", "z_pred"]
    assert list(preds["loc_id"]) == list(range(60, 80))
    assert (preds["z_pred"] > 0).all()
    assert (tmp_path / "p1" / "predictions.csv").read_bytes() == (tmp_path / "p2" / "predictions.csv").read_bytes()
    metrics = json.loads((tmp_path / "p1" / "metrics.json").read_text())
    assert set(metrics) == {"rmspe", "walltime_s", "method"}
    assert metrics["method"] == "sivi"


def test_bernoulli_predict_reports_auc(tmp_path):
    data = simulate(tmp_path, family="bernoulli", n_test=40) / "data.csv"
    fit_dir = tmp_path / "fit"
    cfg = write_config(tmp_path / "fit.json", fit_payload(data, family="bernoulli"))
    assert main(["fit", "--config", cfg, "--method", "sivi", "--out", str(fit_dir)]) == 0
    pred_cfg = write_config(tmp_path / "predict.json",
                            fit_payload(data, family="bernoulli", predict={"fit_dir": str(fit_dir)}))
    assert main(["predict", "--config", pred_cfg, "--out", str(tmp_path / "pred")]) == 0
    metrics = json.loads((tmp_path / "pred" / "metrics.json").read_text())
    assert "auc" in metrics and "rmspe" not in metrics
    assert 0.0 <= metrics["auc"] <= 1.0


def test_mh_fit_keeps_every_iteration(tmp_path):
    data = simulate(tmp_path) / "data.csv"
    cfg = write_config(tmp_path / "fit.json",
                       fit_payload(data, mh={"iters": 1000, "burn_in": 0, "thin": 1, "log_every": 0}))
    assert main(["fit", "--config", cfg, "--method", "mh", "--out", str(tmp_path / "mh")]) == 0
    iters, samples, names = dataset_io.read_chain_csv(tmp_path / "mh" / "chain.csv")
    assert samples.shape == (1000, len(names))
    assert names[0] == "beta_1" and names[-1] == "log_sigma2"
    diagnostics = json.loads((tmp_path / "mh" / "diagnostics.json").read_text())
    assert 0.0 < diagnostics["accept_rate"] < 1.0
    assert set(diagnostics["ess"]) == set(names)


def test_compare_table_has_three_methods_and_two_speedups(tmp_path):
    data = simulate(tmp_path) / "data.csv"
    cfg = write_config(tmp_path / "compare.json", fit_payload(data))
    out = tmp_path / "compare"
    assert main(["compare", "--config", cfg, "--out", str(out)]) == 0
    table = pd.read_csv(out / "compare.csv")
    assert list(table.columns) == ["method", "metric", "value", "walltime_s"]
    assert list(table["method"]) == ["sivi", "mh", "hmc", "mh/sivi", "hmc/sivi"]
    assert list(table["metric"]) == ["rmspe"] * 3 + ["speedup"] * 2
    for method in ("sivi", "mh", "hmc"):
        assert (out / f"diagnostics_{method}.json").exists()
    assert json.loads((out / "metadata.json").read_text())["walltime_contended"] is False


def test_sensitivity_sweeps_stop_threshold(tmp_path):
    data = simulate(tmp_path) / "data.csv"
    cfg = write_config(tmp_path / "sens.json", fit_payload(data, sensitivity={"stop_eps_grid": [1e-1, 1e-3]}))
    assert main(["sensitivity", "--config", cfg, "--out", str(tmp_path / "sens")]) == 0
    table = pd.read_csv(tmp_path / "sens" / "sensitivity.csv")
    assert list(table["stop_eps"]) == [0.1, 0.001]
    assert set(table["stop_reason"]) <= {"converged", "max_iters", "non_finite"}


def test_truth_as_single_draw_predicts_exactly(tmp_path):
    """Zero-noise Gaussian data explained exactly by the basis gives rmspe 0."""
    rng = np.random.default_rng(5)
    n, m = 30, 4
    locations = rng.uniform(size=(n, 2))
    X = rng.uniform(-1, 1, size=(n, 2))
    placeholder = SpatialDataset(locations, X, np.zeros(n), np.arange(20), np.arange(20, n), Family.GAUSSIAN)
    config = RunConfig.from_dict({"data": {"path": "unused", "family": "gaussian"}, "basis": {"m": m}}, "fit", env={})
    basis = build_basis(placeholder, config)

    beta, delta = np.array([1.0, -0.5]), rng.normal(size=m)
    z = X @ beta + basis.phi_matrix @ delta
    dataset = SpatialDataset(locations, X, z, np.arange(20), np.arange(20, n), Family.GAUSSIAN)
    data_path = dataset_io.write_dataset_csv(dataset, tmp_path / "data.csv")

    fit_dir = tmp_path / "truth_fit"
    layout = ParameterLayout(2, m, Family.GAUSSIAN)
    dataset_io.save_basis(fit_dir / "basis.npz", basis)
    dataset_io.write_chain_csv(fit_dir / "chain.csv", [1], np.concatenate([beta, delta, [0.0, 0.0]])[None, :],
                               layout.names())
    dataset_io.write_json(fit_dir / "metadata.json", {
        "command": "fit", "method": "mh", "family": "gaussian", "p": 2, "m": m,
        "fixed": {"log_sigma2": None, "gamma": None},
    })

    cfg = write_config(tmp_path / "predict.json", {
        "data": {"path": str(data_path), "family": "gaussian"},
        "predict": {"fit_dir": str(fit_dir)},
    })
    assert main(["predict", "--config", cfg, "--out", str(tmp_path / "pred")]) == 0
    metrics = json.loads((tmp_path / "pred" / "metrics.json").read_text())
    assert metrics["rmspe"] == pytest.approx(0.0, abs=1e-12)
    assert metrics["walltime_s"] is None


def test_config_errors_exit_with_code_2(tmp_path):
    data = simulate(tmp_path) / "data.csv"
    cfg = write_config(tmp_path / "bad.json", fit_payload(data, sivi={"learning_rate": 1.0}))
    assert main(["fit", "--config", cfg, "--method", "sivi"]) == 2
    negbin = write_config(tmp_path / "nb.json", fit_payload(data, family="negbin"))
    assert main(["fit", "--config", negbin, "--method", "mh"]) == 2
    with pytest.raises(SystemExit) as info:
        main(["fit", "--config", cfg])
    assert info.value.code == 2


def test_data_errors_exit_with_code_3(tmp_path):
    cfg = write_config(tmp_path / "missing.json", fit_payload(tmp_path / "nowhere.csv"))
    assert main(["fit", "--config", cfg, "--method", "sivi"]) == 3

    poisson_data = simulate(tmp_path) / "data.csv"
    fit_dir = tmp_path / "fit"
    fit_cfg = write_config(tmp_path / "fit.json", fit_payload(poisson_data))
    assert main(["fit", "--config", fit_cfg, "--method", "sivi", "--out", str(fit_dir)]) == 0
    bernoulli_data = simulate(tmp_path, family="bernoulli", name="bern") / "data.csv"
    mismatch = write_config(tmp_path / "mismatch.json",
                            fit_payload(bernoulli_data, family="bernoulli", predict={"fit_dir": str(fit_dir)}))
    assert main(["predict", "--config", mismatch, "--out", str(tmp_path / "pred")]) == 3


def test_runs_are_recorded_in_registry(tmp_path, monkeypatch):
    db = tmp_path / "registry.db"
    monkeypatch.setenv("SGLMM_REGISTRY", str(db))
    simulate(tmp_path)
    bad = write_config(tmp_path / "bad.json", {"scenario": {"n_train": 10}})
    assert main(["simulate", "--config", bad]) == 2

    runs = RunRegistry(str(db)).list_runs()
    assert [r["status"] for r in runs] == ["failed", "completed"]
    assert all(r["command"] == "simulate" for r in runs)


def rerun_from_metadata(tmp_path, out, command, method=None):
    meta = json.loads((out / "metadata.json").read_text())
    cfg = write_config(tmp_path / f"{out.name}_echo.json", meta["config"])
    argv = [command, "--config", cfg, "--out", str(tmp_path / f"{out.name}_rerun")]
    if method:
        argv += ["--method", method]
    assert main(argv) == 0
    return tmp_path / f"{out.name}_rerun"


@pytest.mark.parametrize("method, files", [
    ("sivi", ("mlp.bin", "samples.csv", "summary.csv", "basis.npz")),
    ("mh", ("chain.csv", "summary.csv", "basis.npz")),
])
def test_fit_rerun_from_metadata_is_byte_identical(tmp_path, method, files):
    data = simulate(tmp_path) / "data.csv"
    out = tmp_path / f"fit_{method}"
    cfg = write_config(tmp_path / "fit.json", fit_payload(data))
    assert main(["fit", "--config", cfg, "--method", method, "--out", str(out)]) == 0
    rerun = rerun_from_metadata(tmp_path, out, "fit", method)

    for name in files:
        assert (out / name).read_bytes() == (rerun / name).read_bytes(), name
    if method == "sivi":
        first, second = pd.read_csv(out / "trace.csv"), pd.read_csv(rerun / "trace.csv")
        pd.testing.assert_frame_equal(first[["iteration", "elbo"]], second[["iteration", "elbo"]], check_exact=True)
    first_meta = json.loads((out / "metadata.json").read_text())
    second_meta = json.loads((rerun / "metadata.json").read_text())
    assert {k: v for k, v in first_meta["config"].items() if k != "output_dir"} == \
        {k: v for k, v in second_meta["config"].items() if k != "output_dir"}


def test_compare_rerun_from_metadata_reproduces_metrics(tmp_path):
    data = simulate(tmp_path) / "data.csv"
    out = tmp_path / "compare"
    cfg = write_config(tmp_path / "compare.json", fit_payload(data))
    assert main(["compare", "--config", cfg, "--out", str(out)]) == 0
    rerun = rerun_from_metadata(tmp_path, out, "compare")

    first, second = pd.read_csv(out / "compare.csv"), pd.read_csv(rerun / "compare.csv")
    metric_rows = first["metric"] != "speedup"
    pd.testing.assert_frame_equal(first.loc[metric_rows, ["method", "metric", "value"]],
                                  second.loc[metric_rows, ["method", "metric", "value"]], check_exact=True)
    for method in ("mh", "hmc"):
        a = json.loads((out / f"diagnostics_{method}.json").read_text())
        b = json.loads((rerun / f"diagnostics_{method}.json").read_text())
        assert a["ess"] == b["ess"] and a["accept_rate"] == b["accept_rate"]


@pytest.mark.parametrize("method, section", [
    ("sivi", {"sivi": {**TINY_SIVI, "max_iters": 1, "n_draws": 10}}),
    ("mh", {"mh": {"iters": 2, "burn_in": 0, "thin": 1, "log_every": 0}}),
])
def test_noop_fit_walltime_excludes_file_io(tmp_path, method, section):
    data = simulate(tmp_path, n_train=15, n_test=5) / "data.csv"
    cfg = write_config(tmp_path / "fit.json", fit_payload(data, basis={"m": 2, "range": 0.2}, **section))
    out = tmp_path / "noop"
    assert main(["fit", "--config", cfg, "--method", method, "--out", str(out)]) == 0
    assert json.loads((out / "diagnostics.json").read_text())["walltime_s"] < 0.05
