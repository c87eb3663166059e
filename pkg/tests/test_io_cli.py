import csv
import json
import math
import shutil
import subprocess

import numpy as np
import pytest

from apgw import io as aio
from apgw.cli import main
from apgw.errors import ConfigError, DataValidationError
from apgw.model import SurvivalDataset


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------- datasets


def test_load_small_file(tmp_path):
    p = write(tmp_path / "d.csv", "id,time,status,age,arm\n1,1.5,1,60,0\n2,2.0,0,55.5,1\n3,0.25,1,70,1\n")
    d = aio.load_dataset(p, "time", "status", ["age", "arm"])
    np.testing.assert_array_equal(d.times, [1.5, 2.0, 0.25])
    np.testing.assert_array_equal(d.status, [1, 0, 1])
    np.testing.assert_array_equal(d.covariates, [[60, 0], [55.5, 1], [70, 1]])
    assert d.names == ("age", "arm")


@pytest.mark.parametrize("row, needle", [
    ("2,0,1,0", "d.csv:3"),
    ("2,-1,1,0", "d.csv:3"),
    ("2,1.0,2,0", "d.csv:3"),
    ("2,1.0,1,NA", "d.csv:3"),
    ("2,,1,0", "d.csv:3"),
    ("2,abc,1,0", "d.csv:3"),
    ("2,1.0,1", "d.csv:3"),
])
def test_bad_rows_name_the_line(tmp_path, row, needle):
    p = write(tmp_path / "d.csv", f"id,time,status,x\n1,1.0,1,0\n{row}\n3,2.0,0,1\n")
    with pytest.raises(DataValidationError, match=needle):
        aio.load_dataset(p, "time", "status", ["x"])


def test_missing_column_and_file(tmp_path):
    p = write(tmp_path / "d.csv", "time,status\n1,1\n")
    with pytest.raises(DataValidationError, match="'x'"):
        aio.load_dataset(p, "time", "status", ["x"])
    with pytest.raises(DataValidationError):
        aio.load_dataset(tmp_path / "absent.csv", "time", "status")


def test_factor_expansion(tmp_path):
    levels = ["palliative", "surgery", "chemo", "radio", "combined"]
    lines = ["time,status,treat"] + [f"{1 + k},{k % 2},{levels[k % 5]}" for k in range(15)]
    p = write(tmp_path / "f.csv", "\n".join(lines) + "\n")
    d = aio.load_dataset(p, "time", "status", ["treat"])
    assert d.p == 4
    assert d.names == tuple(f"treat[{lv}]" for lv in levels[1:])
    assert d.reference_levels == {"treat": "palliative"}
    np.testing.assert_array_equal(d.covariates[0], 0)
    np.testing.assert_array_equal(d.covariates[1], [1, 0, 0, 0])
    np.testing.assert_array_equal(d.covariates.sum(axis=1), [0, 1, 1, 1, 1] * 3)


def test_dataset_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    d = SurvivalDataset(rng.exponential(1.0, 30) + 1e-9, rng.integers(0, 2, 30), rng.normal(size=(30, 2)), ("a", "b"))
    aio.write_dataset(d, tmp_path / "rt.csv")
    back = aio.load_dataset(tmp_path / "rt.csv", "time", "status", ["a", "b"])
    assert back == d
    assert back.digest() == d.digest()


def test_atomic_write_and_json(tmp_path):
    p = aio.atomic_write(tmp_path / "x.json", aio.to_json({"a": math.inf, "b": np.float64(2.5), "c": np.arange(2)}))
    assert json.loads(p.read_text()) == {"a": None, "b": 2.5, "c": [0, 1]}
    assert [f.name for f in tmp_path.iterdir()] == ["x.json"]


def test_default_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(aio.OUT_DIR_ENV, str(tmp_path / "env"))
    assert aio.default_out_dir() == tmp_path / "env"
    assert aio.default_out_dir(str(tmp_path / "flag")) == tmp_path / "flag"


# ---------------------------------------------------------------- configuration


def test_config_parsing(tmp_path):
    p = write(tmp_path / "c.ini", "[model]\nmodel = M(beta,alpha)\nallow_two_scales = yes\n[optimizer]\nn_starts = 2\n")
    cfg = aio.load_config(p)
    assert cfg == {"model": {"model": "M(beta,alpha)", "allow_two_scales": True}, "optimizer": {"n_starts": 2}}


@pytest.mark.parametrize("text, needle", [
    ("[model]\nmodl = M(beta)\n", "model.modl"),
    ("[modle]\nmodel = M(beta)\n", r"\[modle\]"),
    ("[optimizer]\nn_starts = two\n", "optimizer.n_starts"),
])
def test_config_errors_name_the_key(tmp_path, text, needle):
    with pytest.raises(ConfigError, match=needle):
        aio.load_config(write(tmp_path / "c.ini", text))


def test_assignment_grid_profile_parsers():
    assert aio.parse_assignments("nu0=0.6931, beta0=0.5") == {"nu0": 0.6931, "beta0": 0.5}
    with pytest.raises(ConfigError):
        aio.parse_assignments("nu0")
    np.testing.assert_allclose(aio.parse_grid("1:3:3"), [1, 2, 3])
    np.testing.assert_allclose(aio.parse_grid("0.5, 2"), [0.5, 2])
    with pytest.raises(ConfigError):
        aio.parse_grid("a:b")
    assert aio.parse_profile("1,0") == (1.0, 0.0)


# ---------------------------------------------------------------- command line


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    rc = main(["simulate", "--n", "400", "--covariate-law", "bernoulli:0.5", "--censoring", "0.3", "--seed", "3",
               "--coefs", "tau0=0.8,tau1=0.6,alpha0=0.2,alpha1=-0.5", "--out-dir", str(out)])
    assert rc == 0
    return out / "data.csv"


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_cli_simulate_outputs(sim_csv):
    out = sim_csv.parent
    truth = json.loads((out / "truth.json").read_text())
    assert truth["n"] == 400
    d = aio.load_dataset(sim_csv, "time", "status", ["x1"])
    assert d.n == 400 and 0.25 < 1 - d.status.mean() < 0.35
    m = manifest(out)
    assert m["command"] == "simulate" and m["seed"] == 3 and str(sim_csv) in m["outputs"]


def test_cli_fit(sim_csv, tmp_path, capsys):
    rc = main(["fit", "--data", str(sim_csv), "--covariates", "x1", "--model", "M(beta,alpha)", "--out-dir",
               str(tmp_path)])
    assert rc == 0
    report = (tmp_path / "fit_report.txt").read_text()
    assert "beta1" in report and "alpha1" in report and "se" in report.lower()
    with open(tmp_path / "coefficients.csv") as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    est = {r["key"]: r for r in rows}
    assert float(est["beta1"]["se"]) > 0
    m = manifest(tmp_path)
    assert m["command"] == "fit" and m["input_digests"][str(sim_csv)] == aio.file_digest(sim_csv)


def test_cli_compare(sim_csv, tmp_path):
    rc = main(["compare", "--data", str(sim_csv), "--covariates", "x1", "--out-dir", str(tmp_path)])
    assert rc == 0
    with open(tmp_path / "comparison.csv") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    assert [r["model"] for r in rows] == ["M(beta)", "M(tau)", "M(beta,alpha)", "M(tau,alpha)", "M(beta,nu)",
                                          "M(tau,nu)"]
    assert {"delta_aic", "delta_bic", "loglik"} <= set(rows[0])
    assert min(float(r["delta_aic"]) for r in rows) == 0.0
    assert (tmp_path / "comparison.txt").exists() and (tmp_path / "manifest.json").exists()


def test_cli_curves_from_fit(sim_csv, tmp_path):
    assert main(["fit", "--data", str(sim_csv), "--covariates", "x1", "--model", "M(tau,alpha)", "--out-dir",
                 str(tmp_path)]) == 0
    rc = main(["curves", "--fit", str(tmp_path / "fit.json"), "--kind", "hazard-ratio", "--profile", "1",
               "--comparison", "0", "--grid", "0.5:3:6", "--out-dir", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "curve_hazard-ratio.csv").read_text().splitlines()
    header = [ln for ln in lines if ln.startswith("#")]
    assert any("profile=1" in ln for ln in header) and any("comparison=0" in ln for ln in header)
    body = list(csv.DictReader(ln for ln in lines if not ln.startswith("#")))
    assert len(body) == 6 and all(float(r["value"]) > 0 for r in body)


def test_cli_flags_override_config(sim_csv, tmp_path):
    cfg = write(tmp_path / "c.ini", f"[data]\npath = {sim_csv}\ncovariates = x1\n[model]\nmodel = M(beta)\n"
                                   f"[output]\nout_dir = {tmp_path / 'from_config'}\n")
    assert main(["fit", "--config", str(cfg), "--model", "M(tau)", "--out-dir", str(tmp_path / "flag")]) == 0
    res = json.loads((tmp_path / "flag" / "fit.json").read_text())
    assert res["spec"]["model"] == "M(tau)"
    assert not (tmp_path / "from_config").exists()
    assert main(["fit", "--config", str(cfg)]) == 0
    assert json.loads((tmp_path / "from_config" / "fit.json").read_text())["spec"]["model"] == "M(beta)"


def test_cli_validation_errors(sim_csv, tmp_path, capsys):
    rc = main(["fit", "--data", str(sim_csv), "--covariates", "x1", "--model", "M(tau,beta)", "--out-dir",
               str(tmp_path)])
    assert rc == 2 and "--allow-two-scales" in capsys.readouterr().err
    rc = main(["fit", "--data", str(tmp_path / "nope.csv"), "--model", "M(beta)", "--out-dir", str(tmp_path)])
    assert rc == 2 and "nope.csv" in capsys.readouterr().err
    bad = write(tmp_path / "bad.ini", "[model]\nmodle = M(beta)\n")
    rc = main(["fit", "--config", str(bad), "--out-dir", str(tmp_path)])
    assert rc == 2 and "model.modle" in capsys.readouterr().err


def test_cli_no_finite_start_exit_code(tmp_path, capsys):
    p = write(tmp_path / "d.csv", "time,status,x\n1.0,1,0\n2.0,1,800\n")
    rc = main(["fit", "--data", str(p), "--covariates", "x", "--model", "M(beta)", "--fix", "tau1=1",
               "--out-dir", str(tmp_path)])
    assert rc == 3


def test_cli_replicate_small(tmp_path, capsys):
    rc = main(["replicate-paper", "--table", "4", "--replicates", "3", "--n", "200", "--nu", "0", "--out-dir",
               str(tmp_path)])
    assert rc == 0
    text = (tmp_path / "table4_summary.csv").read_text()
    assert "M(tau,alpha)" in text
    with open(tmp_path / "table4_censoring.csv") as fh:
        (row,) = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    assert 0.2 < float(row["realized"]) < 0.4
    assert len(manifest(tmp_path)["outputs"]) == 3


@pytest.mark.skipif(shutil.which("apgw") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["apgw", "simulate", "--n", "20", "--out-dir", str(tmp_path)], capture_output=True,
                          text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "manifest.json").exists()
