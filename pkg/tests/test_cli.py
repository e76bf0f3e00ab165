import csv
import json
import os

import numpy as np
import pytest

from lrvb import cli
from lrvb.models import save_microcredit_csv, simulate_microcredit
from lrvb.models.microcredit import MicrocreditParams


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    truth = MicrocreditParams(1.0, 0.5, np.array([[1.0, 0.21], [0.21, 0.49]]),
                              100.0 * (1.0 + 0.1 * np.arange(7)))
    data = simulate_microcredit(truth, 60, seed=7)
    path = tmp_path_factory.mktemp("data") / "synthetic.csv"
    save_microcredit_csv(data, path)
    return str(path)


def run(*argv):
    return cli.main(list(argv))


class TestFit:
    def test_microcredit_smoke(self, data_csv, tmp_path):
        out = str(tmp_path / "fit.json")
        code = run("fit", "--model", "microcredit", "--data", data_csv, "--out", out)
        assert code == 0
        payload = json.loads(open(out).read())
        assert payload["schema_version"] == 1
        assert payload["converged"] is True
        assert set(payload["means"]) == set(payload["posterior_sd"])
        assert np.isfinite(payload["elbo"])

    def test_byte_identical_reruns(self, tmp_path):
        a, b = str(tmp_path / "a.json"), str(tmp_path / "b.json")
        assert run("fit", "--model", "normal-normal", "--out", a) == 0
        assert run("fit", "--model", "normal-normal", "--out", b) == 0
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_csv_format(self, tmp_path):
        out = str(tmp_path / "fit.csv")
        assert run("fit", "--model", "gaussian3d", "--out", out,
                   "--format", "csv") == 0
        rows = list(csv.DictReader(open(out)))
        assert rows and set(rows[0]) == {"quantity", "mean", "posterior_sd"}

    def test_missing_data_is_usage_error(self, tmp_path):
        code = run("fit", "--model", "microcredit",
                   "--out", str(tmp_path / "x.json"))
        assert code == 2

    def test_unknown_override_names_valid_keys(self, data_csv, tmp_path, capsys):
        code = run("fit", "--model", "microcredit", "--data", data_csv,
                   "--out", str(tmp_path / "x.json"), "--set", "bogus=1")
        assert code == 2
        err = capsys.readouterr().err
        assert "bogus" in err and "lkj_shape" in err

    def test_numerical_failure_exit_code(self, tmp_path):
        # indefinite precision override -> domain failure -> exit 3
        code = run("fit", "--model", "gaussian3d",
                   "--out", str(tmp_path / "x.json"), "--set", "info_11=-1")
        assert code == 3


class TestSensitivity:
    def test_conjugate_passthrough(self, tmp_path):
        out = str(tmp_path / "sens.json")
        assert run("sensitivity", "--model", "normal-normal", "--out", out) == 0
        payload = json.loads(open(out).read())
        values = {(e["quantity"], e["hyperparameter"]): e for e in payload["entries"]}
        entry = values[("theta", "prior_nat_1")]
        assert abs(entry["derivative"] - 0.2) < 1e-7
        assert entry["error"] is None
        assert payload["model_hash"] and payload["solution_hash"]

    def test_unknown_quantity(self, tmp_path):
        code = run("sensitivity", "--model", "normal-normal",
                   "--out", str(tmp_path / "x.json"), "--quantities", "nope")
        assert code == 2


class TestInfluenceGrid:
    def test_default_grid_shape(self, tmp_path):
        out = str(tmp_path / "grid.json")
        assert run("influence-grid", "--model", "normal-normal", "--out", out,
                   "--grid-points", "21") == 0
        payload = json.loads(open(out).read())
        assert len(payload["influence"]) == 21
        assert payload["block"] == "theta"
        # influence vanishes at the fitted mean: the lattice is centered there
        mid = len(payload["influence"]) // 2
        assert abs(payload["influence"][mid]) < 1e-12

    def test_two_dim_block(self, data_csv, tmp_path):
        out = str(tmp_path / "grid.csv")
        assert run("influence-grid", "--model", "microcredit", "--data", data_csv,
                   "--out", out, "--format", "csv", "--grid-points", "5",
                   "--target", "tau") == 0
        rows = list(csv.reader(open(out)))
        assert rows[0] == ["mu", "tau", "dE[tau]/deps"]
        assert len(rows) == 1 + 25


class TestCompare:
    def test_quadrature_engine(self, tmp_path):
        out = str(tmp_path / "cmp.json")
        assert run("compare", "--model", "normal-normal", "--engine", "quadrature",
                   "--direction", "prior_nat_1=1", "--out", out) == 0
        payload = json.loads(open(out).read())
        assert abs(payload["slope"] - 1.0) < 1e-3
        assert payload["entries"][0]["quantity"] == "theta"

    def test_mcmc_engine(self, tmp_path):
        out = str(tmp_path / "cmp.json")
        assert run("compare", "--model", "normal-normal", "--engine", "mcmc",
                   "--direction", "prior_nat_1=1", "--step", "0.3",
                   "--chain-length", "8000", "--burn-in", "1000",
                   "--seed", "3", "--out", out) == 0
        payload = json.loads(open(out).read())
        assert payload["correlation"] > 0.9
        assert all(e["mc_standard_error"] > 0 for e in payload["entries"])

    def test_direction_validation(self, tmp_path):
        code = run("compare", "--model", "normal-normal", "--engine", "vb",
                   "--direction", "nope=1", "--out", str(tmp_path / "x.json"))
        assert code == 2


class TestSchema:
    def test_schema_file_parses_and_covers_subcommands(self):
        here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        schema = json.loads(open(os.path.join(here, "docs", "output_schema.json")).read())
        titles = {entry["title"] for entry in schema["oneOf"]}
        assert titles == {"fit", "sensitivity", "influence-grid", "compare"}
        assert "input_csv" in schema

    def test_fit_payload_matches_schema_fields(self, tmp_path):
        out = str(tmp_path / "fit.json")
        run("fit", "--model", "normal-normal", "--out", out)
        payload = json.loads(open(out).read())
        here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        schema = json.loads(open(os.path.join(here, "docs", "output_schema.json")).read())
        fit_schema = next(s for s in schema["oneOf"] if s["title"] == "fit")
        for field in fit_schema["required"]:
            assert field in payload
        for field in schema["$defs"]["header"]["required"]:
            assert field in payload
