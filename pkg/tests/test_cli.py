"""CLI commands, exit codes, artifacts, and manifest determinism."""

import json

import numpy as np
import pytest

from ctmflow.cli import main
from ctmflow.network import Scenario, save_scenario
from ctmflow.scenarios import table_scenario

from conftest import random_scenario


@pytest.fixture()
def zero_inflow_file(tmp_path):
    sc = table_scenario()
    lam = np.zeros((sc.horizon, sc.network.n))
    quiet = Scenario(network=sc.network, horizon=sc.horizon, tau=sc.tau,
                     initial_volumes=sc.initial_volumes, inflow=lam,
                     routing=sc.routing)
    path = tmp_path / "quiet.json"
    save_scenario(quiet, path)
    return path


class TestExitCodes:
    def test_simulate_zero_inflow_ok(self, tmp_path, zero_inflow_file, capsys):
        rc = main(["simulate", "--scenario", str(zero_inflow_file),
                   "--out", str(tmp_path / "out")])
        assert rc == 0
        rows = (tmp_path / "out" / "trajectory.csv").read_text().splitlines()[1:]
        assert all(row.split(",")[2] == "0" for row in rows)

    def test_missing_scenario_config_error(self, tmp_path):
        rc = main(["simulate", "--scenario", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "out")])
        assert rc == 2

    def test_fnc_without_routing_config_error(self, tmp_path):
        rng = np.random.default_rng(71)
        sc = random_scenario(rng, horizon=4)
        stripped = Scenario(network=sc.network, horizon=sc.horizon, tau=sc.tau,
                            initial_volumes=sc.initial_volumes, inflow=sc.inflow,
                            routing=None)
        path = tmp_path / "noroute.json"
        save_scenario(stripped, path)
        rc = main(["solve", "--scenario", str(path), "--kind", "fnc",
                   "--out", str(tmp_path / "out")])
        assert rc == 2

    def test_bad_epsilon_config_error(self, tmp_path):
        rc = main(["solve", "--scenario", "bundled:table", "--epsilon", "1.5",
                   "--out", str(tmp_path / "out")])
        assert rc == 2

    def test_bad_sweep_grid_config_error(self, tmp_path, zero_inflow_file):
        rc = main(["robustness-sweep", "--scenario", str(zero_inflow_file),
                   "--sweep", "junk", "--out", str(tmp_path / "out")])
        assert rc == 2


class TestArtifacts:
    def test_solve_writes_lp_and_manifest(self, tmp_path):
        out = tmp_path / "out"
        rc = main(["solve", "--scenario", "bundled:table", "--kind", "dta",
                   "--cost", "ttt", "--out", str(out)])
        assert rc == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert any(name.endswith(".lp") for name in manifest)
        assert all(len(digest) == 64 for digest in manifest.values())
        summary = json.loads((out / "summary.json").read_text())
        assert summary["status"] == "optimal"

    def test_synthesize_round_trip(self, tmp_path):
        out = tmp_path / "out"
        rc = main(["synthesize", "--scenario", "bundled:table", "--kind", "dta",
                   "--cost", "ttt", "--out", str(out)])
        assert rc == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["realized"] is True
        assert summary["replay_max_deviation"] <= summary["replay_tolerance"]

    def test_simulate_deterministic(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            assert main(["simulate", "--scenario", "bundled:table",
                         "--out", str(out)]) == 0
        assert (out1 / "trajectory.csv").read_bytes() == (out2 / "trajectory.csv").read_bytes()
        assert (out1 / "manifest.json").read_bytes() == (out2 / "manifest.json").read_bytes()

    def test_csv_headers_name_units(self, tmp_path):
        out = tmp_path / "out"
        main(["simulate", "--scenario", "bundled:table", "--out", str(out)])
        header = (out / "trajectory.csv").read_text().splitlines()[0]
        assert "veh" in header


class TestSweep:
    def test_small_sweep(self, tmp_path):
        out = tmp_path / "out"
        rc = main(["robustness-sweep", "--scenario", "bundled:robustness",
                   "--sweep", "0:0.5:1", "--model", "fifo", "--out", str(out)])
        assert rc == 0
        lines = (out / "sweep_fifo.csv").read_text().splitlines()
        assert len(lines) == 4
        header = lines[0].split(",")
        assert header[0].startswith("delta_lambda")
        for row in lines[1:]:
            cols = row.split(",")
            assert float(cols[1]) <= float(cols[2]) + 1e-6   # sound bound

    def test_jobs_parallel_same_output(self, tmp_path):
        serial, parallel = tmp_path / "s", tmp_path / "p"
        for out, jobs in ((serial, "1"), (parallel, "2")):
            rc = main(["robustness-sweep", "--scenario", "bundled:robustness",
                       "--sweep", "0:0.5:1", "--jobs", jobs, "--out", str(out)])
            assert rc == 0
        assert (serial / "sweep_fifo.csv").read_bytes() == \
            (parallel / "sweep_fifo.csv").read_bytes()
