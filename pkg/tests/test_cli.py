import json

import numpy as np
import pytest

from prefhedge.cli import RunConfig, TABLE_BLOCKS, main
from prefhedge.errors import ConfigError

BASE = {
    "params": {"r": 0.02, "mu_S": 0.07, "sigma_S": 0.2, "rho": 0.0,
               "mu_Y": 0.02, "sigma_Y": 0.04, "T": 40.0, "y0": float(np.log(2.0))},
}


def write_config(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(BASE))
    if extra:
        cfg.update(extra)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


class TestConfigParsing:
    def test_minimal_config(self, tmp_path):
        cfg = RunConfig.from_file(write_config(tmp_path))
        assert cfg.params.T == 40.0

    def test_unknown_top_key_rejected(self, tmp_path):
        path = write_config(tmp_path, {"surprise": 1})
        with pytest.raises(ConfigError, match="surprise"):
            RunConfig.from_file(path)

    def test_unknown_param_key_rejected(self, tmp_path):
        cfg = json.loads(json.dumps(BASE))
        cfg["params"]["volatility"] = 0.3
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        with pytest.raises(ConfigError, match="volatility"):
            RunConfig.from_file(path)

    def test_invalid_parameter_names_invariant(self, tmp_path):
        cfg = json.loads(json.dumps(BASE))
        cfg["params"]["sigma_S"] = -0.2
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        with pytest.raises(ConfigError, match="sigma_S"):
            RunConfig.from_file(path)

    def test_unknown_block_rejected(self, tmp_path):
        path = write_config(tmp_path, {"table_block": "0.03,0.6"})
        with pytest.raises(ConfigError, match="table_block"):
            RunConfig.from_file(path)

    def test_probe_validation(self, tmp_path):
        path = write_config(tmp_path, {"probes": [{"t": -1.0, "exp_y": 2.0}]})
        with pytest.raises(ConfigError, match="probes"):
            RunConfig.from_file(path)

    def test_seed_override(self, tmp_path):
        path = write_config(tmp_path, {"sim": {"seed": 1}})
        cfg = RunConfig.from_file(path, seed_override=99)
        assert cfg.sim.seed == 99

    def test_all_table_blocks_known(self):
        assert len(TABLE_BLOCKS) == 12


class TestCommands:
    def test_solve_rho0_verifies_closed_form(self, tmp_path, capsys):
        path = write_config(tmp_path, {
            "grid": {"n_t_steps": 80, "n_y": 81, "n_ybar": 9},
            "probes": [{"t": 0.0, "exp_y": 2.0}, {"t": 35.0, "exp_y": 2.0}],
        })
        rc = main(["solve", "--config", str(path), "--out", str(tmp_path / "out")])
        assert rc == 0
        summary = json.loads((tmp_path / "out" / "solve_summary.json").read_text())
        assert summary["closed_form_verified"] is True
        assert summary["converged"] is True
        assert summary["probes"][0]["pi"] == pytest.approx(0.272, abs=1e-3)
        assert (tmp_path / "out" / "h_surface.bin").exists()
        assert (tmp_path / "out" / "policy_grid.csv").exists()

    def test_table_rho0_block(self, tmp_path):
        path = write_config(tmp_path, {"table_block": "0.02,0"})
        rc = main(["table", "--config", str(path), "--out", str(tmp_path / "out")])
        assert rc == 0
        data = json.loads((tmp_path / "out" / "table_0.02_0.json").read_text())
        row = data["rows"]["7"]
        assert row[0] == pytest.approx(0.078, abs=1e-3)
        assert row[5] == pytest.approx(0.161, abs=1e-3)

    def test_round_trip_solve_then_verify(self, tmp_path):
        out = tmp_path / "out"
        path = write_config(tmp_path, {
            "grid": {"n_t_steps": 80, "n_y": 81, "n_ybar": 9},
            "probes": [{"t": 0.0, "exp_y": 2.0}],
            "sim": {"n_paths": 4000, "n_steps": 60, "seed": 7},
            "verify": {"spike_deltas": [0.5], "spike_offsets": [0.1],
                       "reward_probes": [{"t": 30.0, "exp_y": 2.0}],
                       "residual_tol": 0.001},
        })
        assert main(["solve", "--config", str(path), "--out", str(out)]) == 0
        rc = main(["verify", "--config", str(path), "--out", str(out)])
        report = json.loads((out / "verify_report.json").read_text())
        assert rc == 0, report
        assert report["pass"] is True
        assert report["residual"]["pass"] is True
        assert all(r["pass"] for r in report["g_representation"])

    def test_verify_detects_tampered_surface(self, tmp_path):
        out = tmp_path / "out"
        path = write_config(tmp_path, {
            "grid": {"n_t_steps": 40, "n_y": 61, "n_ybar": 7},
            "probes": [{"t": 0.0, "exp_y": 2.0}],
            "sim": {"n_paths": 2000, "n_steps": 40, "seed": 7},
        })
        assert main(["solve", "--config", str(path), "--out", str(out)]) == 0
        target = out / "h_surface.bin"
        blob = bytearray(target.read_bytes())
        blob[len(blob) // 2] ^= 0x10
        target.write_bytes(bytes(blob))
        rc = main(["verify", "--config", str(path), "--out", str(out)])
        assert rc != 0

    def test_bridge_test(self, tmp_path):
        path = write_config(tmp_path, {
            "sim": {"n_paths": 20000, "n_steps": 400, "seed": 5},
        })
        rc = main(["bridge-test", "--config", str(path), "--out", str(tmp_path / "out")])
        assert rc == 0
        report = json.loads((tmp_path / "out" / "bridge_report.json").read_text())
        assert report["pass"] is True

    def test_config_error_exit_code(self, tmp_path):
        path = write_config(tmp_path, {"surprise": True})
        assert main(["solve", "--config", str(path)]) == 2
