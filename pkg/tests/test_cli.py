import json
import subprocess
import sys

import numpy as np
import pytest

from curvkit import Architecture, ConfigError, RngStream, init_network, save_network
from curvkit.cli import default_config, load_config
from curvkit.tables import read_csv


def run_cli(*args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "curvkit", *args],
        capture_output=True,
        text=True,
        cwd=cwd,
    )


def write_config(path, text):
    path.write_text(text)
    return str(path)


SMALL = """
[arch]
widths = 4 5 6 3 1
activation = identity

[mc]
trials = 150
seed = 3
"""


class TestConfig:
    def test_defaults_without_file(self):
        cfg = load_config(None)
        assert cfg == default_config()

    def test_values_parsed(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c.ini", SMALL))
        assert cfg["arch"]["widths"] == [4, 5, 6, 3, 1]
        assert cfg["mc"]["trials"] == 150

    def test_unknown_key_rejected(self, tmp_path):
        bad = SMALL + "\n[train]\nmomentum = 0.9\n"
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.ini", bad))

    def test_unknown_section_rejected(self, tmp_path):
        bad = SMALL + "\n[optimizer]\nkind = adam\n"
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.ini", bad))

    def test_bad_value_rejected(self, tmp_path):
        bad = "[mc]\ntrials = lots\n"
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.ini", bad))

    def test_missing_file_rejected(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/config.ini")


class TestCheck:
    def test_passes_on_default_small_net(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", SMALL)
        result = run_cli("check", "--config", cfg, "--out", str(tmp_path / "out"), cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        assert "all checks passed" in result.stdout
        report = json.loads((tmp_path / "out" / "check_report.json").read_text())
        assert all(c["passed"] for c in report)

    def test_corrupted_weights_fail_symmetry_check(self, tmp_path):
        # Deep enough that weights enter the output Hessian, so the damage
        # reaches the first (symmetry) check.
        net = init_network(Architecture((3, 4, 2, 1)), "gaussian", RngStream(1, 0))
        net.weights[0][0, 0] = np.nan
        weights_path = tmp_path / "net.txt"
        save_network(net, weights_path)
        cfg = write_config(tmp_path / "c.ini", SMALL)
        result = run_cli(
            "check", "--config", cfg, "--weights", str(weights_path),
            "--out", str(tmp_path / "out"), cwd=tmp_path,
        )
        assert result.returncode == 1
        assert "output-hessian-symmetry" in result.stderr

    def test_relu_config_is_graceful(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", SMALL.replace("identity", "relu"))
        result = run_cli("check", "--config", cfg, "--out", str(tmp_path / "out"), cwd=tmp_path)
        assert result.returncode == 2
        assert "unsupported activation" in result.stderr


class TestTheory:
    def test_thm1_small(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", SMALL)
        out = tmp_path / "out"
        result = run_cli("theory", "thm1", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        schema, header, rows = read_csv(out / "thm1.csv")
        assert schema == "curvkit.theory.thm1.v1"
        assert rows[0][header.index("passed")] == "true"

    def test_thm1_single_layer_zero_variance(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", "[arch]\nwidths = 5 1\n\n[mc]\ntrials = 50\n")
        out = tmp_path / "out"
        result = run_cli("theory", "thm1", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        schema, header, rows = read_csv(out / "thm1.csv")
        assert float(rows[0][header.index("variance")]) == 0.0

    def test_norm_and_deviation_table(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini", "[arch]\nwidths = 16 16 16 1\n\n[mc]\ntrials = 400\n"
        )
        out = tmp_path / "out"
        result = run_cli("theory", "norm", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        schema, header, rows = read_csv(out / "norm.csv")
        assert float(rows[0][header.index("limit")]) == 3.0
        dev_schema, _, dev_rows = read_csv(out / "delta_table.csv")
        assert dev_schema == "curvkit.theory.deviation.v1"
        assert len(dev_rows) > 10

    def test_thm2_small(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini", "[arch]\nwidths = 16 16 16 16 1\n\n[mc]\ntrials = 300\n"
        )
        out = tmp_path / "out"
        result = run_cli("theory", "thm2", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        schema, header, rows = read_csv(out / "thm2.csv")
        assert schema == "curvkit.theory.thm2.v1"
        row = rows[0]
        assert row[header.index("passed")] == "true"
        assert float(row[header.index("gamma_backfit")]) > 0.0

    def test_identities_report(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", "[arch]\nwidths = 4 4 1\n\n[mc]\ntrials = 500\n")
        out = tmp_path / "out"
        result = run_cli("theory", "identities", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        _, header, rows = read_csv(out / "identities.csv")
        assert len(rows) == 3

    def test_cross_small(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", "[arch]\nwidths = 8 8 8 1\n\n[mc]\ntrials = 400\n")
        out = tmp_path / "out"
        result = run_cli("theory", "cross", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert result.returncode == 0, result.stderr

    def test_relu_theory_rejected(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini", "[arch]\nwidths = 4 4 1\nactivation = relu\n\n[mc]\ntrials = 50\n"
        )
        result = run_cli("theory", "thm1", "--config", cfg, "--out", str(tmp_path / "o"), cwd=tmp_path)
        assert result.returncode == 2


TRAIN = """
[arch]
widths = 6 6 6 1
activation = relu

[train]
lr = {lr}
epochs = 2
batch_size = 8

[data]
n_samples = 24
seed = 5
"""


class TestTrain:
    def test_zero_rate_constant_loss_column(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", TRAIN.format(lr="0.0"))
        out = tmp_path / "out"
        result = run_cli("train", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        _, header, rows = read_csv(out / "runlog.csv")
        # Weights never move, so each epoch sees the same per-sample losses;
        # the epoch-mean loss is constant even though batches are reshuffled.
        by_epoch = {}
        for row in rows:
            by_epoch.setdefault(row[header.index("epoch")], []).append(
                float(row[header.index("loss")])
            )
        means = [np.mean(v) for v in by_epoch.values()]
        assert np.ptp(means) <= 1e-12

    def test_byte_identical_reruns(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", TRAIN.format(lr="0.05"))
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        for out in (out1, out2):
            result = run_cli("train", "--config", cfg, "--out", str(out), cwd=tmp_path)
            assert result.returncode == 0, result.stderr
        assert (out1 / "runlog.csv").read_bytes() == (out2 / "runlog.csv").read_bytes()
        assert (out1 / "dataset.csv").read_bytes() == (out2 / "dataset.csv").read_bytes()
        assert (out1 / "network_final.txt").read_bytes() == (out2 / "network_final.txt").read_bytes()

    def test_manifest_written(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", TRAIN.format(lr="0.05"))
        out = tmp_path / "out"
        run_cli("train", "--config", cfg, "--out", str(out), cwd=tmp_path)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["schema_version"] == "curvkit.manifest.v1"
        assert manifest["config"]["train"]["lr"] == 0.05
        assert "timing_s" in manifest

    def test_divergence_exit_code(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", TRAIN.format(lr="1e6"))
        out = tmp_path / "out"
        result = run_cli("train", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert result.returncode == 3
        assert (out / "runlog.csv").exists()  # partial log flushed

    def test_seed_flag_overrides_init_seed(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", TRAIN.format(lr="0.05"))
        out = tmp_path / "out"
        run_cli("train", "--config", cfg, "--seed", "99", "--out", str(out), cwd=tmp_path)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["init"]["seed"] == 99


SWEEP = """
[arch]
widths = 6 6 6 1
activation = identity

[train]
lr = 0.05
epochs = 0
batch_size = 10

[data]
n_samples = 30
seed = 5

[sweep]
widths = {widths}
n_seeds = 2
"""


class TestSweep:
    def test_single_width_no_verdict(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", SWEEP.format(widths="10"))
        out = tmp_path / "out"
        result = run_cli("sweep", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["verdict"] is None

    def test_manifest_contains_dataset_seeds(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", SWEEP.format(widths="6 12 18"))
        out = tmp_path / "out"
        result = run_cli("sweep", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert result.returncode in (0, 1), result.stderr
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["dataset_seeds"]) == {"6", "12", "18"}
        _, _, rows = read_csv(out / "sweep.csv")
        assert len(rows) == 6


class TestExitCodes:
    def test_malformed_config_is_exit_2(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", "[nope]\nkey = 1\n")
        result = run_cli("check", "--config", cfg, cwd=tmp_path)
        assert result.returncode == 2
        assert "config error" in result.stderr
