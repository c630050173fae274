"""CLI subcommands, config hashing, manifests, plotdata transform."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from diffrx.errors import ConfigurationError, DataFormatError
from diffrx.harness.cli import main, run
from diffrx.harness.config import config_from_dict, load_config, save_config
from diffrx.harness.manifest import read_manifest
from diffrx.harness.plotdata import run_plotdata
from diffrx.harness.runs import PadCropEstimator, run_generate
from diffrx.grid import ResourceGrid
from diffrx.pilots import PilotMask, PilotObservation, comb_mask

TINY = {
    "seed": 42,
    "channel": {"num_subcarriers": 16, "num_symbols": 1, "num_paths": 4},
    "dataset": {"n_train": 48, "n_val": 8, "n_test": 12},
    "pilot": {"scheme": "comb", "spacing": 4},
    "snr_db": [15.0],
    "schedule": {"num_steps": 40},
    "model": {"base_channels": 8, "depth": 1, "time_embed_dim": 16},
    "train": {"epochs": 1, "batch_size": 16, "checkpoint_every": 1},
    "sampler": {"steps": 6, "seed": 3},
    "eval_frames": 4,
    "eval_grids": 6,
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_hash_stable_under_key_reordering(self, tmp_path):
        a = config_from_dict(TINY)
        reordered = dict(reversed(list(TINY.items())))
        b = config_from_dict(reordered)
        assert a.config_hash() == b.config_hash()

    def test_field_level_messages(self):
        with pytest.raises(ConfigurationError, match="dataset.n_train"):
            config_from_dict({**TINY, "dataset": {"n_train": 0, "n_val": 1, "n_test": 1}})
        with pytest.raises(ConfigurationError, match="channel"):
            config_from_dict({**TINY, "channel": {"num_paths": 0}})
        with pytest.raises(ConfigurationError, match="modulation"):
            config_from_dict({**TINY, "modulation": "8psk"})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown config keys"):
            config_from_dict({**TINY, "typo_key": 1})

    def test_save_load_round_trip(self, tmp_path):
        config = config_from_dict(TINY)
        path = tmp_path / "cfg.json"
        save_config(path, config)
        assert load_config(path).config_hash() == config.config_hash()

    def test_invalid_json_line_number(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\n  broken\n}")
        with pytest.raises(DataFormatError, match="line 2"):
            load_config(path)


class TestGenerate:
    def test_same_seed_byte_identical(self, tiny_config, tmp_path):
        run(["generate", "--config", str(tiny_config), "--out", str(tmp_path / "a")])
        run(["generate", "--config", str(tiny_config), "--out", str(tmp_path / "b")])
        for name in ("train.ds", "val.ds", "test.ds"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_zero_count_rejected_no_files(self, tmp_path):
        cfg = dict(TINY, dataset={"n_train": 0, "n_val": 1, "n_test": 1})
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / "out"
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--config", str(path), "--out", str(out)])
        assert exc.value.code == 1
        assert not out.exists() or not any(out.iterdir())

    def test_manifest_lists_three_datasets_plus_itself(self, tiny_config, tmp_path):
        out = tmp_path / "out"
        run(["generate", "--config", str(tiny_config), "--out", str(out)])
        manifest = read_manifest(out)
        assert sorted(manifest["outputs"]) == sorted(
            ["train.ds", "val.ds", "test.ds", "manifest.json"])

    def test_refuses_overwrite_without_force(self, tiny_config, tmp_path):
        out = tmp_path / "out"
        run(["generate", "--config", str(tiny_config), "--out", str(out)])
        with pytest.raises(ConfigurationError, match="--force"):
            run(["generate", "--config", str(tiny_config), "--out", str(out)])
        run(["generate", "--config", str(tiny_config), "--out", str(out), "--force"])


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One tiny generate+train shared by the evaluate/baseline tests."""
    root = tmp_path_factory.mktemp("run")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY))
    data = root / "data"
    ckpt = root / "ckpt"
    run(["generate", "--config", str(cfg_path), "--out", str(data)])
    run(["train", "--config", str(cfg_path), "--data", str(data),
         "--out", str(ckpt), "--densities", "4,8"])
    return cfg_path, data, ckpt, root


class TestTrain:
    def test_per_density_checkpoints(self, trained_run):
        _, _, ckpt, _ = trained_run
        assert (ckpt / "ckpt_comb4_best.bin").exists()
        assert (ckpt / "ckpt_comb8_best.bin").exists()
        assert (ckpt / "metrics_comb4.csv").exists()

    def test_dim_mismatch_refused(self, trained_run, tmp_path):
        cfg_path, data, _, _ = trained_run
        bad = json.loads(cfg_path.read_text())
        bad["channel"]["num_subcarriers"] = 32
        bad_path = tmp_path / "bad.json"
        bad_path.write_text(json.dumps(bad))
        with pytest.raises(ConfigurationError, match="does not match"):
            run(["train", "--config", str(bad_path), "--data", str(data),
                 "--out", str(tmp_path / "x")])

    def test_resume_continues_step_count(self, trained_run, tmp_path):
        cfg_path, data, _, _ = trained_run
        out = tmp_path / "resume"
        run(["train", "--config", str(cfg_path), "--data", str(data),
             "--out", str(out), "--densities", "4"])
        first = read_csv(out / "metrics_comb4.csv")
        last_step = int(first[-1][0])
        # bump the epoch budget and resume: epochs continue, steps accumulate
        cfg2 = json.loads(cfg_path.read_text())
        cfg2["train"]["epochs"] = 2
        cfg2_path = tmp_path / "cfg2.json"
        cfg2_path.write_text(json.dumps(cfg2))
        run(["train", "--config", str(cfg2_path), "--data", str(data),
             "--out", str(out), "--densities", "4", "--resume"])
        second = read_csv(out / "metrics_comb4.csv")
        assert int(second[1][1]) == 1          # resumed at epoch index 1
        assert int(second[1][0]) > last_step   # global step kept counting

    def test_refuses_overwrite_without_force(self, trained_run, tmp_path):
        cfg_path, data, ckpt, _ = trained_run
        with pytest.raises(ConfigurationError, match="--force"):
            run(["train", "--config", str(cfg_path), "--data", str(data),
                 "--out", str(ckpt)])


class TestEvaluate:
    def test_csvs_cover_requested_cells(self, trained_run, tmp_path):
        cfg_path, data, ckpt, _ = trained_run
        out = tmp_path / "eval"
        run(["evaluate", "--config", str(cfg_path), "--data", str(data),
             "--ckpt", str(ckpt), "--out", str(out),
             "--densities", "4,8", "--steps", "4,6", "--skip-ber"])
        rows = read_csv(out / "nmse_vs_steps.csv")
        assert rows[0] == ["density", "steps", "pipeline", "nmse_mean",
                           "nmse_std", "n_grids", "seed"]
        cells = {(r[0], r[1], r[2]) for r in rows[1:]}
        for density in ("1/4", "1/8"):
            for steps in ("4", "6"):
                for pipeline in ("repaint", "vanilla"):
                    assert (density, steps, pipeline) in cells
        baseline = read_csv(out / "baseline.csv")
        assert {r[0] for r in baseline[1:]} == {"ls-linear", "lmmse",
                                                "dm-vanilla", "dm-repaint"}

    def test_classical_only_needs_no_checkpoint(self, trained_run, tmp_path):
        cfg_path, data, _, _ = trained_run
        out = tmp_path / "classical"
        run(["evaluate", "--config", str(cfg_path), "--data", str(data),
             "--out", str(out), "--estimators", "ls-linear", "--skip-ber"])
        rows = read_csv(out / "baseline.csv")
        assert rows[1][0] == "ls-linear"

    def test_missing_checkpoint_gives_absent_rows(self, trained_run, tmp_path):
        cfg_path, data, ckpt, _ = trained_run
        out = tmp_path / "absent"
        run(["evaluate", "--config", str(cfg_path), "--data", str(data),
             "--ckpt", str(ckpt), "--out", str(out), "--estimators", "dm-repaint",
             "--densities", "16", "--steps", "4", "--skip-ber"])
        rows = read_csv(out / "nmse_vs_steps.csv")
        assert rows[1][3] == "" and rows[1][5] == "0"

    def test_deterministic_csv_bytes(self, trained_run, tmp_path):
        cfg_path, data, ckpt, _ = trained_run
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            run(["evaluate", "--config", str(cfg_path), "--data", str(data),
                 "--ckpt", str(ckpt), "--out", str(out), "--densities", "4",
                 "--steps", "4", "--estimators", "ls-linear,lmmse,dm-repaint"])
            outs.append(out)
        for name in ("nmse_vs_steps.csv", "baseline.csv", "ber_vs_snr.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_ber_csv_schema(self, trained_run, tmp_path):
        cfg_path, data, ckpt, _ = trained_run
        out = tmp_path / "ber"
        run(["evaluate", "--config", str(cfg_path), "--data", str(data),
             "--ckpt", str(ckpt), "--out", str(out), "--densities", "4",
             "--steps", "4", "--estimators", "perfect,ls-linear,dm-best-of-n"])
        rows = read_csv(out / "ber_vs_snr.csv")
        assert rows[0] == ["estimator", "snr_db", "density", "ber", "nmse_mean",
                           "n_bits", "seed"]
        by_est = {r[0]: float(r[3]) for r in rows[1:]}
        assert by_est["perfect"] <= by_est["ls-linear"] + 1e-9

    def test_reproducible_flag_needs_seed(self, tmp_path):
        cfg = {k: v for k, v in TINY.items() if k != "seed"}
        path = tmp_path / "noseed.json"
        path.write_text(json.dumps(cfg))
        with pytest.raises(ConfigurationError, match="--reproducible"):
            run(["evaluate", "--config", str(path), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o"), "--reproducible"])


class TestBaselineCommand:
    def test_runs_without_checkpoint(self, trained_run, tmp_path):
        cfg_path, data, _, _ = trained_run
        out = tmp_path / "bl"
        run(["baseline", "--config", str(cfg_path), "--data", str(data),
             "--out", str(out)])
        rows = read_csv(out / "baseline.csv")
        assert {r[0] for r in rows[1:]} == {"ls-linear", "lmmse"}
        assert not (out / "nmse_vs_steps.csv").exists()


class TestPlotdata:
    def _write(self, path, header, rows):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)

    def test_nmse_rows_emit_db(self, tmp_path):
        src = tmp_path / "sweep.csv"
        self._write(src, ["density", "steps", "pipeline", "nmse_mean", "nmse_std",
                          "n_grids", "seed"],
                    [["1/4", "50", "repaint", "0.01", "0.001", "100", "1"]])
        out = tmp_path / "long.csv"
        run(["plotdata", "--in", str(src), "--out", str(out)])
        rows = read_csv(out)
        assert rows[0] == ["series", "x", "y", "err", "y_db"]
        assert rows[1][0] == "repaint@1/4"
        assert float(rows[1][4]) == pytest.approx(-20.0)

    def test_ber_rows_leave_db_empty(self, tmp_path):
        src = tmp_path / "ber.csv"
        self._write(src, ["estimator", "snr_db", "density", "ber", "nmse_mean",
                          "n_bits", "seed"],
                    [["lmmse", "10.0", "1/4", "0.02", "0.05", "10000", "1"]])
        out = tmp_path / "long.csv"
        run_plotdata(src, out)
        rows = read_csv(out)
        assert rows[1][4] == ""

    def test_round_trips_own_output(self, tmp_path):
        src = tmp_path / "sweep.csv"
        self._write(src, ["density", "steps", "pipeline", "nmse_mean", "nmse_std",
                          "n_grids", "seed"],
                    [["1/16", "370", "repaint", "0.004", "0.002", "100", "7"]])
        first = tmp_path / "long1.csv"
        second = tmp_path / "long2.csv"
        run_plotdata(src, first)
        run_plotdata(first, second)
        assert first.read_bytes() == second.read_bytes()

    def test_empty_input_header_only(self, tmp_path):
        src = tmp_path / "empty.csv"
        src.write_text("")
        out = tmp_path / "long.csv"
        run_plotdata(src, out)
        assert read_csv(out) == [["series", "x", "y", "err", "y_db"]]

    def test_malformed_rows_name_line_numbers(self, tmp_path):
        src = tmp_path / "bad.csv"
        self._write(src, ["density", "steps", "pipeline", "nmse_mean", "nmse_std",
                          "n_grids", "seed"],
                    [["1/4", "50", "repaint", "0.01", "0.001", "100", "1"],
                     ["1/4", "oops", "repaint", "0.01", "0.001", "100", "1"]])
        with pytest.raises(DataFormatError, match="line 3"):
            run_plotdata(src, tmp_path / "out.csv")

    def test_unknown_header_rejected(self, tmp_path):
        src = tmp_path / "odd.csv"
        self._write(src, ["a", "b"], [["1", "2"]])
        with pytest.raises(DataFormatError, match="line 1"):
            run_plotdata(src, tmp_path / "out.csv")


class TestCliContract:
    def test_error_json_on_stderr_and_nonzero_exit(self, tmp_path):
        result = subprocess.run(
            [sys.executable, "-m", "diffrx.harness.cli", "generate",
             "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")],
            capture_output=True, text=True)
        assert result.returncode == 1
        payload = json.loads(result.stderr.strip().splitlines()[-1])
        assert payload["error"] == "ConfigurationError"
        assert "missing.json" in payload["message"]

    def test_env_thread_cap_validated(self, tiny_config, tmp_path, monkeypatch):
        monkeypatch.setenv("DIFFRX_THREADS", "abc")
        with pytest.raises(ConfigurationError, match="DIFFRX_THREADS"):
            run(["generate", "--config", str(tiny_config), "--out", str(tmp_path / "o")])

    def test_threaded_generate_matches_serial(self, tiny_config, tmp_path, monkeypatch):
        run(["generate", "--config", str(tiny_config), "--out", str(tmp_path / "serial")])
        monkeypatch.setenv("DIFFRX_THREADS", "4")
        run(["generate", "--config", str(tiny_config), "--out", str(tmp_path / "threaded")])
        assert (tmp_path / "serial" / "train.ds").read_bytes() == \
            (tmp_path / "threaded" / "train.ds").read_bytes()


class TestPadCrop:
    def test_pads_to_factor_and_crops_back(self):
        class Recorder:
            def predict_batch(self, observations):
                self.shapes = [o.ls_estimate.shape for o in observations]
                return [ResourceGrid.zeros(*s) for s in self.shapes]

        inner = Recorder()
        wrapper = PadCropEstimator(inner, factor=4)
        mask = comb_mask(10, 1, 2)
        ls = np.zeros((10, 1), dtype=complex)
        ls[::2] = 1.0
        obs = PilotObservation(ResourceGrid.from_complex(ls), mask, 0.01)
        out = wrapper.predict(obs)
        assert inner.shapes == [(12, 1)]
        assert out.shape == (10, 1)
        assert wrapper.pad_sizes(10, 1) == (2, 0)
