"""Run configuration parsing and the command-line front end."""

import json
import math

import numpy as np
import pytest

from warpcost.cli import cli_dispatch
from warpcost.config import RunConfig, load_config
from warpcost.errors import ConfigError
from warpcost.imaging import Image, read_flo, read_pgm, write_pgm
from warpcost.models import load_model
from warpcost.patches import PatchSet, load_dataset, save_dataset
from warpcost.synthetic import translated_pair


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.patch_size == 8 and cfg.stride == 8
        assert cfg.ais_chains == 512 and cfg.ais_temps == 1000
        assert cfg.beta0 == 100.0 and cfg.seed == 0

    def test_apply_skips_none_and_rejects_unknown(self):
        cfg = RunConfig()
        cfg.apply(seed=None, beta0=50.0)
        assert cfg.seed == 0 and cfg.beta0 == 50.0
        with pytest.raises(ConfigError):
            cfg.apply(bogus_key=1)

    def test_sub_config_views(self):
        cfg = RunConfig()
        cfg.apply(seed=3, iterations_per_level=7, em_epochs=4)
        assert cfg.flow_config().iterations_per_level == 7
        assert cfg.gmm_config().seed == 3
        assert cfg.ais_config().seed == 4      # final pass offsets the seed
        assert cfg.search_ais_config().seed == 3
        assert cfg.search_ais_config().n_chains == 128

    def test_load_config_parses_types_and_comments(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment line\n"
                     "patch_size = 4\n"
                     "beta0 = 250.0\n"
                     "\n"
                     "seed=9  # trailing comment\n")
        cfg = load_config(p)
        assert cfg.patch_size == 4 and isinstance(cfg.patch_size, int)
        assert cfg.beta0 == 250.0 and cfg.seed == 9

    def test_load_config_unknown_key_reports_line(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("patch_size = 4\nnot_a_key = 1\n")
        with pytest.raises(ConfigError, match="2"):
            load_config(p)

    def test_load_config_bad_value_rejected(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("patch_size = eight\n")
        with pytest.raises(ConfigError):
            load_config(p)


def _unit_ms_dataset(tmp_path, name="train.wepd"):
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (600, 4))
    x *= 1.0 / np.sqrt((x * x).mean())
    ds = PatchSet(2, x, "train")
    path = tmp_path / name
    save_dataset(ds, path)
    return path


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        assert cli_dispatch(["--help"]) == 0
        assert "Usage" in capsys.readouterr().out

    def test_unknown_command_is_usage_error(self):
        assert cli_dispatch(["frobnicate"]) == 1

    def test_missing_required_option_is_usage_error(self):
        assert cli_dispatch(["model", "fit", "--family", "bcl2"]) == 1

    def test_bad_choice_is_usage_error(self, tmp_path):
        path = _unit_ms_dataset(tmp_path)
        assert cli_dispatch(["model", "fit", "--family", "nope",
                             "--train", str(path),
                             "--out", str(tmp_path / "m.json")]) == 1

    def test_missing_input_file_is_data_error(self, tmp_path):
        assert cli_dispatch(["model", "fit", "--family", "bcl2",
                             "--train", str(tmp_path / "absent.wepd"),
                             "--out", str(tmp_path / "m.json")]) == 2

    def test_unknown_config_key_is_data_error(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("zap = 1\n")
        assert cli_dispatch(["--config", str(p), "model", "--help"]) == 2


class TestModelCommands:
    def test_fit_known_rate_from_unit_mean_square(self, tmp_path):
        train = _unit_ms_dataset(tmp_path)
        out = tmp_path / "bcl2.json"
        assert cli_dispatch(["model", "fit", "--family", "bcl2",
                             "--train", str(train),
                             "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["family"] == "BCL2"
        assert doc["lambda"] == pytest.approx(0.5, abs=1e-9)

    def test_fit_rerun_is_byte_identical(self, tmp_path):
        train = _unit_ms_dataset(tmp_path)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for out in (a, b):
            assert cli_dispatch(["model", "fit", "--family", "gcl2",
                                 "--train", str(train),
                                 "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_eval_writes_report(self, tmp_path):
        train = _unit_ms_dataset(tmp_path)
        m = tmp_path / "m.json"
        cli_dispatch(["model", "fit", "--family", "bcl2",
                      "--train", str(train), "--out", str(m)])
        report = tmp_path / "report.csv"
        assert cli_dispatch(["model", "eval", "--data", str(train),
                             "--model", str(m),
                             "--out", str(report)]) == 0
        lines = report.read_text().splitlines()
        assert lines[0].startswith("model,") and len(lines) == 2
        assert lines[1].split(",")[0] == "BCL2"

    def test_sample_writes_grid_pgm(self, tmp_path):
        train = _unit_ms_dataset(tmp_path)
        m = tmp_path / "m.json"
        cli_dispatch(["model", "fit", "--family", "bcl2",
                      "--train", str(train), "--out", str(m)])
        grid = tmp_path / "grid.pgm"
        assert cli_dispatch(["model", "sample", "--model", str(m),
                             "--rows", "2", "--cols", "3",
                             "--out", str(grid)]) == 0
        img = read_pgm(grid)
        assert img.shape == (2 * 3 + 1, 3 * 3 + 1)

    def test_eig_reports_descending_spectrum(self, tmp_path, capsys):
        train = _unit_ms_dataset(tmp_path)
        m = tmp_path / "m.json"
        cli_dispatch(["model", "fit", "--family", "gcl2",
                      "--train", str(train), "--out", str(m)])
        assert cli_dispatch(["model", "eig", "--model", str(m),
                             "--top", "4"]) == 0
        out = capsys.readouterr().out
        assert "leading_count" in out or "count" in out


class TestDatasetAndGmm:
    def test_dataset_build_round_trip(self, tmp_path):
        train = tmp_path / "train.wepd"
        test = tmp_path / "test.wepd"
        assert cli_dispatch(["--seed", "0", "dataset", "build",
                             "--count", "3", "--height", "64",
                             "--width", "64",
                             "--out-train", str(train),
                             "--out-test", str(test)]) == 0
        ds = load_dataset(train)
        assert ds.patch_size == 8 and len(ds.patches) > 0
        held = load_dataset(test, split_tag="test")
        assert len(held.patches) > 0

    def test_dataset_build_rerun_byte_identical(self, tmp_path):
        outs = []
        for tag in ("1", "2"):
            train = tmp_path / f"train{tag}.wepd"
            test = tmp_path / f"test{tag}.wepd"
            assert cli_dispatch(["--seed", "5", "dataset", "build",
                                 "--count", "2", "--height", "64",
                                 "--width", "64",
                                 "--out-train", str(train),
                                 "--out-test", str(test)]) == 0
            outs.append((train.read_bytes(), test.read_bytes()))
        assert outs[0] == outs[1]

    def test_gmm_train_writes_model_and_trace(self, tmp_path):
        rng = np.random.default_rng(1)
        ds = PatchSet(2, rng.normal(0, 0.3, (400, 4)), "train")
        train = tmp_path / "train.wepd"
        save_dataset(ds, train)
        out = tmp_path / "g.gmm"
        trace = tmp_path / "trace.csv"
        assert cli_dispatch(["--seed", "0", "gmm", "train",
                             "--train", str(train), "--k", "2",
                             "--epochs", "3", "--minibatch", "400",
                             "--out", str(out),
                             "--trace", str(trace)]) == 0
        model = load_model(out)
        assert model.k == 2 and model.dim == 4
        lines = trace.read_text().splitlines()
        assert lines[0].startswith("#") and "k=2" in lines[0]
        assert lines[1] == "epoch,mean_ll"
        assert len(lines) == 2 + 3 + 1  # comment, header, init + 3 epochs


class TestFlowCommands:
    def _write_pair(self, tmp_path):
        i1, i2, gt = translated_pair(48, 48, 1.0, 0.0, seed=0,
                                     noise_sigma=0.002)
        p1, p2 = tmp_path / "i1.pgm", tmp_path / "i2.pgm"
        write_pgm(i1, p1, maxval=65535)
        write_pgm(i2, p2, maxval=65535)
        return p1, p2, gt

    def _fit_model(self, tmp_path):
        train = _unit_ms_dataset(tmp_path, "flow_train.wepd")
        rng = np.random.default_rng(2)
        x = rng.normal(0, 0.05, (500, 64))
        ds = PatchSet(8, x, "train")
        path = tmp_path / "train64.wepd"
        save_dataset(ds, path)
        m = tmp_path / "m64.json"
        cli_dispatch(["model", "fit", "--family", "bcl2",
                      "--train", str(path), "--out", str(m)])
        return m

    def test_estimate_then_score(self, tmp_path, capsys):
        p1, p2, gt = self._write_pair(tmp_path)
        m = self._fit_model(tmp_path)
        flo = tmp_path / "est.flo"
        trace = tmp_path / "trace.csv"
        assert cli_dispatch(["flow", "estimate", "--model", str(m),
                             "--i1", str(p1), "--i2", str(p2),
                             "--out", str(flo), "--trace", str(trace),
                             "--iterations", "3", "--warm-start", "2"]) == 0
        est = read_flo(flo)
        assert est.shape == (48, 48)
        assert trace.read_text().startswith("level,iter,beta")

        gt_path = tmp_path / "gt.flo"
        from warpcost.imaging import write_flo
        write_flo(gt, gt_path)
        assert cli_dispatch(["flow", "aepe", "--est", str(flo),
                             "--gt", str(gt_path)]) == 0
        err = float(capsys.readouterr().out.strip().splitlines()[-1])
        assert err < 1.0

    def test_aepe_identical_flows_prints_zero(self, tmp_path, capsys):
        from warpcost.imaging import FlowField, write_flo
        f = FlowField(np.full((8, 8), 1.5), np.zeros((8, 8)))
        p = tmp_path / "f.flo"
        write_flo(f, p)
        assert cli_dispatch(["flow", "aepe", "--est", str(p),
                             "--gt", str(p)]) == 0
        assert float(capsys.readouterr().out.strip()) == 0.0

    def test_flow_bench_writes_table(self, tmp_path):
        m = self._fit_model(tmp_path)
        out = tmp_path / "bench.csv"
        assert cli_dispatch(["--seed", "0", "flow", "bench",
                             "--model", str(m), "--count", "1",
                             "--height", "64", "--width", "64",
                             "--iterations", "2",
                             "--out", str(out)]) == 0
        assert "aggregate_aepe" in out.read_text()

    def test_denoise_round_trip(self, tmp_path):
        m = self._fit_model(tmp_path)
        rng = np.random.default_rng(3)
        img = Image(np.clip(0.5 + rng.normal(0, 0.05, (32, 32)), 0, 1))
        src = tmp_path / "noisy.pgm"
        write_pgm(img, src, maxval=65535)
        dst = tmp_path / "clean.pgm"
        assert cli_dispatch(["denoise", "--model", str(m),
                             "--in", str(src), "--out", str(dst),
                             "--sigma", "0.05"]) == 0
        out = read_pgm(dst)
        assert out.shape == (32, 32)

    def test_threads_flag_accepted(self, tmp_path):
        train = _unit_ms_dataset(tmp_path)
        out = tmp_path / "m.json"
        assert cli_dispatch(["--threads", "1", "model", "fit",
                             "--family", "bcl2", "--train", str(train),
                             "--out", str(out)]) == 0
