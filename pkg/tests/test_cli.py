import csv

import numpy as np
import pytest

from bnnkit import runio
from bnnkit.cli import (ExperimentConfig, cmd_diagnose, cmd_grid_111, cmd_report,
                        cmd_sample, cmd_train_de, config_to_text, load_config, main,
                        parse_config_text, validate_config)
from bnnkit.data import RawTable, synth_regression
from bnnkit.errors import ConfigError
from bnnkit.numerics import RngStream


def write_dataset(path, n=60, seed=1):
    ds, _ = synth_regression("sine", n, 0.1, RngStream(seed))
    table = RawTable.from_arrays(ds.X, ds.y)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([runio.fmt(v) for v in row])
    return path


BASE_KEYS = dict(
    target="target", hidden=(4,), activation="tanh", members=2, epochs=150,
    chains=2, samples=24, warmup=40, seed=77, jobs=1, init="warm_start",
    truncations=(5, 20),
)


def make_config(tmp_path, out_name="run", **extra):
    data_path = tmp_path / "sine.csv"
    if not data_path.exists():
        write_dataset(data_path)
    values = dict(BASE_KEYS)
    values.update(extra)
    return ExperimentConfig(dataset=str(data_path), out=str(tmp_path / out_name),
                            **values)


class TestConfigParsing:
    def test_roundtrip_through_text(self, tmp_path):
        cfg = make_config(tmp_path)
        back = ExperimentConfig(**parse_config_text(config_to_text(cfg)))
        assert back == cfg

    def test_comments_and_blanks_ignored(self):
        values = parse_config_text("# comment\n\nchains = 3  # trailing\n")
        assert values == {"chains": 3}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown configuration key"):
            parse_config_text("chainz = 3\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("chains = lots\n")

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("chains = 2\nsamples = 10\n")
        cfg = load_config(str(path), ["chains=5"])
        assert cfg.chains == 5 and cfg.samples == 10

    def test_validation_catches_missing_dataset(self, tmp_path):
        cfg = ExperimentConfig(dataset=str(tmp_path / "absent.csv"))
        with pytest.raises(ConfigError, match="not found"):
            validate_config(cfg)

    def test_validation_catches_bad_ranges(self, tmp_path):
        data = write_dataset(tmp_path / "d.csv")
        for bad in (dict(test_fraction=1.5), dict(sampler="gibbs"),
                    dict(target_accept=2.0), dict(init="tepid"),
                    dict(prior="cauchy"), dict(max_tree_depth=30)):
            cfg = ExperimentConfig(dataset=str(data), **bad)
            with pytest.raises(ConfigError):
                validate_config(cfg)

    def test_hmc_requires_step_parameters(self, tmp_path):
        data = write_dataset(tmp_path / "d.csv")
        cfg = ExperimentConfig(dataset=str(data), sampler="hmc")
        with pytest.raises(ConfigError, match="hmc"):
            validate_config(cfg)


class TestMainExitCodes:
    def test_validation_error_is_exit_2(self, tmp_path, capsys):
        code = main(["sample", "-o", "dataset=/no/such/file.csv",
                     "-o", f"out={tmp_path / 'r'}"])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_key_is_exit_2(self, tmp_path):
        assert main(["sample", "-o", "nonsense=1"]) == 2

    def test_success_is_exit_0(self, tmp_path):
        write_dataset(tmp_path / "sine.csv")
        code = main(["train-de",
                     "-o", f"dataset={tmp_path / 'sine.csv'}",
                     "-o", f"out={tmp_path / 'run'}",
                     "-o", "members=1", "-o", "epochs=50", "-o", "hidden=4"])
        assert code == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full train-de -> sample -> diagnose pass, reused read-only."""
    tmp_path = tmp_path_factory.mktemp("pipeline")
    cfg = make_config(tmp_path)
    out = cmd_train_de(cfg)
    cmd_sample(cfg)
    cmd_diagnose(out)
    return cfg, out


class TestPipeline:
    def test_train_de_outputs(self, pipeline):
        cfg, out = pipeline
        members = runio.list_member_ids(out / "ensemble")
        assert members == [0, 1]
        metrics = runio.read_json(out / "ensemble" / "metrics.json")
        for key in ("lm", "dnn", "de"):
            assert "rmse" in metrics[key] and "lppd" in metrics[key]

    def test_sample_outputs(self, pipeline):
        cfg, out = pipeline
        ids = runio.list_chain_ids(out / "chains")
        assert ids == [0, 1]
        samples, meta = runio.read_chain(out / "chains", 0)
        assert samples.shape[0] == cfg.samples
        assert meta["init"] == "warm_start"
        assert meta["failed"] is False
        assert meta["duration_seconds"] > 0

    def test_chain_csv_roundtrip_17_digits(self, pipeline):
        cfg, out = pipeline
        samples, _ = runio.read_chain(out / "chains", 1)
        header, rows = runio.read_table_csv(runio.chain_csv_path(out / "chains", 1))
        assert header[:2] == ["chain", "sample_index"]
        assert len(rows) == cfg.samples
        np.testing.assert_array_equal(
            samples[0], [float(v) for v in rows[0][2:]])

    def test_diagnose_outputs(self, pipeline):
        cfg, out = pipeline
        diag = out / "diagnostics"
        report = runio.read_json(diag / "report.json")
        assert report["n_chains"] == 2
        assert report["between_chain_available"] in (True, False)
        assert "bnn" in report and "coverage" in report
        assert set(report["lppd_truncated"]) == {"5", "20"}
        for name in ("rhat_layers.csv", "cumulative_lppd.csv", "coverage.csv",
                     "chain_slopes.csv", "functional_traces.csv",
                     "pca_loadings.csv", "psc_rhat.csv"):
            header, rows = runio.read_table_csv(diag / name)
            assert header

    def test_cumulative_lppd_rows_per_chain(self, pipeline):
        cfg, out = pipeline
        header, rows = runio.read_table_csv(out / "diagnostics" / "cumulative_lppd.csv")
        per_chain = {}
        for row in rows:
            per_chain.setdefault(row[0], []).append(float(row[2]))
        assert set(per_chain) == {"0", "1"}
        assert all(len(v) == cfg.samples for v in per_chain.values())

    def test_overwrite_protection(self, pipeline):
        cfg, out = pipeline
        with pytest.raises(ConfigError, match="--overwrite"):
            cmd_sample(cfg)
        with pytest.raises(ConfigError, match="--overwrite"):
            cmd_train_de(cfg)
        with pytest.raises(ConfigError, match="--overwrite"):
            cmd_diagnose(out)

    def test_report_over_single_run(self, pipeline, tmp_path):
        cfg, out = pipeline
        table = cmd_report([out], out_file=tmp_path / "report.csv")
        header, first = table[0], table[1]
        assert header[0] == "group"
        assert first[1] == 1
        by_name = dict(zip(header, first))
        assert "ours_rmse_5_mean" in by_name
        assert "lm_rmse_mean" in by_name
        back_header, back_rows = runio.read_table_csv(tmp_path / "report.csv")
        assert back_header == [str(h) for h in header]

    def test_warm_start_requires_checkpoints(self, tmp_path):
        cfg = make_config(tmp_path, out_name="no_ensemble")
        with pytest.raises(ConfigError, match="train-de first"):
            cmd_sample(cfg)

    def test_single_chain_marks_between_chain_unavailable(self, tmp_path):
        cfg = make_config(tmp_path, out_name="single", chains=1,
                          init="cold_random", samples=30, warmup=30)
        out = cmd_sample(cfg)
        cmd_diagnose(out)
        report = runio.read_json(out / "diagnostics" / "report.json")
        assert report["between_chain_available"] is False
        assert "layer_variance" not in report
        assert report["functional"] == {}
        # chain-wise measures still present; split-rhat serialized as null
        layer_rows = report["rhat_layers"]
        assert any(r["crhat_mean"] is not None for r in layer_rows)
        assert all(r["rhat_mean"] is None for r in layer_rows)
        header, rows = runio.read_table_csv(out / "diagnostics" / "cumulative_lppd.csv")
        assert len(rows) == 30

    def test_report_groups_replicates_with_sd(self, tmp_path):
        runs = []
        for replicate in (0, 1):
            cfg = make_config(tmp_path, out_name=f"rep{replicate}",
                              replicate=replicate, init="cold_random",
                              samples=15, warmup=25, chains=2)
            out = cmd_sample(cfg)
            runs.append(out)
        table = cmd_report(runs)
        header, rows = table[0], table[1:]
        assert len(rows) == 1  # same group key
        by_name = dict(zip(header, rows[0]))
        assert by_name["n_runs"] == 2
        assert by_name["lm_rmse_sd"] >= 0.0  # populated, distinct splits
        assert by_name["lm_rmse_sd"] > 0.0

    def test_report_rejects_unknown_group_key(self, pipeline):
        cfg, out = pipeline
        with pytest.raises(ConfigError, match="group-by"):
            cmd_report([out], group_by="flavor")

    def test_out_root_env_var(self, tmp_path, monkeypatch):
        from bnnkit.cli import resolve_out

        monkeypatch.setenv("BNNKIT_OUT_ROOT", str(tmp_path / "root"))
        cfg = ExperimentConfig()
        assert resolve_out(cfg) == tmp_path / "root" / "run"


class TestEarlyStop:
    def test_monitor_stops_and_logs_index(self, tmp_path):
        cfg = make_config(tmp_path, out_name="early", epsilon=100.0, window=3,
                          init="cold_random", samples=40, warmup=30)
        out = cmd_sample(cfg)
        _, meta = runio.read_chain(out / "chains", 0)
        assert meta["stop_index"] == 4  # converges right after the window fills
        samples, _ = runio.read_chain(out / "chains", 0)
        assert samples.shape[0] == 4


class TestDeterminism:
    def test_pipeline_reproduces_byte_identical_outputs(self, tmp_path):
        outputs = {}
        for name, jobs in (("a", 1), ("b", 1), ("c", 2)):
            cfg = make_config(tmp_path, out_name=name, jobs=jobs)
            out = cmd_train_de(cfg)
            cmd_sample(cfg)
            cmd_diagnose(out)
            cmd_report([out], out_file=out / "table.csv")
            payload = {}
            for rel in ("chains/chain_000.csv", "chains/chain_001.csv",
                        "diagnostics/report.json", "table.csv",
                        "ensemble/member_000.csv", "ensemble/metrics.json"):
                payload[rel] = (out / rel).read_bytes()
            outputs[name] = payload
        assert outputs["a"] == outputs["b"]
        assert outputs["a"] == outputs["c"]


class TestGrid111:
    def _load(self, path):
        header, rows = runio.read_table_csv(path)
        idx = {h: i for i, h in enumerate(header)}
        return idx, rows

    def test_tanh_grid_sign_symmetric(self, tmp_path):
        out = tmp_path / "g.csv"
        cmd_grid_111("tanh", [1.0], x=1.0, y=0.7, grid_range=3.0, resolution=31,
                     out_file=out)
        idx, rows = self._load(out)
        lp = np.array([float(r[idx["log_post"]]) for r in rows]).reshape(31, 31)
        assert np.abs(lp - lp[::-1, ::-1]).max() <= 1e-10

    def test_relu_grid_flat_on_dead_half_plane(self, tmp_path):
        out = tmp_path / "g_relu.csv"
        cmd_grid_111("relu", [1.0], x=1.0, y=0.7, grid_range=3.0, resolution=31,
                     out_file=out)
        idx, rows = self._load(out)
        mu = np.array([float(r[idx["mu"]]) for r in rows]).reshape(31, 31)
        # rows indexed by w1: negative w1 never activates at x = 1
        assert np.abs(mu[:15, :]).max() == 0.0

    def test_smaller_tau_pulls_argmax_inward(self, tmp_path):
        out = tmp_path / "g_tau.csv"
        cmd_grid_111("tanh", [0.1, 10.0], x=1.0, y=0.7, grid_range=3.0,
                     resolution=41, out_file=out)
        idx, rows = self._load(out)
        argmax = {}
        for tau in ("0.1", "10.0"):
            subset = [r for r in rows if r[idx["tau"]] == tau]
            best = max(subset, key=lambda r: float(r[idx["log_post"]]))
            argmax[tau] = np.hypot(float(best[idx["w1"]]), float(best[idx["w2"]]))
        assert argmax["0.1"] < argmax["10.0"]

    def test_ml_set_marks_matching_curve(self, tmp_path):
        out = tmp_path / "g_ml.csv"
        cmd_grid_111("tanh", [1.0], x=1.0, y=0.5, grid_range=3.0, resolution=61,
                     out_file=out, ml_tol=0.02)
        idx, rows = self._load(out)
        marked = [r for r in rows if r[idx["ml_set"]] == "1"]
        assert marked
        for r in marked:
            assert abs(float(r[idx["mu"]]) - 0.5) <= 0.02

    def test_resolution_cap(self, tmp_path):
        with pytest.raises(ConfigError):
            cmd_grid_111("tanh", [1.0], 1.0, 0.5, 3.0, 4000, tmp_path / "x.csv")
