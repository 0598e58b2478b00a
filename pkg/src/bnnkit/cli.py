"""Experiment harness.

Subcommands: train-de, sample, diagnose, report, grid-111. Each takes
--config FILE (flat key = value lines, # comments) plus repeatable
-o key=value overrides. Exit codes: 0 success, 2 validation error (nothing
computed), 3 runtime failure (partial outputs retained).

Run directory layout (the `out` key):
    config.txt                resolved configuration echo
    ensemble/                 member checkpoints + metrics.json
    chains/                   chain dumps + per-chain metadata
    diagnostics/              report.json + plot CSVs
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import baselines, diagnostics, runio
from .data import SplitSpec, load_csv, normalize_split, subsample_table
from .errors import (AllChainsFailedError, BnnkitError, ConfigError,
                     DegenerateSequenceError, InsufficientHistoryError)
from .network import (HEAD_FIXED, HEAD_HETEROSCEDASTIC, ACTIVATIONS, NetworkSpec,
                      forward_batch, layout_for, log_posterior_unnorm)
from .numerics import GAUSSIAN, LAPLACE, DensityParams, RngStream, gaussian_log_pdf
from .sampling import (Chain, ChainSet, HmcConfig, InitStrategy, NutsConfig,
                       run_chainset)
from .training import AdamConfig, train_ensemble

OUT_ROOT_ENV = "BNNKIT_OUT_ROOT"

DEFAULT_COVERAGE_LEVELS = (0.05, 0.1, 0.2, 0.5, 0.8, 0.9, 0.95)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = ""
    target: str = "target"
    test_fraction: float = 0.2
    replicate: int = 0
    max_rows: int = 4000  # caps the large tables at desk scale; 0 disables
    hidden: tuple = (16, 16)
    activation: str = "tanh"
    leaky_slope: float = 0.01
    relu_cap: float = 1.0
    head: str = HEAD_HETEROSCEDASTIC
    fixed_sigma: float = 1.0
    biases: bool = True
    prior: str = GAUSSIAN
    prior_scale: float = 1.0
    sampler: str = "nuts"
    target_accept: float = 0.8
    max_tree_depth: int = 10
    warmup: int = 1000
    step_size: float = 0.0
    trajectory_length: float = 0.0
    chains: int = 4
    samples: int = 1000
    init: str = "cold_random"
    members: int = 4
    learning_rate: float = 1e-2
    weight_decay: float = 1e-2
    epochs: int = 5000
    kappa: int = 4
    split_kappa: int = 2
    rank_normalize: bool = True
    epsilon: float = 0.0
    window: int = 50
    coverage_levels: tuple = DEFAULT_COVERAGE_LEVELS
    truncations: tuple = (10, 100, 1000)
    seed: int = 1
    out: str = ""
    jobs: int = 1


_INT_TUPLES = {"hidden", "truncations"}
_FLOAT_TUPLES = {"coverage_levels"}
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown configuration key {key!r}")
    if key in _INT_TUPLES:
        try:
            return tuple(int(v) for v in raw.split(",") if v.strip() != "")
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None
    if key in _FLOAT_TUPLES:
        try:
            return tuple(float(v) for v in raw.split(",") if v.strip() != "")
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated floats, got {raw!r}") from None
    proto = getattr(ExperimentConfig, key)
    if isinstance(proto, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    try:
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: could not parse {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {line_no}: expected key = value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return values


def load_config(path: str | None, overrides) -> ExperimentConfig:
    values = {}
    if path is not None:
        cfg_path = Path(path)
        if not cfg_path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(cfg_path.read_text()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw)
    return ExperimentConfig(**values)


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in sorted(fields(ExperimentConfig), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            rendered = ",".join(runio.fmt(v) if isinstance(v, float) else str(v)
                                for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = runio.fmt(value)
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def validate_config(cfg: ExperimentConfig, need_dataset: bool = True) -> None:
    if need_dataset:
        if not cfg.dataset:
            raise ConfigError("dataset path is required")
        if not Path(cfg.dataset).is_file():
            raise ConfigError(f"dataset file not found: {cfg.dataset}")
    if not (0.0 < cfg.test_fraction < 1.0):
        raise ConfigError(f"test_fraction must lie in (0, 1), got {cfg.test_fraction}")
    if cfg.activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {cfg.activation!r}")
    if cfg.head not in (HEAD_HETEROSCEDASTIC, HEAD_FIXED):
        raise ConfigError(f"unknown head {cfg.head!r}")
    if cfg.prior not in (GAUSSIAN, LAPLACE):
        raise ConfigError(f"unknown prior family {cfg.prior!r}")
    if cfg.prior_scale <= 0.0:
        raise ConfigError("prior_scale must be positive")
    if cfg.sampler not in ("nuts", "hmc"):
        raise ConfigError(f"sampler must be nuts or hmc, got {cfg.sampler!r}")
    if cfg.sampler == "hmc" and (cfg.step_size <= 0.0 or cfg.trajectory_length <= 0.0):
        raise ConfigError("hmc needs positive step_size and trajectory_length")
    if not (0.0 < cfg.target_accept < 1.0):
        raise ConfigError("target_accept must lie in (0, 1)")
    if not (1 <= cfg.max_tree_depth <= 12):
        raise ConfigError("max_tree_depth must lie in [1, 12]")
    if cfg.init not in ("cold_random", "prior_draw", "warm_start"):
        raise ConfigError(f"unknown init {cfg.init!r}")
    if cfg.chains < 1 or cfg.samples < 1 or cfg.members < 1:
        raise ConfigError("chains, samples and members must be >= 1")
    if cfg.warmup < 0 or cfg.epochs < 1:
        raise ConfigError("warmup must be >= 0 and epochs >= 1")
    if cfg.kappa < 2 or cfg.split_kappa < 1:
        raise ConfigError("kappa must be >= 2 and split_kappa >= 1")
    if cfg.epsilon < 0.0 or cfg.window < 1:
        raise ConfigError("epsilon must be >= 0 and window >= 1")
    if any(not (0.0 < v < 1.0) for v in cfg.coverage_levels):
        raise ConfigError("coverage levels must lie in (0, 1)")
    if any(t < 1 for t in cfg.truncations):
        raise ConfigError("truncations must be >= 1")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    if not any(w >= 1 for w in cfg.hidden) and cfg.hidden:
        raise ConfigError("hidden widths must be >= 1")


def resolve_out(cfg: ExperimentConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / "run"


def network_spec_from(cfg: ExperimentConfig, input_dim: int) -> NetworkSpec:
    return NetworkSpec(
        input_dim=input_dim, hidden_widths=tuple(cfg.hidden), activation=cfg.activation,
        head=cfg.head, fixed_sigma=cfg.fixed_sigma, biases=cfg.biases,
        leaky_slope=cfg.leaky_slope, relu_cap=cfg.relu_cap,
    )


def prior_from(cfg: ExperimentConfig) -> DensityParams:
    return DensityParams(cfg.prior, 0.0, cfg.prior_scale)


def sampler_config_from(cfg: ExperimentConfig):
    if cfg.sampler == "hmc":
        return HmcConfig(step_size=cfg.step_size, trajectory_length=cfg.trajectory_length,
                         warmup_steps=cfg.warmup)
    return NutsConfig(target_accept=cfg.target_accept, max_tree_depth=cfg.max_tree_depth,
                      warmup_steps=cfg.warmup)


def load_split(cfg: ExperimentConfig):
    table = load_csv(cfg.dataset, cfg.target)
    if cfg.max_rows > 0:
        table = subsample_table(table, cfg.max_rows, RngStream(cfg.seed))
    split = SplitSpec(test_fraction=cfg.test_fraction, seed=cfg.seed,
                      replicate=cfg.replicate)
    return normalize_split(table, split)


class EarlyStopMonitorFactory:
    """Builds per-chain expanding-window LPPD monitors; picklable for --jobs."""

    def __init__(self, spec: NetworkSpec, test_X, test_y, epsilon: float, window: int):
        self.spec = spec
        self.test_X = np.asarray(test_X, dtype=float)
        self.test_y = np.asarray(test_y, dtype=float)
        self.epsilon = epsilon
        self.window = window

    def __call__(self, chain_id: int):
        monitor = diagnostics.ConvergenceMonitor(epsilon=self.epsilon, window=self.window)
        spec, X, y = self.spec, self.test_X, self.test_y

        def check(sample_index: int, theta) -> bool:
            mu, log_var = forward_batch(spec, theta, X)
            monitor.update(gaussian_log_pdf(y, mu, np.exp(0.5 * log_var)))
            try:
                return diagnostics.convergence_check(monitor) == diagnostics.CONVERGED
            except InsufficientHistoryError:
                return False

        return check


def _json_clean(value):
    """Map non-finite floats to None so reports stay strict JSON."""
    if isinstance(value, dict):
        return {k: _json_clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_clean(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _refuse_existing(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise ConfigError(f"{path} already exists; pass --overwrite to replace it")


def _write_config_echo(out: Path, cfg: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg))


# --- subcommands -------------------------------------------------------------

def cmd_train_de(cfg: ExperimentConfig, overwrite: bool = False) -> Path:
    validate_config(cfg)
    out = resolve_out(cfg)
    ensemble_dir = out / "ensemble"
    _refuse_existing(ensemble_dir, overwrite)

    train, test = load_split(cfg)
    spec = network_spec_from(cfg, train.p)
    adam = AdamConfig(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                      epochs=cfg.epochs)
    rng = RngStream(cfg.seed).substream("ensemble")
    result = train_ensemble(spec, train, cfg.members, adam, rng)

    _write_config_echo(out, cfg)
    ensemble_dir.mkdir(parents=True, exist_ok=True)
    for m, member in enumerate(result.members):
        runio.write_member(ensemble_dir, m, member.values)
    lm = baselines.lm_fit_eval(train, test)
    ens = baselines.dnn_eval(spec, result.members, test)
    runio.write_json(ensemble_dir / "ensemble.json", {
        "n_members": result.size,
        "d": layout_for(spec).size,
        "hidden": list(spec.hidden_widths),
        "activation": spec.activation,
        "final_nll": [runio.fmt(t[-1]) for t in result.nll_traces],
    })
    runio.write_json(ensemble_dir / "metrics.json", {
        "lm": {"rmse": lm.rmse, "lppd": lm.lppd},
        "dnn": {"rmse": ens.dnn_rmse, "lppd": ens.dnn_lppd},
        "de": {"rmse": ens.de_rmse, "lppd": ens.de_lppd},
        "members": {"rmse": ens.member_rmse.tolist(), "lppd": ens.member_lppd.tolist()},
    })
    return out


def cmd_sample(cfg: ExperimentConfig, overwrite: bool = False) -> Path:
    validate_config(cfg)
    out = resolve_out(cfg)
    chains_dir = out / "chains"
    _refuse_existing(chains_dir, overwrite)

    if cfg.init == "warm_start":
        ensemble_dir = out / "ensemble"
        if not ensemble_dir.is_dir() or not runio.list_member_ids(ensemble_dir):
            raise ConfigError(
                f"init=warm_start needs trained member checkpoints in {ensemble_dir} "
                "(run train-de first)"
            )

    train, test = load_split(cfg)
    spec = network_spec_from(cfg, train.p)
    prior = prior_from(cfg)
    sampler_cfg = sampler_config_from(cfg)

    if cfg.init == "warm_start":
        member_ids = runio.list_member_ids(out / "ensemble")
        members = [runio.read_member(out / "ensemble", m) for m in member_ids]
        init = [InitStrategy.warm(members[k % len(members)]) for k in range(cfg.chains)]
    else:
        init = InitStrategy(cfg.init)

    monitor_factory = None
    if cfg.epsilon > 0.0:
        monitor_factory = EarlyStopMonitorFactory(spec, test.X, test.y,
                                                  cfg.epsilon, cfg.window)

    _write_config_echo(out, cfg)
    chains_dir.mkdir(parents=True, exist_ok=True)
    d = layout_for(spec).size
    rng = RngStream(cfg.seed)
    try:
        chainset = run_chainset(spec, prior, train, sampler_cfg, init, cfg.samples,
                                cfg.chains, rng, jobs=cfg.jobs,
                                monitor_factory=monitor_factory)
    except AllChainsFailedError as err:
        for chain in getattr(err, "chainset", ChainSet()).chains:
            runio.write_chain(chains_dir, chain, d)
        raise
    for chain in chainset.chains:
        runio.write_chain(chains_dir, chain, d)
    runio.write_json(chains_dir / "sampling.json", {
        "d": d,
        "n_chains": cfg.chains,
        "n_failed": len(chainset.failed()),
        "samples": cfg.samples,
        "sampler": cfg.sampler,
        "init": cfg.init,
        "seed": cfg.seed,
    })
    return out


def _load_run(run_dir: Path):
    cfg = ExperimentConfig(**parse_config_text((run_dir / "config.txt").read_text()))
    chains_dir = run_dir / "chains"
    if not chains_dir.is_dir():
        raise ConfigError(f"no chain dumps under {chains_dir}")
    chains = []
    for cid in runio.list_chain_ids(chains_dir):
        samples, meta = runio.read_chain(chains_dir, cid)
        chains.append(Chain(
            samples=samples, chain_id=cid, init_kind=meta["init"],
            seed=(meta["seed"]["master_seed"], meta["seed"]["stream_id"]),
            failed=meta["failed"], error=meta.get("error", ""),
            stop_index=meta.get("stop_index"),
        ))
    if not chains:
        raise ConfigError(f"no chains found under {chains_dir}")
    return cfg, ChainSet(chains=chains)


def cmd_diagnose(run_dir, overwrite: bool = False) -> Path:
    run_dir = Path(run_dir)
    if not (run_dir / "config.txt").is_file():
        raise ConfigError(f"{run_dir} has no config.txt; run sample first")
    diag_dir = run_dir / "diagnostics"
    _refuse_existing(diag_dir, overwrite)

    cfg, chainset = _load_run(run_dir)
    validate_config(cfg)
    train, test = load_split(cfg)
    spec = network_spec_from(cfg, train.p)
    layout = layout_for(spec)
    rng = RngStream(cfg.seed).substream("diagnose")

    lm = baselines.lm_fit_eval(train, test)
    retained, filt = diagnostics.filter_chains(spec, chainset, test, lm.rmse)
    successful = chainset.successful()
    report: dict = {
        "n_chains": len(chainset.chains),
        "n_failed": len(chainset.failed()),
        "d": layout.size,
        "lm": {"rmse": lm.rmse, "lppd": lm.lppd},
        "filter": {
            "proportion_retained": filt.proportion_retained,
            "retained_ids": filt.retained_ids,
            "dropped_ids": filt.dropped_ids,
            "failed_ids": filt.failed_ids,
            "rmse_per_chain": {str(k): v for k, v in sorted(filt.rmse_per_chain.items())},
            "empty": filt.empty,
        },
        "settings": {"kappa": cfg.kappa, "split_kappa": cfg.split_kappa,
                     "rank_normalize": cfg.rank_normalize},
    }

    diag_dir.mkdir(parents=True, exist_ok=True)

    # chain-wise traces are emitted for every successful chain, filtered or not
    lppd_rows, trace_rows = [], []
    for chain in successful:
        mix = diagnostics.predictive_mixture(spec, [chain.samples], test.X,
                                             chain_ids=[chain.chain_id])
        for s, value in enumerate(diagnostics.cumulative_lppd(mix, test.y)):
            lppd_rows.append([chain.chain_id, s, value])
        lpl = diagnostics.lpl_per_sample(spec, chain.samples, test)
        rmse = diagnostics.rmse_per_sample(spec, chain.samples, test)
        for s in range(chain.n_samples):
            trace_rows.append([chain.chain_id, s, lpl[s], rmse[s]])
    runio.write_table_csv(diag_dir / "cumulative_lppd.csv",
                          ["chain", "sample_index", "lppd"], lppd_rows)
    runio.write_table_csv(diag_dir / "functional_traces.csv",
                          ["chain", "sample_index", "lpl", "rmse"], trace_rows)

    use = retained.successful() or successful
    arrays = [c.samples for c in use]
    ids = [c.chain_id for c in use]
    min_s = min(a.shape[0] for a in arrays)
    # early-stopped chains may be shorter; cross-chain measures use the
    # common prefix
    trimmed = [a[:min_s] for a in arrays]
    stack = np.asarray(trimmed)
    report["between_chain_available"] = len(use) >= 2 and min_s >= 2 * cfg.split_kappa

    mixture = diagnostics.predictive_mixture(spec, arrays, test.X, chain_ids=ids)
    report["bnn"] = {"rmse": mixture.rmse(test.y), "lppd": diagnostics.lppd(mixture, test.y)}
    report["lppd_truncated"] = {
        str(t): diagnostics.lppd(mixture.truncated(t), test.y) for t in cfg.truncations
    }
    cov = diagnostics.coverage(mixture, test.y, cfg.coverage_levels, rng)
    report["coverage"] = {runio.fmt_short(k): v for k, v in sorted(cov.levels.items())}
    report["coverage_few_components"] = cov.few_components
    runio.write_table_csv(diag_dir / "coverage.csv", ["level", "empirical"],
                          [[runio.fmt_short(k), v] for k, v in sorted(cov.levels.items())])

    layer_idx, is_bias = layout.coordinate_layers()
    rhat_rows = []
    if report["between_chain_available"]:
        values, degenerate = diagnostics.rhat_matrix(stack, kappa=cfg.split_kappa,
                                                     rank_normalize=cfg.rank_normalize)
    else:
        values = np.full(layout.size, np.nan)
        degenerate = np.ones(layout.size, dtype=bool)
    crhat_per_chain = np.full((len(use), layout.size), np.nan)
    for i, chain in enumerate(use):
        if chain.samples.shape[0] >= 4 * cfg.kappa:
            crhat_per_chain[i], _ = diagnostics.rhat_matrix(
                chain.samples[None, :, :], kappa=cfg.kappa,
                rank_normalize=cfg.rank_normalize)
    for layer in range(1, layout.n_layers + 1):
        for role, mask_role in (("weight", ~is_bias), ("bias", is_bias)):
            mask = (layer_idx == layer) & mask_role
            if not mask.any():
                continue
            v = values[mask]
            c = crhat_per_chain[:, mask].ravel()
            rhat_rows.append([
                layer, role,
                float(np.nanmean(v)) if np.any(np.isfinite(v)) else math.nan,
                float(np.nanstd(v)) if np.any(np.isfinite(v)) else math.nan,
                int(np.sum(degenerate[mask])),
                float(np.nanmean(c)) if np.any(np.isfinite(c)) else math.nan,
                float(np.nanstd(c)) if np.any(np.isfinite(c)) else math.nan,
                int(mask.sum()),
            ])
    runio.write_table_csv(
        diag_dir / "rhat_layers.csv",
        ["layer", "role", "rhat_mean", "rhat_sd", "rhat_degenerate",
         "crhat_mean", "crhat_sd", "n_params"], rhat_rows)
    report["rhat_layers"] = [
        {"layer": r[0], "role": r[1], "rhat_mean": r[2], "rhat_sd": r[3],
         "n_degenerate": r[4], "crhat_mean": r[5], "crhat_sd": r[6], "n_params": r[7]}
        for r in rhat_rows
    ]

    ess_total = np.zeros(layout.size)
    for j in range(layout.size):
        total = 0.0
        for chain in use:
            try:
                total += diagnostics.ess(chain.samples[:, j]).ess
            except DegenerateSequenceError:
                total += 0.0
        ess_total[j] = min(total, min_s * len(use))
    qs = [0.05, 0.25, 0.5, 0.75, 0.95]
    report["ess"] = {f"q{int(q * 100):02d}": float(np.quantile(ess_total, q)) for q in qs}
    report["ess"]["cap"] = min_s * len(use)

    if report["between_chain_available"]:
        var_rows = [
            [r.layer, r.role, r.values["between_mean"], r.values["between_sd"],
             r.values["within_mean"], r.values["within_sd"], r.values["n_params"],
             r.values["n_degenerate"]]
            for r in diagnostics.layer_variance(stack, layout)
        ]
        runio.write_table_csv(
            diag_dir / "layer_variance.csv",
            ["layer", "role", "between_mean", "between_sd", "within_mean",
             "within_sd", "n_params", "n_degenerate"], var_rows)
        report["layer_variance"] = [
            {"layer": r[0], "role": r[1], "between_mean": r[2], "within_mean": r[4]}
            for r in var_rows
        ]

    slope_rows = [
        [r.layer, r.role, r.values["median"], r.values["mean"]]
        for r in diagnostics.chain_slopes(stack, layout)
    ] if min_s >= 10 else []
    runio.write_table_csv(diag_dir / "chain_slopes.csv",
                          ["layer", "role", "median_abs_slope", "mean_abs_slope"],
                          slope_rows)

    pca_rows = []
    for chain in use:
        if chain.samples.shape[0] >= 4:
            try:
                ratios, loadings = diagnostics.pca_path(chain.samples, layout, k=3)
            except DegenerateSequenceError:
                continue
            for layer, loading in sorted(loadings.items()):
                pca_rows.append([chain.chain_id, layer, loading,
                                 float(ratios.sum())])
    runio.write_table_csv(diag_dir / "pca_loadings.csv",
                          ["chain", "layer", "mean_abs_loading", "explained_top3"],
                          pca_rows)

    report["functional"] = {}
    if report["between_chain_available"]:
        for kind in ("lpl", "rmse"):
            try:
                value = diagnostics.functional_rhat(
                    spec, trimmed, diagnostics.Functional(kind), kappa=cfg.split_kappa,
                    rank_normalize=cfg.rank_normalize, test=test)
                report["functional"][f"{kind}_rhat"] = value
            except DegenerateSequenceError:
                report["functional"][f"{kind}_rhat"] = None
                report["functional"][f"{kind}_degenerate"] = True
        psc = diagnostics.functional_rhat(
            spec, trimmed, diagnostics.Functional("psc"), kappa=cfg.split_kappa,
            rank_normalize=cfg.rank_normalize, test=test, rng=rng, chain_ids=ids)
        finite = psc.values[~psc.degenerate]
        report["functional"]["psc_rhat_mean"] = (
            float(finite.mean()) if finite.size else None)
        report["functional"]["psc_rhat_frac_above_1.1"] = (
            float(np.mean(finite > 1.1)) if finite.size else None)
        runio.write_table_csv(diag_dir / "psc_rhat.csv", ["test_index", "rhat"],
                              [[i, v] for i, v in enumerate(psc.values)])

    runio.write_json(diag_dir / "report.json", _json_clean(report))
    return diag_dir


def _run_metrics(run_dir: Path):
    cfg, chainset = _load_run(run_dir)
    validate_config(cfg)
    train, test = load_split(cfg)
    spec = network_spec_from(cfg, train.p)
    lm = baselines.lm_fit_eval(train, test)
    retained, filt = diagnostics.filter_chains(spec, chainset, test, lm.rmse)
    use = retained.successful() or chainset.successful()
    row = {
        "dataset": Path(cfg.dataset).stem,
        "lm_rmse": lm.rmse, "lm_lppd": lm.lppd,
        "retained_proportion": filt.proportion_retained,
    }
    if use:
        mixture = diagnostics.predictive_mixture(
            spec, [c.samples for c in use], test.X, chain_ids=[c.chain_id for c in use])
        for t in cfg.truncations:
            sub = mixture.truncated(t)
            row[f"ours_rmse_{t}"] = sub.rmse(test.y)
            row[f"ours_lppd_{t}"] = diagnostics.lppd(sub, test.y)
    metrics_path = run_dir / "ensemble" / "metrics.json"
    if metrics_path.is_file():
        metrics = runio.read_json(metrics_path)
        for model in ("dnn", "de"):
            row[f"{model}_rmse"] = metrics[model]["rmse"]
            row[f"{model}_lppd"] = metrics[model]["lppd"]
    return cfg, row


def cmd_report(run_dirs, group_by: str = "dataset,sampler,init,activation",
               out_file=None) -> list[list]:
    keys = [k.strip() for k in group_by.split(",") if k.strip()]
    groups: dict[tuple, list[dict]] = {}
    for run_dir in run_dirs:
        cfg, row = _run_metrics(Path(run_dir))
        parts = []
        for key in keys:
            if key == "dataset":
                parts.append(row["dataset"])
            elif hasattr(cfg, key):
                parts.append(str(getattr(cfg, key)))
            else:
                raise ConfigError(f"unknown group-by key {key!r}")
        groups.setdefault(tuple(parts), []).append(row)

    metric_names = sorted({k for rows in groups.values() for row in rows
                           for k in row if k != "dataset"})
    header = ["group", "n_runs"]
    for name in metric_names:
        header += [f"{name}_mean", f"{name}_sd"]
    out_rows = []
    for group in sorted(groups):
        rows = groups[group]
        line: list = ["/".join(group), len(rows)]
        for name in metric_names:
            vals = [r[name] for r in rows if name in r]
            if vals:
                line += [float(np.mean(vals)), float(np.std(vals))]
            else:
                line += ["", ""]
        out_rows.append(line)
    if out_file is not None:
        runio.write_table_csv(out_file, header, out_rows)
    return [header] + out_rows


def cmd_grid_111(activation: str, taus, x: float, y: float, grid_range: float,
                 resolution: int, out_file, ml_tol: float = 0.01) -> None:
    if resolution < 2 or resolution > 2000:
        raise ConfigError("resolution must lie in [2, 2000]")
    if not taus:
        raise ConfigError("need at least one tau")
    from .data import Dataset

    spec = NetworkSpec(input_dim=1, hidden_widths=(1,), activation=activation,
                       head=HEAD_FIXED, fixed_sigma=1.0, biases=False)
    data = Dataset(X=np.array([[x]]), y=np.array([y]))
    axis = np.linspace(-grid_range, grid_range, resolution)
    rows = []
    for tau in taus:
        prior = DensityParams(GAUSSIAN, 0.0, float(tau))
        for w1 in axis:
            mus, _ = forward_batch(spec, np.array([w1, 1.0]), data.X)
            h = mus[0]  # activation output at w1 * x, since the head weight is 1
            for w2 in axis:
                theta = np.array([w1, w2])
                lp = log_posterior_unnorm(spec, theta, data, prior)
                mu = h * w2
                rows.append([activation, runio.fmt_short(float(tau)), w1, w2, lp, mu,
                             int(abs(mu - y) <= ml_tol)])
    runio.write_table_csv(out_file, ["activation", "tau", "w1", "w2", "log_post",
                                     "mu", "ml_set"], rows)


# --- entry point -------------------------------------------------------------

def _add_common(parser):
    parser.add_argument("--config", default=None, help="flat key = value config file")
    parser.add_argument("-o", "--override", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--overwrite", action="store_true",
                        help="replace existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnnkit",
                                     description="BNN sampling experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train-de", "sample"):
        p = sub.add_parser(name)
        _add_common(p)

    p = sub.add_parser("diagnose")
    p.add_argument("run_dir", help="run directory containing chains/")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("report")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--group-by", default="dataset,sampler,init,activation")
    p.add_argument("--out", default=None, help="also write the table to this CSV")

    p = sub.add_parser("grid-111")
    p.add_argument("--activation", default="tanh", choices=list(ACTIVATIONS))
    p.add_argument("--tau", action="append", type=float, default=None,
                   help="prior scale; repeatable")
    p.add_argument("--x", type=float, default=1.0)
    p.add_argument("--y", type=float, default=0.5, help="observed target at x")
    p.add_argument("--range", dest="grid_range", type=float, default=3.0)
    p.add_argument("--resolution", type=int, default=101)
    p.add_argument("--ml-tol", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("train-de", "sample"):
            cfg = load_config(args.config, args.override)
            if args.command == "train-de":
                out = cmd_train_de(cfg, overwrite=args.overwrite)
            else:
                out = cmd_sample(cfg, overwrite=args.overwrite)
            print(out)
        elif args.command == "diagnose":
            print(cmd_diagnose(args.run_dir, overwrite=args.overwrite))
        elif args.command == "report":
            table = cmd_report(args.run_dirs, group_by=args.group_by,
                               out_file=args.out)
            for row in table:
                print(",".join(str(v) for v in row))
        elif args.command == "grid-111":
            out_path = Path(args.out)
            _refuse_existing(out_path, args.overwrite)
            taus = args.tau if args.tau else [1.0]
            cmd_grid_111(args.activation, taus, args.x, args.y, args.grid_range,
                         args.resolution, out_path, ml_tol=args.ml_tol)
            print(out_path)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except BnnkitError as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
