"""Convergence and predictive-quality diagnostics over sets of chains.

Parameter-space measures (split R-hat, per-chain R-hat, ESS, layerwise
variance decompositions, slopes, path PCA) treat chains as raw coordinate
streams. Function-space measures map each stored sample through a functional
(per-point predictive draw, test log-likelihood, test RMSE) first. Constant
streams raise DegenerateSequenceError instead of producing inf/NaN so dying
chains stay visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import DegenerateSequenceError, InsufficientHistoryError
from .network import NetworkSpec, ParameterLayout, forward_batch
from .numerics import RngStream, gaussian_log_pdf, std_normal_quantile

FUNCTIONAL_KINDS = ("identity", "psc", "lpl", "rmse")


@dataclass(frozen=True)
class Functional:
    """Map from a parameter sample to the scalar(s) a diagnostic runs on."""

    kind: str
    test_index: int | None = None

    def __post_init__(self):
        if self.kind not in FUNCTIONAL_KINDS:
            raise ValueError(f"unknown functional kind {self.kind!r}")


@dataclass
class RhatComponents:
    between: float
    within: float
    chain_means: np.ndarray
    chain_variances: np.ndarray
    grand_mean: float
    n_samples: int
    n_chains: int


@dataclass
class EssResult:
    ess: float
    truncation_lag: int
    rho: np.ndarray


@dataclass
class PredictiveMixture:
    """Per test point, the Gaussian components induced by retained samples."""

    mus: np.ndarray       # (n_components, n_test)
    sigmas: np.ndarray    # (n_components, n_test)
    chain_ids: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        if np.any(self.sigmas <= 0.0):
            raise ValueError("mixture components need strictly positive sigmas")

    @property
    def n_components(self) -> int:
        return self.mus.shape[0]

    @property
    def n_test(self) -> int:
        return self.mus.shape[1]

    def point_predictions(self) -> np.ndarray:
        return self.mus.mean(axis=0)

    def rmse(self, labels: np.ndarray) -> float:
        return float(np.sqrt(np.mean((np.asarray(labels) - self.point_predictions()) ** 2)))

    def for_chain(self, chain_id: int) -> "PredictiveMixture":
        keep = self.chain_ids == chain_id
        return PredictiveMixture(self.mus[keep], self.sigmas[keep],
                                 self.chain_ids[keep], self.sample_ids[keep])

    def truncated(self, max_samples_per_chain: int) -> "PredictiveMixture":
        keep = self.sample_ids < max_samples_per_chain
        return PredictiveMixture(self.mus[keep], self.sigmas[keep],
                                 self.chain_ids[keep], self.sample_ids[keep])


def predictive_mixture(spec: NetworkSpec, chain_samples, X: np.ndarray,
                       chain_ids=None) -> PredictiveMixture:
    """Assemble the sample-induced Gaussian components at every row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if chain_ids is None:
        chain_ids = list(range(len(chain_samples)))
    mus, sigmas, cids, sids = [], [], [], []
    for cid, samples in zip(chain_ids, chain_samples):
        for s_idx, theta in enumerate(np.atleast_2d(samples)):
            mu, log_var = forward_batch(spec, theta, X)
            mus.append(mu)
            sigmas.append(np.exp(0.5 * log_var))
            cids.append(cid)
            sids.append(s_idx)
    return PredictiveMixture(np.asarray(mus), np.asarray(sigmas),
                             np.asarray(cids, dtype=int), np.asarray(sids, dtype=int))


# --- R-hat family ------------------------------------------------------------

def _split_subchains(chains, kappa: int) -> np.ndarray:
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    arrays = [np.asarray(c, dtype=float).ravel() for c in chains]
    if not arrays:
        raise ValueError("need at least one chain")
    s_min = min(a.size for a in arrays)
    sub_len = s_min // kappa
    if sub_len < 2:
        raise ValueError(f"subchain length {sub_len} < 2 (chains too short for kappa={kappa})")
    rows = []
    for a in arrays:
        trimmed = a[: sub_len * kappa]  # drop up to kappa-1 trailing values
        rows.extend(trimmed.reshape(kappa, sub_len))
    return np.asarray(rows)


def _average_ranks(x: np.ndarray):
    order = np.argsort(x, kind="stable")
    sx = x[order]
    n = x.size
    boundaries = np.flatnonzero(sx[1:] != sx[:-1]) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks within a tie group
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks, bool(boundaries.size < n - 1)


_rank_table_cache: dict[int, np.ndarray] = {}


def _rank_quantile_table(n: int) -> np.ndarray:
    table = _rank_table_cache.get(n)
    if table is None:
        probs = (np.arange(1, n + 1) - 0.375) / (n + 0.25)
        table = std_normal_quantile(probs)
        if len(_rank_table_cache) > 16:
            _rank_table_cache.clear()
        _rank_table_cache[n] = table
    return table


def rank_normalize_pooled(values: np.ndarray) -> np.ndarray:
    """Fractional-rank normal scores, ranks pooled across all rows.

    Uses the (r - 3/8) / (N + 1/4) offset with average ranks for ties.
    """
    flat = np.asarray(values, dtype=float).ravel()
    ranks, has_ties = _average_ranks(flat)
    n = flat.size
    if not has_ties:
        z = _rank_quantile_table(n)[(ranks - 1.0).astype(int)]
    else:
        z = std_normal_quantile((ranks - 0.375) / (n + 0.25))
    return z.reshape(np.shape(values))


def _all_rows_constant(subchains: np.ndarray) -> bool:
    # float noise in mean subtraction makes var() of a constant row ~1e-32,
    # so degeneracy is detected on the values themselves
    return bool(np.all(subchains == subchains[:, :1]))


def rhat_components(subchains: np.ndarray) -> RhatComponents:
    subchains = np.asarray(subchains, dtype=float)
    k, s = subchains.shape
    if k < 2 or s < 2:
        raise ValueError("need at least 2 subchains of length >= 2")
    means = subchains.mean(axis=1)
    variances = subchains.var(axis=1, ddof=1)
    if _all_rows_constant(subchains):
        variances = np.zeros_like(variances)
    grand = float(means.mean())
    between = s / (k - 1) * float(np.sum((means - grand) ** 2))
    within = float(variances.mean())
    return RhatComponents(between, within, means, variances, grand, s, k)


def _rhat_value(comp: RhatComponents) -> float:
    if not (comp.within > 0.0) or not math.isfinite(comp.within):
        raise DegenerateSequenceError("within-chain variance is zero: chains are constant")
    s = comp.n_samples
    return math.sqrt(((s - 1) / s * comp.within + comp.between / s) / comp.within)


def rhat(chains, kappa: int = 2, rank_normalize: bool = True) -> float:
    """Split potential-scale-reduction over kappa subchains per chain."""
    subs = _split_subchains(chains, kappa)
    if rank_normalize:
        subs = rank_normalize_pooled(subs)
    return _rhat_value(rhat_components(subs))


def c_rhat(chain, kappa: int = 4, rank_normalize: bool = True) -> float:
    """Single-chain stationarity version: rhat over the chain's own kappa splits."""
    chain = np.asarray(chain, dtype=float).ravel()
    if chain.size < 4 * kappa:
        raise ValueError(f"chain length {chain.size} < 4*kappa = {4 * kappa}")
    return rhat([chain], kappa=kappa, rank_normalize=rank_normalize)


def rhat_matrix(chains: np.ndarray, kappa: int = 2, rank_normalize: bool = True):
    """Columnwise rhat over a (K, S, d) stack.

    Returns (values, degenerate): degenerate columns (zero within-chain
    variance) carry NaN and are flagged instead of raising.
    """
    chains = np.asarray(chains, dtype=float)
    k, s, d = chains.shape
    sub_len = s // kappa
    if sub_len < 2:
        raise ValueError(f"subchain length {sub_len} < 2")
    subs = chains[:, : sub_len * kappa, :].reshape(k * kappa, sub_len, d)
    if rank_normalize:
        transformed = np.empty_like(subs)
        for j in range(d):
            transformed[:, :, j] = rank_normalize_pooled(subs[:, :, j])
        subs = transformed
    means = subs.mean(axis=1)                     # (k*kappa, d)
    variances = subs.var(axis=1, ddof=1)
    within = variances.mean(axis=0)
    between = sub_len * means.var(axis=0, ddof=1)
    constant_cols = np.all(subs == subs[:, :1, :], axis=(0, 1))
    degenerate = constant_cols | ~(within > 0.0)
    values = np.full(d, np.nan)
    ok = ~degenerate
    values[ok] = np.sqrt(
        ((sub_len - 1) / sub_len * within[ok] + between[ok] / sub_len) / within[ok]
    )
    return values, degenerate


# --- effective sample size ---------------------------------------------------

def ess(values) -> EssResult:
    """ESS with the biased autocorrelation sum truncated by Geyer's
    initial-positive-pair rule, clamped to [1, S]."""
    x = np.asarray(values, dtype=float).ravel()
    s = x.size
    if s < 8:
        raise ValueError(f"need at least 8 values, got {s}")
    if np.all(x == x[0]):
        raise DegenerateSequenceError("zero-variance chain: ESS undefined")
    centered = x - x.mean()
    denom = float(centered @ centered)
    if denom <= 0.0:
        raise DegenerateSequenceError("zero-variance chain: ESS undefined")

    def rho_at(t: int) -> float:
        return float(centered[:-t] @ centered[t:]) / denom

    rho = [1.0]
    pair_sum = 0.0
    trunc = 0
    m = 0
    while 2 * m + 1 <= s - 2:
        even = rho[2 * m] if 2 * m < len(rho) else rho_at(2 * m)
        odd = rho_at(2 * m + 1)
        while len(rho) <= 2 * m + 1:
            rho.append(rho_at(len(rho)))
        gamma = even + odd
        if gamma <= 0.0:
            break
        pair_sum += gamma
        trunc = 2 * m + 1
        m += 1
    tau = 2.0 * pair_sum - 1.0
    value = s / tau if tau > 0.0 else float(s)
    value = float(min(max(value, 1.0), s))
    return EssResult(ess=value, truncation_lag=trunc, rho=np.asarray(rho))


# --- predictive density ------------------------------------------------------

def log_component_densities(mixture: PredictiveMixture, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=float)
    return gaussian_log_pdf(labels[None, :], mixture.mus, mixture.sigmas)


def _log_mean_exp(logs: np.ndarray, axis: int = 0) -> np.ndarray:
    m = np.max(logs, axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.mean(np.exp(logs - m), axis=axis))
    return out


def lppd(mixture: PredictiveMixture, labels: np.ndarray) -> float:
    """Mean over test points of the log of the sample-averaged density."""
    if mixture.n_components < 1:
        raise ValueError("mixture has no components")
    logdens = log_component_densities(mixture, labels)
    return float(np.mean(_log_mean_exp(logdens, axis=0)))


def cumulative_lppd(mixture: PredictiveMixture, labels: np.ndarray) -> np.ndarray:
    """Expanding-window LPPD over a single chain's components, one value per l.

    Computed with a running log-sum-exp per test point, so the final entry
    equals the batch value exactly.
    """
    logdens = log_component_densities(mixture, labels)
    acc = np.logaddexp.accumulate(logdens, axis=0)
    counts = np.log(np.arange(1, logdens.shape[0] + 1))[:, None]
    return np.mean(acc - counts, axis=1)


@dataclass
class ConvergenceMonitor:
    """Online expanding-window LPPD tracker for one chain."""

    epsilon: float
    window: int
    log_acc: np.ndarray | None = None
    count: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def update(self, log_densities: np.ndarray) -> float:
        log_densities = np.asarray(log_densities, dtype=float)
        if self.log_acc is None:
            self.log_acc = log_densities.copy()
        else:
            self.log_acc = np.logaddexp(self.log_acc, log_densities)
        self.count += 1
        value = float(np.mean(self.log_acc - math.log(self.count)))
        self.history.append(value)
        return value


CONVERGED = "converged"
RUNNING = "running"


def convergence_check(monitor: ConvergenceMonitor, l: int | None = None) -> str:
    """Converged iff the trailing-window mean of LPPD is within epsilon of LPPD_l."""
    if l is None:
        l = monitor.count
    if l > monitor.count:
        raise InsufficientHistoryError(f"only {monitor.count} samples consumed, asked for l={l}")
    if l <= monitor.window:
        raise InsufficientHistoryError(f"need l > window ({monitor.window}), got l={l}")
    current = monitor.history[l - 1]
    trailing = float(np.mean(monitor.history[l - 1 - monitor.window: l - 1]))
    return CONVERGED if abs(trailing - current) < monitor.epsilon else RUNNING


# --- coverage ----------------------------------------------------------------

@dataclass
class CoverageResult:
    levels: dict[float, float]
    n_components: int
    few_components: bool


def coverage(mixture: PredictiveMixture, labels: np.ndarray, levels,
             rng: RngStream) -> CoverageResult:
    """Empirical coverage of central predictive intervals.

    One y is drawn per mixture component (one per posterior sample); interval
    bounds are empirical quantiles of those draws.
    """
    levels = [float(v) for v in levels]
    if any(not (0.0 < v < 1.0) for v in levels):
        raise ValueError("levels must lie in (0, 1)")
    labels = np.asarray(labels, dtype=float)
    gen = rng.substream("coverage-draws").generator()
    draws = mixture.mus + mixture.sigmas * gen.standard_normal(mixture.mus.shape)
    out = {}
    for level in levels:
        lo, hi = np.quantile(draws, [(1.0 - level) / 2.0, (1.0 + level) / 2.0], axis=0)
        out[level] = float(np.mean((labels >= lo) & (labels <= hi)))
    return CoverageResult(levels=out, n_components=mixture.n_components,
                          few_components=mixture.n_components < 20)


# --- layerwise structure -----------------------------------------------------

@dataclass
class LayerStat:
    layer: int
    role: str
    values: dict


def _layer_groups(layout: ParameterLayout):
    layer_idx, is_bias = layout.coordinate_layers()
    groups = []
    for layer in range(1, layout.n_layers + 1):
        for role, mask_role in (("weight", ~is_bias), ("bias", is_bias)):
            mask = (layer_idx == layer) & mask_role
            if mask.any():
                groups.append((layer, role, mask))
    return groups


def layer_variance(chain_samples, layout: ParameterLayout) -> list[LayerStat]:
    """Between-/within-chain variance per coordinate, aggregated per layer and role."""
    arr = np.asarray(chain_samples, dtype=float)
    if arr.ndim != 3 or arr.shape[0] < 2:
        raise ValueError("need a (K>=2, S, d) stack of chains")
    s = arr.shape[1]
    means = arr.mean(axis=1)
    variances = arr.var(axis=1, ddof=1)
    within = variances.mean(axis=0)
    between = s * means.var(axis=0, ddof=1)
    constant = np.all(arr == arr[:, :1, :], axis=(0, 1))
    rows = []
    for layer, role, mask in _layer_groups(layout):
        rows.append(LayerStat(layer, role, {
            "between_mean": float(between[mask].mean()),
            "between_sd": float(between[mask].std()),
            "within_mean": float(within[mask].mean()),
            "within_sd": float(within[mask].std()),
            "n_params": int(mask.sum()),
            "n_degenerate": int(np.sum(constant[mask] | ~(within[mask] > 0.0))),
        }))
    return rows


def chain_slopes(chain_samples, layout: ParameterLayout) -> list[LayerStat]:
    """|OLS slope| of each coordinate against [0, 1]-normalized sample index."""
    arr = np.asarray(chain_samples, dtype=float)
    if arr.ndim != 3:
        raise ValueError("need a (K, S, d) stack of chains")
    k, s, _ = arr.shape
    if s < 10:
        raise ValueError(f"need at least 10 samples per chain, got {s}")
    t = np.linspace(0.0, 1.0, s)
    tc = t - t.mean()
    denom = float(tc @ tc)
    slopes = np.abs(np.einsum("s,ksd->kd", tc, arr - arr.mean(axis=1, keepdims=True)) / denom)
    rows = []
    for layer, role, mask in _layer_groups(layout):
        pooled = slopes[:, mask].ravel()
        rows.append(LayerStat(layer, role, {
            "abs_slopes": pooled,
            "median": float(np.median(pooled)),
            "mean": float(pooled.mean()),
        }))
    return rows


def pca_path(samples: np.ndarray, layout: ParameterLayout, k: int = 3):
    """Top-k path PCA of one chain plus per-layer mean absolute loadings."""
    from .numerics import pca_top_k

    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < k + 1:
        raise ValueError(f"need at least {k + 1} samples for k={k}")
    components, ratios, _ = pca_top_k(samples, k)
    per_coord = np.abs(components).sum(axis=0)
    layer_idx, _ = layout.coordinate_layers()
    loadings = {}
    for layer in range(1, layout.n_layers + 1):
        mask = layer_idx == layer
        loadings[layer] = float(per_coord[mask].mean())
    return ratios, loadings


# --- functional diagnostics --------------------------------------------------

@dataclass
class FunctionalRhatResult:
    values: np.ndarray
    degenerate: np.ndarray


def lpl_per_sample(spec: NetworkSpec, samples: np.ndarray, test: Dataset) -> np.ndarray:
    """log mean test-point density per stored sample (one scalar per sample)."""
    out = np.empty(samples.shape[0])
    for i, theta in enumerate(np.atleast_2d(samples)):
        mu, log_var = forward_batch(spec, theta, test.X)
        logs = gaussian_log_pdf(test.y, mu, np.exp(0.5 * log_var))
        out[i] = float(_log_mean_exp(logs[:, None], axis=0)[0])
    return out


def rmse_per_sample(spec: NetworkSpec, samples: np.ndarray, test: Dataset) -> np.ndarray:
    out = np.empty(samples.shape[0])
    for i, theta in enumerate(np.atleast_2d(samples)):
        mu, _ = forward_batch(spec, theta, test.X)
        out[i] = float(np.sqrt(np.mean((test.y - mu) ** 2)))
    return out


def psc_draws(spec: NetworkSpec, samples: np.ndarray, test: Dataset,
              rng: RngStream, chain_id: int) -> np.ndarray:
    """One predictive draw per (sample, test point), reproducibly keyed."""
    s = samples.shape[0]
    out = np.empty((s, test.n))
    for i, theta in enumerate(np.atleast_2d(samples)):
        mu, log_var = forward_batch(spec, theta, test.X)
        z = rng.substream("psc", chain_id, i).generator().standard_normal(test.n)
        out[i] = mu + np.exp(0.5 * log_var) * z
    return out


def functional_rhat(spec: NetworkSpec, chain_samples, functional: Functional,
                    kappa: int = 2, rank_normalize: bool = True,
                    test: Dataset | None = None, rng: RngStream | None = None,
                    chain_ids=None):
    """R-hat of a functional of the samples.

    identity -> FunctionalRhatResult per coordinate; psc -> per test point
    (or a scalar for a fixed test index); lpl/rmse -> scalar (raises
    DegenerateSequenceError when chains are functionally constant).
    """
    samples_list = [np.atleast_2d(np.asarray(c, dtype=float)) for c in chain_samples]
    if functional.kind == "identity":
        stack = np.asarray(samples_list)
        values, degenerate = rhat_matrix(stack, kappa=kappa, rank_normalize=rank_normalize)
        return FunctionalRhatResult(values, degenerate)
    if test is None:
        raise ValueError(f"functional {functional.kind!r} needs test data")
    if functional.kind == "lpl":
        series = [lpl_per_sample(spec, s, test) for s in samples_list]
        return rhat(series, kappa=kappa, rank_normalize=rank_normalize)
    if functional.kind == "rmse":
        series = [rmse_per_sample(spec, s, test) for s in samples_list]
        return rhat(series, kappa=kappa, rank_normalize=rank_normalize)
    # psc
    if rng is None:
        raise ValueError("psc functional needs an rng stream")
    if chain_ids is None:
        chain_ids = list(range(len(samples_list)))
    draws = np.asarray([
        psc_draws(spec, s, test, rng, cid) for cid, s in zip(chain_ids, samples_list)
    ])  # (K, S, n_test)
    values, degenerate = rhat_matrix(draws, kappa=kappa, rank_normalize=rank_normalize)
    if functional.test_index is not None:
        idx = functional.test_index
        if degenerate[idx]:
            raise DegenerateSequenceError(f"psc draws constant at test point {idx}")
        return float(values[idx])
    return FunctionalRhatResult(values, degenerate)


# --- chain filtering ---------------------------------------------------------

@dataclass
class FilterReport:
    retained_ids: list[int]
    dropped_ids: list[int]
    failed_ids: list[int]
    rmse_per_chain: dict[int, float]
    proportion_retained: float
    empty: bool


def filter_chains(spec: NetworkSpec, chainset, test: Dataset,
                  lm_baseline_rmse: float):
    """Drop chains whose own ensemble RMSE on the test set is worse than the LM's.

    Returns (retained chains container, report); an all-dropped outcome is a
    flagged report, never a silent empty result.
    """
    from .sampling import ChainSet

    rmses = {}
    retained, dropped, failed = [], [], []
    for chain in chainset.chains:
        if chain.failed or chain.samples.shape[0] == 0:
            failed.append(chain.chain_id)
            continue
        mix = predictive_mixture(spec, [chain.samples], test.X, chain_ids=[chain.chain_id])
        rmses[chain.chain_id] = mix.rmse(test.y)
        if rmses[chain.chain_id] <= lm_baseline_rmse:
            retained.append(chain)
        else:
            dropped.append(chain.chain_id)
    total = len(chainset.chains)
    report = FilterReport(
        retained_ids=[c.chain_id for c in retained],
        dropped_ids=dropped,
        failed_ids=failed,
        rmse_per_chain=rmses,
        proportion_retained=len(retained) / total if total else 0.0,
        empty=not retained,
    )
    return ChainSet(chains=retained), report
