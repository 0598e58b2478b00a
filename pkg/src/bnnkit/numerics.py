"""Deterministic numerical primitives shared by every other module.

Everything here is pure; randomness only enters through explicit RngStream
handles so that chains, ensemble members and splits are reproducible from
(master_seed, stream_id) alone.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSequenceError, SingularMatrixError

_MASK64 = (1 << 64) - 1

GAUSSIAN = "gaussian"
LAPLACE = "laplace"

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng stream tags must be int or str, got {type(tag).__name__}")


def mix_seed(base: int, *tags) -> int:
    """Deterministically derive a 64-bit stream id from a base id and tags."""
    state = base & _MASK64
    for tag in tags:
        state = _splitmix64(state ^ _tag_to_int(tag))
    return state


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream addressed by (master_seed, stream_id).

    Uses Philox, so distinct stream ids give statistically independent
    streams and the sequence never depends on scheduling or thread count.
    A stream instance is single-owner: create substreams instead of sharing.
    """

    master_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array(
            [self.master_seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64
        )
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, *tags) -> "RngStream":
        return RngStream(self.master_seed, mix_seed(self.stream_id, *tags))


@dataclass(frozen=True)
class DensityParams:
    """Location-scale family for priors and predictive components."""

    family: str
    location: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.family not in (GAUSSIAN, LAPLACE):
            raise ValueError(f"unknown density family: {self.family!r}")
        if not (self.scale > 0.0) or not math.isfinite(self.scale):
            raise ValueError(f"scale must be strictly positive, got {self.scale}")


def log_density(params: DensityParams, x):
    """Log density of a Gaussian or Laplace at x (scalar or array)."""
    z = (np.asarray(x, dtype=float) - params.location) / params.scale
    if params.family == GAUSSIAN:
        out = -_LOG_SQRT_2PI - math.log(params.scale) - 0.5 * z * z
    else:
        out = -math.log(2.0 * params.scale) - np.abs(z)
    return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out


def gaussian_log_pdf(x, mean, sd):
    z = (x - mean) / sd
    return -_LOG_SQRT_2PI - np.log(sd) - 0.5 * z * z


# Acklam's rational approximation for the inverse standard normal CDF,
# polished below with Halley steps on the erfc-based CDF.
_ACKLAM_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACKLAM_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
             6.680131188771972e+01, -1.328068155288572e+01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
             3.754408661907416e+00)


def _acklam_start(p: float) -> float:
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    if p > 1.0 - p_low:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)


def _std_normal_cdf(x: float) -> float:
    # erfc keeps full relative accuracy in the relevant tail.
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _quantile_lower(p: float) -> float:
    # p <= 0.5, where the erfc-based CDF keeps full relative precision
    x = _acklam_start(p)
    for _ in range(3):
        err = _std_normal_cdf(x) - p
        if err == 0.0:
            break
        pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if pdf <= 0.0:
            break
        u = err / pdf
        x -= u / (1.0 + 0.5 * x * u)
    return x


def _quantile_scalar(p: float) -> float:
    if not (0.0 < p < 1.0):
        raise ValueError(f"quantile argument must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        # 1 - p is exact here, and the lower tail is the numerically safe one
        return -_quantile_lower(1.0 - p)
    return _quantile_lower(p)


def std_normal_quantile(p):
    """Inverse standard-normal CDF, accurate to well below 1e-7 on (0, 1).

    Accepts a scalar or an ndarray; array evaluation goes through the unique
    values so rank vectors (mostly repeated grids) stay cheap.
    """
    if np.isscalar(p) or np.ndim(p) == 0:
        return _quantile_scalar(float(p))
    arr = np.asarray(p, dtype=float)
    uniq, inverse = np.unique(arr, return_inverse=True)
    out = np.array([_quantile_scalar(v) for v in uniq])
    return out[inverse].reshape(arr.shape)


def ols_fit(x: np.ndarray, y: np.ndarray):
    """Least squares with intercept via normal equations.

    Returns (coefficients, residual_sd) where coefficients[0] is the
    intercept and residual_sd is the maximum-likelihood estimate. A single
    1e-10 diagonal jitter retry precedes the singularity error.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = x.shape
    if n != y.size:
        raise ValueError(f"design has {n} rows but target has {y.size}")
    if n <= p + 1:
        raise ValueError(f"need more than {p + 1} observations, got {n}")
    design = np.column_stack([np.ones(n), x])
    gram = design.T @ design
    rhs = design.T @ y
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        # jitter covers borderline conditioning, not genuine rank deficiency
        if np.linalg.matrix_rank(design) < p + 1:
            raise SingularMatrixError(
                f"design with {p + 1} columns (intercept included) is rank deficient"
            ) from None
        try:
            chol = np.linalg.cholesky(gram + 1e-10 * np.eye(p + 1))
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                f"design with {p + 1} columns (intercept included) is rank deficient"
            ) from None
    coef = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    resid = y - design @ coef
    residual_sd = float(np.sqrt(np.mean(resid**2)))
    return coef, residual_sd


def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Autocorrelations rho_0..rho_max_lag with biased (total-variance) normalization."""
    x = np.asarray(x, dtype=float).ravel()
    s = x.size
    if s < 4:
        raise ValueError(f"need at least 4 values, got {s}")
    if not (0 <= max_lag < s):
        raise ValueError(f"max_lag must lie in [0, {s - 1}], got {max_lag}")
    if np.all(x == x[0]):
        raise DegenerateSequenceError("zero-variance sequence: autocorrelation undefined")
    centered = x - x.mean()
    denom = float(centered @ centered)
    if denom <= 0.0:
        raise DegenerateSequenceError("zero-variance sequence: autocorrelation undefined")
    rho = np.empty(max_lag + 1)
    rho[0] = 1.0
    for t in range(1, max_lag + 1):
        rho[t] = float(centered[:-t] @ centered[t:]) / denom
    return rho


def pca_top_k(samples: np.ndarray, k: int):
    """Top-k principal components by power iteration with deflation.

    Returns (components, explained_variance_ratio, scores): components is
    k x d orthonormal, ratios are non-increasing fractions of total variance,
    scores are the centered projections (S x k).
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    s, d = samples.shape
    if s < 2:
        raise ValueError(f"need at least 2 samples, got {s}")
    if not (1 <= k <= min(s - 1, d)):
        raise ValueError(f"k must lie in [1, {min(s - 1, d)}], got {k}")
    centered = samples - samples.mean(axis=0)
    cov = centered.T @ centered / s
    total = float(np.trace(cov))
    if total <= 0.0:
        raise DegenerateSequenceError("constant samples: principal components undefined")

    components = np.zeros((k, d))
    variances = np.zeros(k)
    work = cov.copy()
    for j in range(k):
        v = work[:, int(np.argmax(np.diag(work)))].copy()
        if np.linalg.norm(v) == 0.0:
            v = np.ones(d)
        v /= np.linalg.norm(v)
        for _ in range(5000):
            w = work @ v
            # keep iterates orthogonal to already-extracted components
            for i in range(j):
                w -= (components[i] @ w) * components[i]
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w /= norm
            if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < 1e-12:
                v = w
                break
            v = w
        components[j] = v
        variances[j] = float(v @ cov @ v)
        work = work - variances[j] * np.outer(v, v)

    ratios = np.clip(variances / total, 0.0, 1.0)
    scores = centered @ components.T
    return components, ratios, scores
