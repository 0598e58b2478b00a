"""Fully-connected regression network with explicit parameter flattening.

The sampler's target lives here: unnormalized log posterior over a flat
parameter vector, with a hand-written reverse-mode gradient. Hidden-unit
symmetry transforms (permutation, sign flip, positive rescaling) are provided
as exact constructions for testing posterior invariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import Dataset
from .errors import LayoutError, UnsupportedTransformError
from .numerics import GAUSSIAN, LAPLACE, DensityParams, RngStream, log_density

LOG_VAR_MIN = -15.0
LOG_VAR_MAX = 15.0

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

ACTIVATIONS = ("tanh", "relu", "leaky_relu", "silu", "truncated_relu")
HOMOGENEOUS_ACTIVATIONS = ("relu", "leaky_relu")

HEAD_HETEROSCEDASTIC = "heteroscedastic"
HEAD_FIXED = "fixed"


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: input width, hidden widths, activation, output head.

    The default head emits (mu, log variance) per input; the "fixed" head
    emits mu only and uses a constant observation sd (the two-weight grid
    demo uses it).
    """

    input_dim: int
    hidden_widths: tuple[int, ...]
    activation: str = "tanh"
    head: str = HEAD_HETEROSCEDASTIC
    fixed_sigma: float = 1.0
    biases: bool = True
    leaky_slope: float = 0.01
    relu_cap: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("all hidden widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in (HEAD_HETEROSCEDASTIC, HEAD_FIXED):
            raise ValueError(f"unknown head {self.head!r}")
        if self.fixed_sigma <= 0.0:
            raise ValueError("fixed_sigma must be positive")

    @property
    def output_units(self) -> int:
        return 2 if self.head == HEAD_HETEROSCEDASTIC else 1

    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.output_units]


@dataclass(frozen=True)
class LayerSlice:
    weights: slice
    bias: slice | None
    n_in: int
    n_out: int


@dataclass(frozen=True)
class ParameterLayout:
    """Offsets of per-layer weight and bias blocks in the flat vector.

    Layer order first-to-last; within a layer the weight block (row-major,
    shape n_in x n_out) precedes the bias block.
    """

    layers: tuple[LayerSlice, ...]
    size: int

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def coordinate_layers(self) -> tuple[np.ndarray, np.ndarray]:
        """(layer index 1..L, is_bias) per coordinate, for layerwise diagnostics."""
        layer_idx = np.empty(self.size, dtype=int)
        is_bias = np.zeros(self.size, dtype=bool)
        for i, ls in enumerate(self.layers, start=1):
            layer_idx[ls.weights] = i
            if ls.bias is not None:
                layer_idx[ls.bias] = i
                is_bias[ls.bias] = True
        return layer_idx, is_bias


@lru_cache(maxsize=64)
def layout_for(spec: NetworkSpec) -> ParameterLayout:
    sizes = spec.layer_sizes()
    layers = []
    offset = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = slice(offset, offset + n_in * n_out)
        offset = w.stop
        b = None
        if spec.biases:
            b = slice(offset, offset + n_out)
            offset = b.stop
        layers.append(LayerSlice(weights=w, bias=b, n_in=n_in, n_out=n_out))
    return ParameterLayout(layers=tuple(layers), size=offset)


@dataclass
class ParameterVector:
    """Flat parameter vector plus the layout that slices it."""

    values: np.ndarray
    layout: ParameterLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.layout.size,):
            raise LayoutError(
                f"expected {self.layout.size} parameters, got shape {self.values.shape}"
            )

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "ParameterVector":
        lay = layout_for(spec)
        return cls(np.zeros(lay.size), lay)


def _values_of(theta, spec: NetworkSpec) -> np.ndarray:
    if isinstance(theta, ParameterVector):
        vals = theta.values
    else:
        vals = np.asarray(theta, dtype=float)
    expected = layout_for(spec).size
    if vals.shape != (expected,):
        raise LayoutError(f"parameter vector has shape {vals.shape}, expected ({expected},)")
    return vals


def unflatten(spec: NetworkSpec, theta) -> list[tuple[np.ndarray, np.ndarray | None]]:
    vals = _values_of(theta, spec)
    out = []
    for ls in layout_for(spec).layers:
        w = vals[ls.weights].reshape(ls.n_in, ls.n_out)
        b = vals[ls.bias] if ls.bias is not None else None
        out.append((w, b))
    return out


def _act(spec: NetworkSpec, z: np.ndarray) -> np.ndarray:
    a = spec.activation
    if a == "tanh":
        return np.tanh(z)
    if a == "relu":
        return np.maximum(z, 0.0)
    if a == "leaky_relu":
        return np.where(z > 0.0, z, spec.leaky_slope * z)
    if a == "silu":
        return z / (1.0 + np.exp(-z))
    return np.clip(z, 0.0, spec.relu_cap)


def _act_grad(spec: NetworkSpec, z: np.ndarray) -> np.ndarray:
    # kinks get the zero subgradient at exactly the kink for relu-family
    a = spec.activation
    if a == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if a == "relu":
        return (z > 0.0).astype(float)
    if a == "leaky_relu":
        return np.where(z > 0.0, 1.0, spec.leaky_slope)
    if a == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    return ((z > 0.0) & (z < spec.relu_cap)).astype(float)


def _forward_pass(spec: NetworkSpec, theta, X: np.ndarray, keep_trace: bool = False):
    params = unflatten(spec, theta)
    a = X
    pre, post = [], [X]
    for w, b in params[:-1]:
        z = a @ w
        if b is not None:
            z = z + b
        a = _act(spec, z)
        if keep_trace:
            pre.append(z)
            post.append(a)
    w, b = params[-1]
    out = a @ w
    if b is not None:
        out = out + b
    mu = out[:, 0]
    if spec.head == HEAD_HETEROSCEDASTIC:
        raw_lv = out[:, 1]
        log_var = np.clip(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX)
    else:
        raw_lv = None
        log_var = np.full_like(mu, 2.0 * math.log(spec.fixed_sigma))
    if keep_trace:
        return mu, log_var, raw_lv, params, pre, post
    return mu, log_var


def forward_batch(spec: NetworkSpec, theta, X: np.ndarray):
    """(mu, log_var) for every row of X; log_var is clamped to [-15, 15]."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != spec.input_dim:
        raise LayoutError(f"input has {X.shape[1]} features, layer 1 expects {spec.input_dim}")
    return _forward_pass(spec, theta, X)


def forward(spec: NetworkSpec, theta, x) -> tuple[float, float]:
    mu, log_var = forward_batch(spec, theta, np.atleast_2d(np.asarray(x, dtype=float)))
    return float(mu[0]), float(log_var[0])


def _pointwise_log_lik(y, mu, log_var):
    return -_LOG_SQRT_2PI - 0.5 * log_var - 0.5 * (y - mu) ** 2 * np.exp(-log_var)


def log_likelihood(spec: NetworkSpec, theta, data: Dataset) -> float:
    if data.n == 0:
        raise ValueError("dataset is empty")
    mu, log_var = forward_batch(spec, theta, data.X)
    return float(np.sum(_pointwise_log_lik(data.y, mu, log_var)))


def log_prior(theta, prior: DensityParams) -> float:
    vals = theta.values if isinstance(theta, ParameterVector) else np.asarray(theta, dtype=float)
    return float(np.sum(log_density(prior, vals)))


def log_posterior_unnorm(spec: NetworkSpec, theta, data: Dataset, prior: DensityParams) -> float:
    return log_likelihood(spec, theta, data) + log_prior(theta, prior)


def _backprop(spec: NetworkSpec, theta, X, delta_out, params, pre, post) -> np.ndarray:
    lay = layout_for(spec)
    grad = np.zeros(lay.size)
    delta = delta_out
    for idx in range(lay.n_layers - 1, -1, -1):
        ls = lay.layers[idx]
        w, _ = params[idx]
        a_prev = post[idx]
        grad[ls.weights] = (a_prev.T @ delta).ravel()
        if ls.bias is not None:
            grad[ls.bias] = delta.sum(axis=0)
        if idx > 0:
            delta = (delta @ w.T) * _act_grad(spec, pre[idx - 1])
    return grad


def grad_log_likelihood(spec: NetworkSpec, theta, data: Dataset) -> np.ndarray:
    _, grad = log_likelihood_and_grad(spec, theta, data)
    return grad


def log_likelihood_and_grad(spec: NetworkSpec, theta, data: Dataset):
    """Fused value+gradient; one forward pass, one backward pass."""
    X = np.atleast_2d(np.asarray(data.X, dtype=float))
    y = np.asarray(data.y, dtype=float)
    mu, log_var, raw_lv, params, pre, post = _forward_pass(spec, theta, X, keep_trace=True)
    value = float(np.sum(_pointwise_log_lik(y, mu, log_var)))

    inv_var = np.exp(-log_var)
    resid = y - mu
    d_mu = resid * inv_var
    if spec.head == HEAD_HETEROSCEDASTIC:
        d_lv = -0.5 + 0.5 * resid**2 * inv_var
        # the clamp passes no gradient outside its range
        d_lv = d_lv * ((raw_lv > LOG_VAR_MIN) & (raw_lv < LOG_VAR_MAX))
        delta_out = np.column_stack([d_mu, d_lv])
    else:
        delta_out = d_mu[:, None]
    return value, _backprop(spec, theta, X, delta_out, params, pre, post)


def grad_log_prior(theta, prior: DensityParams) -> np.ndarray:
    vals = theta.values if isinstance(theta, ParameterVector) else np.asarray(theta, dtype=float)
    centered = vals - prior.location
    if prior.family == GAUSSIAN:
        return -centered / prior.scale**2
    if prior.family == LAPLACE:
        return -np.sign(centered) / prior.scale
    raise ValueError(f"unknown prior family {prior.family!r}")


def grad_log_posterior(spec: NetworkSpec, theta, data: Dataset, prior: DensityParams) -> np.ndarray:
    _, grad = log_likelihood_and_grad(spec, theta, data)
    return grad + grad_log_prior(theta, prior)


def init_parameters(spec: NetworkSpec, rng: RngStream) -> np.ndarray:
    """Fan-in-scaled uniform weights, zero biases.

    Shared by optimizer initialization and cold-started chains so the two
    start from the same distribution.
    """
    layout = layout_for(spec)
    gen = rng.generator()
    values = np.zeros(layout.size)
    for ls in layout.layers:
        bound = 1.0 / math.sqrt(ls.n_in)
        values[ls.weights] = gen.uniform(-bound, bound, size=ls.n_in * ls.n_out)
    return values


def make_posterior_target(spec: NetworkSpec, data: Dataset, prior: DensityParams):
    """Closure theta -> (log posterior, gradient), the sampler's target."""
    def target(values: np.ndarray):
        lik, grad = log_likelihood_and_grad(spec, values, data)
        return lik + log_prior(values, prior), grad + grad_log_prior(values, prior)
    return target


# --- equioutput transforms -------------------------------------------------

def _hidden_layer_slices(spec: NetworkSpec, layer: int):
    lay = layout_for(spec)
    n_hidden = lay.n_layers - 1
    if not (0 <= layer < n_hidden):
        raise LayoutError(f"hidden layer index {layer} out of range [0, {n_hidden})")
    return lay, lay.layers[layer], lay.layers[layer + 1]


def permute_hidden(spec: NetworkSpec, theta, layer: int, perm) -> ParameterVector:
    """Reorder the units of a hidden layer; exactly equioutput by construction."""
    lay, ls, next_ls = _hidden_layer_slices(spec, layer)
    perm = np.asarray(perm, dtype=int)
    if sorted(perm.tolist()) != list(range(ls.n_out)):
        raise ValueError(f"perm must be a permutation of 0..{ls.n_out - 1}")
    vals = _values_of(theta, spec).copy()
    w = vals[ls.weights].reshape(ls.n_in, ls.n_out)
    vals[ls.weights] = w[:, perm].ravel()
    if ls.bias is not None:
        vals[ls.bias] = vals[ls.bias][perm]
    w_next = vals[next_ls.weights].reshape(next_ls.n_in, next_ls.n_out)
    vals[next_ls.weights] = w_next[perm, :].ravel()
    return ParameterVector(vals, lay)


def tanh_sign_flip(spec: NetworkSpec, theta, layer: int, unit: int) -> ParameterVector:
    """Negate a tanh unit's incoming and outgoing weights; equioutput by oddness."""
    if spec.activation != "tanh":
        raise UnsupportedTransformError(
            f"sign flip needs an odd activation, not {spec.activation!r}"
        )
    lay, ls, next_ls = _hidden_layer_slices(spec, layer)
    if not (0 <= unit < ls.n_out):
        raise ValueError(f"unit {unit} out of range [0, {ls.n_out})")
    vals = _values_of(theta, spec).copy()
    w = vals[ls.weights].reshape(ls.n_in, ls.n_out)
    w[:, unit] *= -1.0
    vals[ls.weights] = w.ravel()
    if ls.bias is not None:
        vals[ls.bias.start + unit] *= -1.0
    w_next = vals[next_ls.weights].reshape(next_ls.n_in, next_ls.n_out)
    w_next[unit, :] *= -1.0
    vals[next_ls.weights] = w_next.ravel()
    return ParameterVector(vals, lay)


def relu_rescale(spec: NetworkSpec, theta, layer: int, unit: int, a: float) -> ParameterVector:
    """Scale a unit's inputs by a and its outputs by 1/a.

    Leaves the likelihood invariant for positively homogeneous activations
    but generally changes the prior (the transform is not norm-preserving).
    """
    if spec.activation not in HOMOGENEOUS_ACTIVATIONS:
        raise UnsupportedTransformError(
            f"rescaling needs a positively homogeneous activation, not {spec.activation!r}"
        )
    if not (a > 0.0):
        raise ValueError(f"scale factor must be positive, got {a}")
    lay, ls, next_ls = _hidden_layer_slices(spec, layer)
    if not (0 <= unit < ls.n_out):
        raise ValueError(f"unit {unit} out of range [0, {ls.n_out})")
    vals = _values_of(theta, spec).copy()
    w = vals[ls.weights].reshape(ls.n_in, ls.n_out)
    w[:, unit] *= a
    vals[ls.weights] = w.ravel()
    if ls.bias is not None:
        vals[ls.bias.start + unit] *= a
    w_next = vals[next_ls.weights].reshape(next_ls.n_in, next_ls.n_out)
    w_next[unit, :] /= a
    vals[next_ls.weights] = w_next.ravel()
    return ParameterVector(vals, lay)
