"""Non-Bayesian optimization: full-batch Adam training and deep ensembles.

Members minimize the mean Gaussian negative log-likelihood of the network
head, with decoupled weight decay on weight blocks only. Trained members
double as warm starts for posterior sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .diagnostics import PredictiveMixture
from .errors import DivergedTrainingError
from .network import (NetworkSpec, ParameterVector, forward_batch, init_parameters,
                      layout_for, log_likelihood_and_grad)
from .numerics import RngStream


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 5000

    def __post_init__(self):
        if self.learning_rate <= 0.0 or self.weight_decay < 0.0:
            raise ValueError("learning_rate must be positive, weight_decay non-negative")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, d: int) -> "AdamState":
        return cls(m=np.zeros(d), v=np.zeros(d), step=0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState,
              config: AdamConfig, decay_mask: np.ndarray | None = None):
    """One bias-corrected Adam step on a minimization gradient.

    Weight decay is decoupled: applied directly to the coordinates selected
    by decay_mask, not folded into the gradient.
    """
    step = state.step + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad**2
    m_hat = m / (1.0 - config.beta1**step)
    v_hat = v / (1.0 - config.beta2**step)
    new_theta = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    if config.weight_decay > 0.0 and decay_mask is not None:
        new_theta = new_theta - config.learning_rate * config.weight_decay * theta * decay_mask
    return new_theta, AdamState(m=m, v=v, step=step)


def weight_decay_mask(spec: NetworkSpec) -> np.ndarray:
    """Decay applies to weight blocks only, never to biases."""
    layout = layout_for(spec)
    _, is_bias = layout.coordinate_layers()
    return (~is_bias).astype(float)


def train_member(spec: NetworkSpec, data: Dataset, config: AdamConfig,
                 rng: RngStream):
    """Full-batch Adam on the mean negative log-likelihood.

    Returns (ParameterVector, per-epoch NLL trace). Deterministic given the
    rng stream; aborts with the epoch index if the loss goes non-finite.
    """
    layout = layout_for(spec)
    theta = init_parameters(spec, rng)
    state = AdamState.zeros(layout.size)
    mask = weight_decay_mask(spec)
    n = data.n
    trace = np.empty(config.epochs)
    for epoch in range(config.epochs):
        lik, grad_lik = log_likelihood_and_grad(spec, theta, data)
        nll = -lik / n
        if not np.isfinite(nll):
            raise DivergedTrainingError(epoch)
        trace[epoch] = nll
        theta, state = adam_step(theta, -grad_lik / n, state, config, mask)
    return ParameterVector(theta, layout), trace


@dataclass
class EnsembleResult:
    members: list[ParameterVector]
    nll_traces: list[np.ndarray] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.members)


def train_ensemble(spec: NetworkSpec, data: Dataset, n_members: int,
                   config: AdamConfig, rng: RngStream) -> EnsembleResult:
    """Independently initialized members on disjoint rng substreams."""
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    members, traces = [], []
    for m in range(n_members):
        try:
            theta, trace = train_member(spec, data, config, rng.substream("member", m))
        except DivergedTrainingError as err:
            raise DivergedTrainingError(err.epoch, f"member {m}: {err}") from err
        members.append(theta)
        traces.append(trace)
    return EnsembleResult(members=members, nll_traces=traces)


def de_predict(spec: NetworkSpec, members, X: np.ndarray) -> PredictiveMixture:
    """Gaussian component per member at every row of X (member id as chain id)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mus, sigmas = [], []
    for member in members:
        mu, log_var = forward_batch(spec, member, X)
        mus.append(mu)
        sigmas.append(np.exp(0.5 * log_var))
    m = len(mus)
    return PredictiveMixture(np.asarray(mus), np.asarray(sigmas),
                             chain_ids=np.arange(m), sample_ids=np.zeros(m, dtype=int))
