"""Hamiltonian samplers over a log-density target with exact gradients.

The target is any callable theta -> (log density, gradient). NUTS implements
the tree-doubling variant with multinomial sampling over the trajectory and
dual-averaging step-size adaptation toward a target acceptance statistic;
HMC runs a fixed step size and trajectory length. Chains are independent
tasks: each owns one counter-based rng stream, so results never depend on
scheduling, and a chain set can run across processes unchanged.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import AllChainsFailedError, DyingSamplerError, UnrecoverableStateError
from .network import NetworkSpec, init_parameters, layout_for, make_posterior_target
from .numerics import GAUSSIAN, DensityParams, RngStream

STEP_SIZE_FLOOR = 1e-12
DIVERGENCE_ENERGY = 1000.0

INIT_COLD = "cold_random"
INIT_PRIOR = "prior_draw"
INIT_WARM = "warm_start"


@dataclass(frozen=True)
class HmcConfig:
    """Fixed-step HMC; leapfrog count is max(1, round(trajectory_length / step_size))."""

    step_size: float
    trajectory_length: float
    warmup_steps: int = 0

    def __post_init__(self):
        if self.step_size <= 0.0 or self.trajectory_length <= 0.0:
            raise ValueError("step_size and trajectory_length must be positive")

    @property
    def n_leapfrog(self) -> int:
        return max(1, int(round(self.trajectory_length / self.step_size)))


@dataclass(frozen=True)
class NutsConfig:
    target_accept: float = 0.8
    max_tree_depth: int = 10
    warmup_steps: int = 1000
    da_gamma: float = 0.05
    da_t0: float = 10.0
    da_kappa: float = 0.75

    def __post_init__(self):
        if not (0.0 < self.target_accept < 1.0):
            raise ValueError("target_accept must lie in (0, 1)")
        if not (1 <= self.max_tree_depth <= 12):
            raise ValueError("max_tree_depth must lie in [1, 12]")


@dataclass(frozen=True)
class InitStrategy:
    kind: str
    theta0: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (INIT_COLD, INIT_PRIOR, INIT_WARM):
            raise ValueError(f"unknown init strategy {self.kind!r}")
        if self.kind == INIT_WARM and self.theta0 is None:
            raise ValueError("warm_start needs theta0")

    @classmethod
    def cold(cls) -> "InitStrategy":
        return cls(INIT_COLD)

    @classmethod
    def prior(cls) -> "InitStrategy":
        return cls(INIT_PRIOR)

    @classmethod
    def warm(cls, theta0) -> "InitStrategy":
        return cls(INIT_WARM, np.asarray(theta0, dtype=float))


@dataclass
class SamplerState:
    theta: np.ndarray
    logp: float
    grad: np.ndarray


def _evaluate(target, theta: np.ndarray) -> SamplerState:
    logp, grad = target(theta)
    return SamplerState(theta=theta, logp=float(logp), grad=np.asarray(grad, dtype=float))


def _require_finite(state: SamplerState) -> None:
    if not math.isfinite(state.logp) or not np.all(np.isfinite(state.grad)):
        raise UnrecoverableStateError(
            "non-finite log density or gradient at the current state"
        )


def leapfrog(theta: np.ndarray, momentum: np.ndarray, eps: float, grad_fn):
    """One half-kick / drift / half-kick step with identity mass; time reversible."""
    if eps <= 0.0:
        raise ValueError("step size must be positive")
    r_half = momentum + 0.5 * eps * np.asarray(grad_fn(theta), dtype=float)
    theta_new = theta + eps * r_half
    r_new = r_half + 0.5 * eps * np.asarray(grad_fn(theta_new), dtype=float)
    return theta_new, r_new


def _leapfrog_fused(state: SamplerState, r: np.ndarray, eps: float, target):
    r_half = r + 0.5 * eps * state.grad
    theta_new = state.theta + eps * r_half
    new_state = _evaluate(target, theta_new)
    if not np.all(np.isfinite(new_state.grad)):
        return new_state, r_half, False
    r_new = r_half + 0.5 * eps * new_state.grad
    return new_state, r_new, math.isfinite(new_state.logp)


def find_initial_step_size(state: SamplerState, target, gen: np.random.Generator) -> float:
    """Double/halve a unit step until the one-step acceptance crosses 1/2."""
    eps = 1.0
    r = gen.standard_normal(state.theta.size)
    joint0 = state.logp - 0.5 * float(r @ r)

    def log_ratio(eps_try: float) -> float:
        new_state, r_new, ok = _leapfrog_fused(state, r, eps_try, target)
        if not ok:
            return -math.inf
        return (new_state.logp - 0.5 * float(r_new @ r_new)) - joint0

    direction = 1.0 if log_ratio(eps) > math.log(0.5) else -1.0
    for _ in range(100):
        if direction * log_ratio(eps) <= -direction * math.log(2.0):
            break
        eps *= 2.0**direction
        if eps < STEP_SIZE_FLOOR or eps > 1e7:
            break
    return eps


@dataclass
class HmcStepResult:
    state: SamplerState
    accepted: bool
    accept_prob: float
    divergent: bool


def hmc_step(state: SamplerState, config: HmcConfig, target,
             gen: np.random.Generator) -> HmcStepResult:
    """Momentum resample, fixed-length leapfrog trajectory, Metropolis correction."""
    _require_finite(state)
    r0 = gen.standard_normal(state.theta.size)
    h0 = -state.logp + 0.5 * float(r0 @ r0)
    current, r = state, r0
    ok = True
    for _ in range(config.n_leapfrog):
        current, r, ok = _leapfrog_fused(current, r, config.step_size, target)
        if not ok:
            break
    if ok:
        h1 = -current.logp + 0.5 * float(r @ r)
        accept_prob = min(1.0, math.exp(min(0.0, h0 - h1)))
        divergent = h1 - h0 > DIVERGENCE_ENERGY
    else:
        accept_prob = 0.0
        divergent = True
    accepted = (not divergent) and gen.uniform() < accept_prob
    return HmcStepResult(state=current if accepted else state, accepted=accepted,
                         accept_prob=accept_prob, divergent=divergent)


@dataclass
class _Tree:
    theta_minus: np.ndarray
    r_minus: np.ndarray
    grad_minus: np.ndarray
    logp_minus: float
    theta_plus: np.ndarray
    r_plus: np.ndarray
    grad_plus: np.ndarray
    logp_plus: float
    proposal: SamplerState
    proposal_joint: float
    log_sum_weight: float
    sum_alpha: float
    n_alpha: int
    n_leapfrog: int
    divergent: bool
    turning: bool


def _is_turning(theta_minus, r_minus, theta_plus, r_plus) -> bool:
    span = theta_plus - theta_minus
    return bool(span @ r_minus < 0.0 or span @ r_plus < 0.0)


def _leaf(state: SamplerState, r: np.ndarray, eps: float, direction: int,
          joint0: float, target) -> _Tree:
    new_state, r_new, ok = _leapfrog_fused(state, r, direction * eps, target)
    if ok:
        joint = new_state.logp - 0.5 * float(r_new @ r_new)
        delta = joint - joint0
        divergent = not math.isfinite(delta) or delta < -DIVERGENCE_ENERGY
        alpha = math.exp(min(0.0, delta)) if math.isfinite(delta) else 0.0
        log_w = delta if not divergent else -math.inf
    else:
        joint = -math.inf
        divergent, alpha, log_w = True, 0.0, -math.inf
    return _Tree(
        theta_minus=new_state.theta, r_minus=r_new, grad_minus=new_state.grad,
        logp_minus=new_state.logp,
        theta_plus=new_state.theta, r_plus=r_new, grad_plus=new_state.grad,
        logp_plus=new_state.logp,
        proposal=new_state, proposal_joint=joint, log_sum_weight=log_w,
        sum_alpha=alpha, n_alpha=1, n_leapfrog=1, divergent=divergent, turning=False,
    )


def _build_tree(state: SamplerState, r: np.ndarray, eps: float, direction: int,
                depth: int, joint0: float, target, gen: np.random.Generator) -> _Tree:
    if depth == 0:
        return _leaf(state, r, eps, direction, joint0, target)
    first = _build_tree(state, r, eps, direction, depth - 1, joint0, target, gen)
    if first.divergent or first.turning:
        return first
    if direction == 1:
        edge = SamplerState(first.theta_plus, first.logp_plus, first.grad_plus)
        second = _build_tree(edge, first.r_plus, eps, direction, depth - 1,
                             joint0, target, gen)
    else:
        edge = SamplerState(first.theta_minus, first.logp_minus, first.grad_minus)
        second = _build_tree(edge, first.r_minus, eps, direction, depth - 1,
                             joint0, target, gen)
    sum_alpha = first.sum_alpha + second.sum_alpha
    n_alpha = first.n_alpha + second.n_alpha
    n_leapfrog = first.n_leapfrog + second.n_leapfrog
    if direction == 1:
        theta_minus, r_minus, grad_minus, logp_minus = (
            first.theta_minus, first.r_minus, first.grad_minus, first.logp_minus)
        theta_plus, r_plus, grad_plus, logp_plus = (
            second.theta_plus, second.r_plus, second.grad_plus, second.logp_plus)
    else:
        theta_minus, r_minus, grad_minus, logp_minus = (
            second.theta_minus, second.r_minus, second.grad_minus, second.logp_minus)
        theta_plus, r_plus, grad_plus, logp_plus = (
            first.theta_plus, first.r_plus, first.grad_plus, first.logp_plus)
    if second.divergent or second.turning:
        # discard the broken subtree's proposal, keep its counters
        return _Tree(theta_minus, r_minus, grad_minus, logp_minus,
                     theta_plus, r_plus, grad_plus, logp_plus,
                     proposal=first.proposal, proposal_joint=first.proposal_joint,
                     log_sum_weight=first.log_sum_weight,
                     sum_alpha=sum_alpha, n_alpha=n_alpha, n_leapfrog=n_leapfrog,
                     divergent=second.divergent, turning=second.turning)
    log_sum_weight = np.logaddexp(first.log_sum_weight, second.log_sum_weight)
    # multinomial draw between the two halves
    if math.log(gen.uniform()) < second.log_sum_weight - log_sum_weight:
        proposal, proposal_joint = second.proposal, second.proposal_joint
    else:
        proposal, proposal_joint = first.proposal, first.proposal_joint
    turning = _is_turning(theta_minus, r_minus, theta_plus, r_plus)
    return _Tree(theta_minus, r_minus, grad_minus, logp_minus,
                 theta_plus, r_plus, grad_plus, logp_plus,
                 proposal=proposal, proposal_joint=proposal_joint,
                 log_sum_weight=log_sum_weight,
                 sum_alpha=sum_alpha, n_alpha=n_alpha, n_leapfrog=n_leapfrog,
                 divergent=False, turning=turning)


@dataclass
class NutsStats:
    depth: int
    n_leapfrog: int
    accept_stat: float
    divergent: bool
    energy_error: float


def nuts_step(state: SamplerState, config: NutsConfig, eps: float, target,
              gen: np.random.Generator) -> tuple[SamplerState, NutsStats]:
    """One tree-doubling transition; at most 2^max_tree_depth leapfrog evaluations."""
    _require_finite(state)
    r0 = gen.standard_normal(state.theta.size)
    joint0 = state.logp - 0.5 * float(r0 @ r0)

    theta_minus = theta_plus = state.theta
    r_minus = r_plus = r0
    grad_minus = grad_plus = state.grad
    logp_minus = logp_plus = state.logp
    proposal, proposal_joint = state, joint0
    log_sum_weight = 0.0
    sum_alpha, n_alpha, n_leapfrog = 0.0, 0, 0
    divergent = False
    depth = 0

    while depth < config.max_tree_depth:
        direction = 1 if gen.uniform() < 0.5 else -1
        if direction == 1:
            edge = SamplerState(theta_plus, logp_plus, grad_plus)
            tree = _build_tree(edge, r_plus, eps, direction, depth, joint0, target, gen)
        else:
            edge = SamplerState(theta_minus, logp_minus, grad_minus)
            tree = _build_tree(edge, r_minus, eps, direction, depth, joint0, target, gen)
        sum_alpha += tree.sum_alpha
        n_alpha += tree.n_alpha
        n_leapfrog += tree.n_leapfrog
        if tree.divergent:
            divergent = True
            break
        if tree.turning:
            break
        # biased progressive sampling toward the fresh half of the trajectory
        if math.log(gen.uniform()) < tree.log_sum_weight - log_sum_weight:
            proposal, proposal_joint = tree.proposal, tree.proposal_joint
        log_sum_weight = np.logaddexp(log_sum_weight, tree.log_sum_weight)
        if direction == 1:
            theta_plus, r_plus, grad_plus, logp_plus = (
                tree.theta_plus, tree.r_plus, tree.grad_plus, tree.logp_plus)
        else:
            theta_minus, r_minus, grad_minus, logp_minus = (
                tree.theta_minus, tree.r_minus, tree.grad_minus, tree.logp_minus)
        depth += 1
        if _is_turning(theta_minus, r_minus, theta_plus, r_plus):
            break

    stats = NutsStats(
        depth=depth, n_leapfrog=n_leapfrog,
        accept_stat=sum_alpha / max(1, n_alpha),
        divergent=divergent,
        energy_error=joint0 - proposal_joint,
    )
    return proposal, stats


@dataclass
class WarmupResult:
    step_size: float
    state: SamplerState
    accept_history: np.ndarray
    divergences: int


def _warmup_adapt(config: NutsConfig, target, state: SamplerState,
                  gen: np.random.Generator) -> WarmupResult:
    eps = find_initial_step_size(state, target, gen)
    mu = math.log(10.0 * eps)
    h_bar = 0.0
    log_eps_bar = 0.0
    accepts = np.empty(max(config.warmup_steps, 0))
    divergences = 0
    for m in range(1, config.warmup_steps + 1):
        state, stats = nuts_step(state, config, eps, target, gen)
        divergences += int(stats.divergent)
        accepts[m - 1] = stats.accept_stat
        w = 1.0 / (m + config.da_t0)
        h_bar = (1.0 - w) * h_bar + w * (config.target_accept - stats.accept_stat)
        log_eps = mu - math.sqrt(m) / config.da_gamma * h_bar
        eta = m ** (-config.da_kappa)
        log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar
        eps = math.exp(log_eps)
        if eps < STEP_SIZE_FLOOR:
            raise DyingSamplerError(
                f"step size collapsed to {eps:.3g} at warmup step {m}"
            )
    tuned = math.exp(log_eps_bar) if config.warmup_steps > 0 else eps
    if tuned < STEP_SIZE_FLOOR:
        raise DyingSamplerError(f"tuned step size {tuned:.3g} underflowed")
    return WarmupResult(step_size=tuned, state=state, accept_history=accepts,
                        divergences=divergences)


def warmup_adapt(config: NutsConfig, target, init: np.ndarray,
                 rng: RngStream) -> tuple[float, np.ndarray]:
    """Dual-averaging warmup from an initial point; returns (tuned eps, theta)."""
    state = _evaluate(target, np.asarray(init, dtype=float))
    _require_finite(state)
    result = _warmup_adapt(config, target, state, rng.generator())
    return result.step_size, result.state.theta


@dataclass
class Chain:
    samples: np.ndarray
    chain_id: int
    init_kind: str
    seed: tuple[int, int]
    accept_mean: float = float("nan")
    divergences: int = 0
    warmup_divergences: int = 0
    step_size: float = float("nan")
    n_warmup: int = 0
    duration: float = 0.0
    mean_abs_energy_error: float = float("nan")
    stop_index: int | None = None
    failed: bool = False
    error: str = ""

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]


@dataclass
class ChainSet:
    chains: list[Chain] = field(default_factory=list)

    def successful(self) -> list[Chain]:
        return [c for c in self.chains if not c.failed and c.n_samples > 0]

    def failed(self) -> list[Chain]:
        return [c for c in self.chains if c.failed]

    def sample_arrays(self) -> list[np.ndarray]:
        return [c.samples for c in self.successful()]

    def chain_ids(self) -> list[int]:
        return [c.chain_id for c in self.successful()]


def _draw_from_prior(prior: DensityParams, d: int, gen: np.random.Generator) -> np.ndarray:
    if prior.family == GAUSSIAN:
        return prior.location + prior.scale * gen.standard_normal(d)
    return gen.laplace(prior.location, prior.scale, size=d)


def run_chain(spec: NetworkSpec, prior: DensityParams, data: Dataset, config,
              init: InitStrategy, n_samples: int, rng: RngStream,
              chain_id: int = 0, monitor=None) -> Chain:
    """Warmup plus n_samples recorded draws; failures become flagged chains.

    monitor, if given, is called as monitor(sample_index, theta) after every
    recorded draw and stops the chain early when it returns True.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    start = time.perf_counter()
    gen = rng.generator()
    target = make_posterior_target(spec, data, prior)
    if init.kind == INIT_COLD:
        theta0 = init_parameters(spec, rng.substream("init"))
    elif init.kind == INIT_PRIOR:
        theta0 = _draw_from_prior(prior, layout_for(spec).size, gen)
    else:
        theta0 = np.asarray(init.theta0, dtype=float)

    def _finish(samples, failed=False, error="", **kw):
        return Chain(samples=np.asarray(samples, dtype=float).reshape(len(samples), -1)
                     if len(samples) else np.empty((0, theta0.size)),
                     chain_id=chain_id, init_kind=init.kind,
                     seed=(rng.master_seed, rng.stream_id),
                     duration=time.perf_counter() - start,
                     failed=failed, error=error, **kw)

    try:
        state = _evaluate(target, theta0)
        _require_finite(state)
        if isinstance(config, NutsConfig):
            warm = _warmup_adapt(config, target, state, gen)
            eps, state = warm.step_size, warm.state
            warmup_div = warm.divergences
            n_warmup = config.warmup_steps

            def step():
                return nuts_step(state, config, eps, target, gen)
        elif isinstance(config, HmcConfig):
            eps = config.step_size
            warmup_div = 0
            n_warmup = config.warmup_steps
            for _ in range(config.warmup_steps):
                result = hmc_step(state, config, target, gen)
                state = result.state
                warmup_div += int(result.divergent)

            def step():
                res = hmc_step(state, config, target, gen)
                stats = NutsStats(depth=0, n_leapfrog=config.n_leapfrog,
                                  accept_stat=res.accept_prob, divergent=res.divergent,
                                  energy_error=0.0)
                return res.state, stats
        else:
            raise TypeError(f"unknown sampler config type {type(config).__name__}")

        samples = []
        accepts, abs_errors = [], []
        divergences = 0
        stop_index = None
        for s in range(n_samples):
            state, stats = step()
            samples.append(state.theta.copy())
            accepts.append(stats.accept_stat)
            divergences += int(stats.divergent)
            if not stats.divergent and isinstance(config, NutsConfig):
                abs_errors.append(abs(stats.energy_error))
            if monitor is not None and monitor(s, state.theta):
                stop_index = s + 1
                break
        return _finish(
            samples,
            accept_mean=float(np.mean(accepts)) if accepts else float("nan"),
            divergences=divergences, warmup_divergences=warmup_div,
            step_size=eps, n_warmup=n_warmup,
            mean_abs_energy_error=float(np.mean(abs_errors)) if abs_errors else float("nan"),
            stop_index=stop_index,
        )
    except (DyingSamplerError, UnrecoverableStateError) as err:
        return _finish([], failed=True, error=f"{type(err).__name__}: {err}")


def _chain_task(args) -> Chain:
    (spec, prior, data, config, init, n_samples, master_seed, stream_id,
     chain_id, monitor_factory) = args
    monitor = monitor_factory(chain_id) if monitor_factory is not None else None
    return run_chain(spec, prior, data, config, init, n_samples,
                     RngStream(master_seed, stream_id), chain_id=chain_id,
                     monitor=monitor)


def run_chainset(spec: NetworkSpec, prior: DensityParams, data: Dataset, config,
                 init, n_samples: int, n_chains: int, rng: RngStream,
                 jobs: int = 1, monitor_factory=None) -> ChainSet:
    """Independent chains on disjoint rng substreams; order- and jobs-invariant.

    init may be a single InitStrategy or one per chain. Failed chains are
    retained as flagged results; only an all-failed run raises.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    if isinstance(init, InitStrategy):
        inits = [init] * n_chains
    else:
        inits = list(init)
        if len(inits) != n_chains:
            raise ValueError(f"got {len(inits)} init strategies for {n_chains} chains")
    tasks = []
    for k in range(n_chains):
        stream = rng.substream("chain", k)
        tasks.append((spec, prior, data, config, inits[k], n_samples,
                      stream.master_seed, stream.stream_id, k, monitor_factory))
    if jobs > 1 and n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, n_chains)) as pool:
            chains = list(pool.map(_chain_task, tasks))
    else:
        chains = [_chain_task(t) for t in tasks]
    chains.sort(key=lambda c: c.chain_id)
    result = ChainSet(chains=chains)
    if not result.successful():
        details = "; ".join(f"chain {c.chain_id}: {c.error}" for c in chains)
        err = AllChainsFailedError(f"all {n_chains} chains failed ({details})")
        err.chainset = result  # callers may still persist the failed chains
        raise err
    return result
