"""Prior contrastive estimation (PCE) of the expected information gain.

For a primary draw ``theta_0`` and ``L`` contrastive draws, the integrand

    F = log p(y | theta_0, xi) - log( 1/(L+1) sum_l p(y | theta_l, xi) )

is bounded by ``log(L+1)``.  With ``y = simulate(theta_0, xi, u)`` its
pathwise gradient only needs the model's log-likelihood partials, combined
with softmax weights over the ``L+1`` likelihoods.  Designs are chosen by
projected Adam ascent on minibatch averages of that gradient, with tuples
drawn from the product of ``L+1`` independent particle sub-approximations.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._math import LOG_FLOOR, logsumexp, softmax
from .smc import SubApproximation, stack_subsets

__all__ = [
    "NonFiniteGradientError",
    "ContrastiveSet",
    "SGConfig",
    "OptimState",
    "PCEEstimate",
    "TupleSampler",
    "pce_integrand",
    "pce_sample_gradient",
    "pce_terms",
    "estimate_pce",
    "screen_designs",
    "adam_step",
    "init_state",
    "optimize_design",
]


class NonFiniteGradientError(FloatingPointError):
    """A stochastic gradient contained nan or inf."""


@dataclass
class ContrastiveSet:
    theta_0: np.ndarray
    thetas: np.ndarray  # (L, d_theta)

    @property
    def L(self):
        return self.thetas.shape[0]

    def stacked(self):
        return np.concatenate([np.asarray(self.theta_0, dtype=float)[None, :], self.thetas], axis=0)


@dataclass
class SGConfig:
    steps: int = 5000
    learning_rate: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    minibatch: int = 16
    polyak_window: int = 0
    restarts: int = 1
    optimizer: str = "adam"
    final_n_mc: int = 1000

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass
class OptimState:
    xi: np.ndarray
    bounds: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    polyak_sum: np.ndarray = None
    polyak_count: int = 0


class PCEEstimate(NamedTuple):
    value: float
    std_error: float


def _pce_from_loglik(ll):
    """Integrand from an ``(..., L+1)`` array of floored log-likelihoods."""
    n = ll.shape[-1]
    return (ll[..., 0] - logsumexp(ll, axis=-1)) + np.log(n)


def pce_terms(model, xi, tuples, u, grad=True):
    """Integrand values (and gradients) for a batch of tuples.

    ``tuples`` has shape ``(B, L+1, d_theta)`` with the primary draw in slot
    0; ``u`` has shape ``(B,)``.  Returns ``F`` of shape ``(B,)`` and, when
    ``grad`` is true, ``dF/dxi`` of shape ``(B, d_xi)``.
    """
    xi = np.asarray(xi, dtype=float)
    theta0 = tuples[:, 0]
    if not grad:
        y = model.simulate(theta0, xi, u)
        return _pce_from_loglik(np.maximum(model.log_likelihood(y[:, None], tuples, xi), LOG_FLOOR))
    y, dy = model.simulate_with_grad(theta0, xi, u)
    raw, g_design, g_obs = model.loglik_and_grads(y[:, None], tuples, xi)
    ll = np.maximum(raw, LOG_FLOOR)
    F = _pce_from_loglik(ll)
    g = g_design + g_obs[..., None] * dy[:, None, :]
    # floored likelihoods are constant in xi
    g = np.where((raw > LOG_FLOOR)[..., None], g, 0.0)
    w = softmax(ll, axis=-1)
    return F, g[:, 0] - np.einsum("bl,bld->bd", w, g)


def pce_integrand(model, xi, cs, y):
    """``F(xi, theta_0, ..., theta_L, y)`` for an explicit observation ``y``."""
    ll = np.maximum(model.log_likelihood(y, cs.stacked(), xi), LOG_FLOOR)
    return float(_pce_from_loglik(ll))


def pce_sample_gradient(model, xi, cs, u):
    """Total derivative in ``xi`` of ``F`` at ``y = simulate(theta_0, xi, u)``."""
    _, g = pce_terms(model, xi, cs.stacked()[None], np.array([float(u)]))
    return g[0]


def _alias_tables(weights):
    """Walker/Vose alias tables, one row per categorical distribution."""
    n_rows, n = weights.shape
    prob = np.zeros((n_rows, n))
    alias = np.zeros((n_rows, n), dtype=np.int64)
    for r in range(n_rows):
        scaled = weights[r] * (n / weights[r].sum())
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s, g = small.pop(), large.pop()
            prob[r, s] = scaled[s]
            alias[r, s] = g
            scaled[g] -= 1.0 - scaled[s]
            (small if scaled[g] < 1.0 else large).append(g)
        for i in large + small:
            prob[r, i] = 1.0
            alias[r, i] = i
    return prob, alias


class TupleSampler:
    """Draws ``(theta_0, ..., theta_L)`` from the product of weighted subsets.

    Slot ``l`` of every tuple is an independent categorical draw from subset
    ``l``; draws use alias tables so each costs O(1).
    """

    def __init__(self, subsets):
        if isinstance(subsets, (list, tuple)) and subsets and isinstance(subsets[0], SubApproximation):
            positions, log_weights = stack_subsets(subsets)
        else:
            positions, log_weights = subsets
        self.n_subsets, self.n, self.d = positions.shape
        self.flat_positions = positions.reshape(-1, self.d)
        w = np.exp(log_weights - logsumexp(log_weights, axis=1, keepdims=True))
        self.uniform = bool(np.all(np.abs(w * self.n - 1.0) < 1e-12))
        self.prob, self.alias = _alias_tables(w)
        self.prob = self.prob.ravel()
        self.alias = (self.alias + self.n * np.arange(self.n_subsets)[:, None]).ravel()
        self.row_start = self.n * np.arange(self.n_subsets)

    @property
    def L(self):
        return self.n_subsets - 1

    def indices(self, rng, size):
        """Flat indices into the stacked positions, shape ``(size, L+1)``."""
        j = self.row_start + rng.integers(0, self.n, size=(size, self.n_subsets))
        if self.uniform:
            return j
        keep = rng.random((size, self.n_subsets)) < self.prob[j]
        return np.where(keep, j, self.alias[j])

    def sample(self, rng, size):
        return self.flat_positions[self.indices(rng, size)]


def estimate_pce(model, subsets, xi, n_mc, rng, max_batch_elems=2_000_000):
    """Monte Carlo estimate of the particle PCE bound at ``xi`` with its standard error."""
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    sampler = subsets if hasattr(subsets, "sample") else TupleSampler(subsets)
    batch = max(1, max_batch_elems // sampler.n_subsets)
    values = []
    done = 0
    while done < n_mc:
        b = min(batch, n_mc - done)
        tuples = sampler.sample(rng, b)
        u = rng.standard_normal(b)
        values.append(pce_terms(model, xi, tuples, u, grad=False))
        done += b
    vals = np.concatenate(values)
    return PCEEstimate(float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(n_mc)))


def screen_designs(model, subsets, candidates, n_mc, rng):
    """The candidate design with the highest cheap PCE estimate.

    Used to pick an optimiser start: far from the posterior mass the bound
    is flat and the stochastic gradient carries almost no signal.
    """
    sampler = subsets if hasattr(subsets, "sample") else TupleSampler(subsets)
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    values = [estimate_pce(model, sampler, c, n_mc, rng).value for c in candidates]
    return candidates[int(np.argmax(values))]


def init_state(xi, bounds, polyak=False):
    xi = np.clip(np.asarray(xi, dtype=float), bounds[:, 0], bounds[:, 1])
    z = np.zeros_like(xi)
    return OptimState(xi, np.asarray(bounds, dtype=float), z.copy(), z.copy(), 0,
                      z.copy() if polyak else None, 0)


def adam_step(state, gradient, config):
    """One projected ascent step (Adam, or plain SGD with constant step)."""
    g = np.asarray(gradient, dtype=float)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(f"non-finite design gradient at iteration {state.t}: {g}")
    t = state.t + 1
    if config.optimizer == "sgd":
        m, v = state.m, state.v
        step = config.learning_rate * g
    else:
        b1, b2 = config.adam_beta1, config.adam_beta2
        m = b1 * state.m + (1.0 - b1) * g
        v = b2 * state.v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        step = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    lo, hi = state.bounds[:, 0], state.bounds[:, 1]
    xi = np.clip(state.xi + step, lo, hi)
    return OptimState(xi, state.bounds, m, v, t, state.polyak_sum, state.polyak_count)


def _run_single(model, sampler, xi_init, config, rng, callback):
    window = config.polyak_window
    state = init_state(xi_init, model.bounds, polyak=window > 0)
    for it in range(config.steps):
        tuples = sampler.sample(rng, config.minibatch)
        u = rng.standard_normal(config.minibatch)
        _, grads = pce_terms(model, state.xi, tuples, u)
        state = adam_step(state, grads.mean(axis=0), config)
        if window > 0 and it >= config.steps - window:
            state.polyak_sum = state.polyak_sum + state.xi
            state.polyak_count += 1
        if callback is not None:
            callback(state)
    if window > 0 and state.polyak_count:
        return model.project(state.polyak_sum / state.polyak_count)
    return state.xi


def optimize_design(model, subsets, xi_init, config, rng, callback=None):
    """Maximise the particle PCE bound over the design box.

    Returns ``(xi_star, PCEEstimate)``; the estimate uses ``final_n_mc``
    fresh draws at ``xi_star``.  With ``restarts > 1`` the first start is
    ``xi_init`` and the others are uniform in the box; the start with the
    highest final estimate wins.
    """
    sampler = subsets if hasattr(subsets, "sample") else TupleSampler(subsets)
    starts = [np.asarray(xi_init, dtype=float)]
    starts += [model.sample_design(rng) for _ in range(config.restarts - 1)]
    best = None
    for x0 in starts:
        xi = _run_single(model, sampler, x0, config, rng, callback)
        est = estimate_pce(model, sampler, xi, config.final_n_mc, rng)
        if best is None or est.value > best[1].value:
            best = (xi, est)
    return best
