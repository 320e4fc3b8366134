"""Adaptive tempered SMC between consecutive posteriors.

One call to :func:`temper_to_posterior` moves a weighted particle cloud
approximating ``p(theta | D_{k-1})`` to one approximating ``p(theta | D_k)``
along the geometric path ``p(theta | D_{k-1}) p(y_k | theta, xi_k)^lambda``.
Each tempering iteration resamples, applies a random-walk Metropolis kernel
that leaves the current tempered target invariant, then picks the next
exponent so that the effective sample size of the incremental weights hits
``ess_min_fraction * M``.
"""

from dataclasses import dataclass, field

import numpy as np

from ._math import logsumexp, normalize_log_weights

__all__ = [
    "DegenerateWeightsError",
    "TemperingError",
    "ParticleCloud",
    "TemperConfig",
    "TemperTrace",
    "SubApproximation",
    "effective_sample_size",
    "solve_temper_increment",
    "reweight",
    "resample",
    "resample_indices",
    "mh_move",
    "temper_to_posterior",
    "initial_cloud",
    "partition_cloud",
    "stack_subsets",
]

RESAMPLING_SCHEMES = ("multinomial", "stratified", "systematic")


class DegenerateWeightsError(RuntimeError):
    """Every particle carries zero weight."""


class TemperingError(RuntimeError):
    """Tempering failed to reach lambda = 1 within the step budget."""


@dataclass
class ParticleCloud:
    positions: np.ndarray
    log_weights: np.ndarray
    lam: float = 1.0
    k: int = 0

    @property
    def size(self):
        return self.positions.shape[0]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    def copy(self):
        return ParticleCloud(self.positions.copy(), self.log_weights.copy(), self.lam, self.k)


@dataclass
class TemperConfig:
    ess_min_fraction: float = 0.9
    resampling: str = "stratified"
    mh_moves_per_step: int = 1
    mh_scale: float = 1.0
    root_tol: float = 1e-10
    max_temper_steps: int = 1000
    temper_enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.ess_min_fraction <= 1.0:
            raise ValueError("ess_min_fraction must lie in (0, 1]")
        if self.resampling not in RESAMPLING_SCHEMES:
            raise ValueError(f"resampling must be one of {RESAMPLING_SCHEMES}")
        if self.mh_moves_per_step < 0:
            raise ValueError("mh_moves_per_step must be >= 0")
        if self.max_temper_steps < 1:
            raise ValueError("max_temper_steps must be >= 1")


@dataclass
class TemperTrace:
    lambdas: list = field(default_factory=list)
    acceptance_rates: list = field(default_factory=list)
    ess_values: list = field(default_factory=list)

    @property
    def n_steps(self):
        return len(self.lambdas)

    def to_dict(self):
        return {"lambdas": list(self.lambdas), "acceptance_rates": list(self.acceptance_rates),
                "ess_values": list(self.ess_values)}


@dataclass
class SubApproximation:
    positions: np.ndarray
    log_weights: np.ndarray


def effective_sample_size(log_weights):
    """``(sum w)^2 / sum w^2`` computed from (possibly unnormalised) log-weights."""
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0 or not np.any(lw > -np.inf):
        raise DegenerateWeightsError("all log-weights are -inf")
    w = np.exp(lw - np.max(lw))
    return float(np.sum(w) ** 2 / np.sum(w**2))


def _incremental_ess(loglik, gamma):
    # gamma * -inf must stay -inf, not nan, at gamma > 0
    return effective_sample_size(np.where(np.isneginf(loglik), -np.inf, gamma * loglik))


def solve_temper_increment(loglik, lam, config):
    """Next tempering increment ``gamma`` in ``(0, 1 - lam]``.

    Solves ``ESS(gamma) = ess_min_fraction * M`` by bisection.  When the ESS
    at ``gamma = 1 - lam`` is still at or above the target the full remaining
    increment is returned, which ends the tempering loop.
    """
    loglik = np.asarray(loglik, dtype=float)
    if not lam < 1.0:
        raise ValueError("lambda must be < 1")
    target = config.ess_min_fraction * loglik.size
    hi = 1.0 - lam
    if _incremental_ess(loglik, hi) >= target:
        return hi
    lo = 0.0
    tol = config.root_tol
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi or hi - lo < tol:
            break
        ess = _incremental_ess(loglik, mid)
        if abs(ess - target) <= tol * target:
            return mid
        if ess > target:
            lo = mid
        else:
            hi = mid
    return lo if lo > 0.0 else hi


def reweight(cloud, loglik, gamma):
    """Multiply the weights by ``p(y | theta)^gamma`` and renormalise."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    loglik = np.asarray(loglik, dtype=float)
    inc = np.where(np.isneginf(loglik), -np.inf, gamma * loglik)
    lw = cloud.log_weights + inc
    if not np.any(lw > -np.inf):
        raise DegenerateWeightsError(f"all particles have zero weight after reweighting (step {cloud.k})")
    return ParticleCloud(cloud.positions, normalize_log_weights(lw), cloud.lam, cloud.k)


def resample_indices(weights, n, scheme, rng):
    """Ancestor indices for ``n`` draws from normalised ``weights``."""
    w = np.asarray(weights, dtype=float)
    cum = np.cumsum(w)
    cum /= cum[-1]
    cum[-1] = 1.0
    if scheme == "multinomial":
        u = rng.random(n)
    elif scheme == "stratified":
        u = (np.arange(n) + rng.random(n)) / n
    elif scheme == "systematic":
        u = (np.arange(n) + rng.random()) / n
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return np.minimum(np.searchsorted(cum, u, side="right"), w.size - 1)


def resample(cloud, scheme, rng):
    """Resample to uniform weights."""
    idx = resample_indices(cloud.weights, cloud.size, scheme, rng)
    m = cloud.size
    return ParticleCloud(cloud.positions[idx], np.full(m, -np.log(m)), cloud.lam, cloud.k)


def _weighted_std(z, log_weights):
    w = np.exp(log_weights - logsumexp(log_weights))
    mean = w @ z
    var = w @ (z - mean) ** 2
    return np.sqrt(np.maximum(var, 0.0))


def mh_move(cloud, log_target, config, rng, model=None):
    """Random-walk Metropolis sweeps applied to every particle independently.

    Proposals are made in the model's unconstrained coordinates with a
    diagonal Gaussian whose per-coordinate std is ``mh_scale`` times the
    weighted empirical std of the transformed cloud (floored at 1e-6).  The
    target in those coordinates includes the log-Jacobian.  Weights are left
    untouched.  Returns ``(cloud, acceptance_rate)``.
    """
    if model is None:
        z = np.array(cloud.positions, dtype=float)
        logjac = np.zeros(cloud.size)
        to_theta = lambda zz: zz  # noqa: E731
        jac = lambda zz: np.zeros(zz.shape[0])  # noqa: E731
    else:
        z, logjac = model.to_unconstrained(cloud.positions)
        to_theta = model.from_unconstrained
        jac = model.log_jacobian

    n_sweeps = config.mh_moves_per_step
    if n_sweeps == 0:
        return cloud, 1.0
    scale = config.mh_scale * np.maximum(_weighted_std(z, cloud.log_weights), 1e-6)
    theta = cloud.positions
    current = log_target(theta) + logjac
    accepted = 0
    for _ in range(n_sweeps):
        z_prop = z + scale * rng.standard_normal(z.shape)
        theta_prop = to_theta(z_prop)
        with np.errstate(invalid="ignore"):
            prop = log_target(theta_prop) + jac(z_prop)
        log_u = np.log(rng.random(z.shape[0]))
        with np.errstate(invalid="ignore"):
            accept = log_u < prop - current
        accept &= np.isfinite(prop)
        z = np.where(accept[:, None], z_prop, z)
        theta = np.where(accept[:, None], theta_prop, theta)
        current = np.where(accept, prop, current)
        accepted += int(accept.sum())
    rate = accepted / (n_sweeps * z.shape[0])
    return ParticleCloud(theta, cloud.log_weights.copy(), cloud.lam, cloud.k), rate


def initial_cloud(model, rng, m):
    """``m`` prior draws with uniform weights."""
    return ParticleCloud(model.sample_prior(rng, m), np.full(m, -np.log(m)), 1.0, 0)


def temper_to_posterior(model, cloud, y, xi, history, config, rng):
    """Move ``cloud`` from ``p(theta | D_{k-1})`` to ``p(theta | D_k)``.

    ``history`` holds the pairs of ``D_{k-1}`` only; ``(y, xi)`` is the new
    pair.  With ``temper_enabled=False`` a single resample / move / reweight
    pass with ``gamma = 1`` is performed (plain SMC).
    """
    k = cloud.k + 1

    def loglik_new(theta):
        return model.log_likelihood(y, theta, xi)

    def log_target_at(lam):
        def f(theta):
            lp = model.log_prior(theta)
            ok = np.isfinite(lp)
            th = np.where(ok[:, None], theta, cloud.positions[:1])
            out = lp + model.log_likelihood_history(th, history) + lam * loglik_new(th)
            return np.where(ok, out, -np.inf)
        return f

    trace = TemperTrace()
    lam = 0.0
    current = ParticleCloud(cloud.positions, cloud.log_weights, 0.0, k)
    if not np.any(np.isfinite(loglik_new(current.positions)) & (current.log_weights > -np.inf)):
        raise DegenerateWeightsError(f"observation at step {k} has zero likelihood under every particle")

    while lam < 1.0:
        if trace.n_steps >= config.max_temper_steps:
            raise TemperingError(f"step {k}: lambda={lam} after {trace.n_steps} tempering steps")
        current = resample(current, config.resampling, rng)
        current, rate = mh_move(current, log_target_at(lam), config, rng, model)
        ll = loglik_new(current.positions)
        if not np.any(ll > -np.inf):
            raise DegenerateWeightsError(f"observation at step {k} has zero likelihood under every particle")
        if config.temper_enabled:
            gamma = solve_temper_increment(ll, lam, config)
        else:
            gamma = 1.0 - lam
        current = reweight(current, ll, gamma)
        lam = 1.0 if gamma >= 1.0 - lam else lam + gamma
        current.lam = lam
        trace.lambdas.append(lam)
        trace.acceptance_rates.append(rate)
        trace.ess_values.append(effective_sample_size(current.log_weights))
    return current, trace


def partition_cloud(cloud, L):
    """Split a cloud of ``M = N (L + 1)`` particles into ``L + 1`` contiguous blocks.

    Each block's weights are renormalised.
    """
    m = cloud.size
    n_subsets = L + 1
    if L < 0 or m % n_subsets:
        raise ValueError(f"cloud of {m} particles cannot be split into {n_subsets} equal subsets")
    n = m // n_subsets
    out = []
    for ell in range(n_subsets):
        sl = slice(ell * n, (ell + 1) * n)
        lw = cloud.log_weights[sl]
        if not np.any(lw > -np.inf):
            raise DegenerateWeightsError(f"subset {ell} carries no weight")
        out.append(SubApproximation(cloud.positions[sl], normalize_log_weights(lw)))
    return out


def stack_subsets(subsets):
    """``(positions[L+1, N, d], log_weights[L+1, N])`` from a list of subsets."""
    return (np.stack([s.positions for s in subsets]), np.stack([s.log_weights for s in subsets]))
