"""Evaluation of design sequences and posterior quality.

The sequential bounds compare the realised observations under the true
parameter ``theta*`` with ``L`` contrastive parameters drawn from the prior.
With ``s* = sum_k log p(y_k | theta*, xi_k)`` and ``s_l`` the same sum for
contrastive draw ``l``,

    SPCE = s* - log( (exp(s*) + sum_l exp(s_l)) / (L + 1) )   <= log(L+1)
    SNMC = s* - log( sum_l exp(s_l) / L )

SPCE is a lower bound on the total information gained by the design
sequence and SNMC an upper one.  Every per-observation log-likelihood is
floored at ``LOG_FLOOR`` before summing so that K-fold products stay
representable.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from ._math import LOG_FLOOR, logsumexp
from .models import History

__all__ = [
    "Rollout",
    "EvalConfig",
    "BoundEstimate",
    "SequentialEvaluator",
    "spce",
    "snmc",
    "sequential_bounds",
    "bounds_from_loglik_sums",
    "wasserstein2_to_point",
    "wasserstein2_blocks",
    "wasserstein2_label_invariant",
    "posterior_moments",
]


@dataclass
class Rollout:
    theta_star: np.ndarray
    history: History


@dataclass
class EvalConfig:
    L_eval: int = 100_000
    n_outer: int = 1
    batch_size: int = 100_000

    def __post_init__(self):
        if self.L_eval < 1:
            raise ValueError("L_eval must be >= 1")
        if self.n_outer < 1:
            raise ValueError("n_outer must be >= 1")


@dataclass
class BoundEstimate:
    spce: float
    spce_se: float
    snmc: float
    snmc_se: float

    def to_dict(self):
        return {"spce": self.spce, "spce_se": self.spce_se, "snmc": self.snmc, "snmc_se": self.snmc_se}


def _floored_loglik(model, y, theta, xi):
    return np.maximum(model.log_likelihood(y, theta, xi), LOG_FLOOR)


def bounds_from_loglik_sums(s_star, s):
    """SPCE and SNMC for one contrastive set, with delta-method standard errors.

    ``s`` holds the K-summed contrastive log-likelihoods.  The standard
    errors treat the contrastive draws as the only source of randomness
    (the realised observations are fixed).
    """
    L = s.size
    spce_lse = logsumexp(np.append(s, s_star))
    spce_val = (s_star - max(spce_lse, s_star)) + np.log(L + 1)
    snmc_val = s_star - logsumexp(s) + np.log(L)

    # var(log mean X) ~ var(X) / (L mean(X)^2), written with shifted exponentials
    def rel_var(a):
        w = np.exp(a - np.max(a))
        m1 = np.mean(w)
        return max(np.mean(w * w) / (m1 * m1) - 1.0, 0.0) / a.size

    spce_se = np.sqrt(rel_var(np.append(s, s_star)))
    snmc_se = np.sqrt(rel_var(s))
    return float(spce_val), float(spce_se), float(snmc_val), float(snmc_se)


class SequentialEvaluator:
    """Running SPCE/SNMC over a growing history.

    The ``L_eval`` prior draws are made once, and their summed
    log-likelihoods are updated with each new ``(y, xi)`` pair, so one
    update costs ``O(L_eval)``.
    """

    def __init__(self, model, theta_star, config, rng):
        self.model = model
        self.theta_star = np.asarray(theta_star, dtype=float)
        self.config = config
        self.contrastive = [model.sample_prior(rng, config.L_eval) for _ in range(config.n_outer)]
        self.sums = [np.zeros(config.L_eval) for _ in range(config.n_outer)]
        self.s_star = 0.0
        self.k = 0

    def update(self, y, xi):
        self.s_star += float(_floored_loglik(self.model, y, self.theta_star, xi))
        bs = self.config.batch_size
        for theta, s in zip(self.contrastive, self.sums):
            for start in range(0, theta.shape[0], bs):
                s[start:start + bs] += _floored_loglik(self.model, y, theta[start:start + bs], xi)
        self.k += 1
        return self.estimate()

    def estimate(self):
        if self.k == 0:
            return BoundEstimate(0.0, 0.0, 0.0, 0.0)
        per = np.array([bounds_from_loglik_sums(self.s_star, s) for s in self.sums])
        n = per.shape[0]
        if n == 1:
            return BoundEstimate(*per[0])
        sp, sn = per[:, 0], per[:, 2]
        return BoundEstimate(float(sp.mean()), float(sp.std(ddof=1) / np.sqrt(n)),
                             float(sn.mean()), float(sn.std(ddof=1) / np.sqrt(n)))


def sequential_bounds(model, rollout, config, rng):
    """SPCE and SNMC (with standard errors) for a complete rollout."""
    ev = SequentialEvaluator(model, rollout.theta_star, config, rng)
    for y, xi in rollout.history.pairs():
        ev.update(y, xi)
    return ev.estimate()


def spce(model, rollout, config, rng):
    return sequential_bounds(model, rollout, config, rng).spce


def snmc(model, rollout, config, rng):
    return sequential_bounds(model, rollout, config, rng).snmc


def _normalised_weights(cloud):
    lw = np.asarray(cloud.log_weights, dtype=float)
    return np.exp(lw - logsumexp(lw))


def wasserstein2_to_point(cloud, theta_star):
    """W2 between the weighted particle measure and a Dirac at ``theta_star``."""
    w = _normalised_weights(cloud)
    d2 = np.sum((cloud.positions - np.asarray(theta_star, dtype=float)) ** 2, axis=-1)
    return float(np.sqrt(max(w @ d2, 0.0)))


def wasserstein2_blocks(cloud, theta_star, blocks):
    """Per-block W2 distances, e.g. one per source for the location model."""
    w = _normalised_weights(cloud)
    diff2 = (cloud.positions - np.asarray(theta_star, dtype=float)) ** 2
    return {name: float(np.sqrt(max(w @ diff2[:, sl].sum(axis=-1), 0.0))) for name, sl in blocks.items()}


def wasserstein2_label_invariant(cloud, theta_star, blocks):
    """W2 to ``theta_star`` after relabelling exchangeable blocks per particle.

    Each particle is compared with ``theta_star`` under the permutation of
    ``blocks`` closest to it.  This is a diagnostic for symmetric
    posteriors (e.g. several identical sources), where the plain distance
    cannot fall below the separation between the symmetric modes.
    """
    if len(blocks) < 2:
        return wasserstein2_to_point(cloud, theta_star)
    w = _normalised_weights(cloud)
    x = np.asarray(cloud.positions, dtype=float)
    ts = np.asarray(theta_star, dtype=float)
    best = None
    for perm in itertools.permutations(range(len(blocks))):
        d2 = sum(np.sum((x[:, blocks[p]] - ts[blocks[i]]) ** 2, axis=-1) for i, p in enumerate(perm))
        best = d2 if best is None else np.minimum(best, d2)
    return float(np.sqrt(max(w @ best, 0.0)))


def posterior_moments(cloud):
    """Weighted mean and covariance of the particles."""
    w = _normalised_weights(cloud)
    x = np.asarray(cloud.positions, dtype=float)
    mean = w @ x
    c = x - mean
    return mean, (w[:, None] * c).T @ c
