"""Probabilistic models for sequential design.

Every model exposes the same vectorised contract.  Parameters ``theta`` have
shape ``(..., d_theta)``, designs ``xi`` have shape ``(d_xi,)`` or a shape
broadcastable against ``theta``'s leading dimensions, and observations ``y``
and noise draws ``u`` are scalars per leading index.  Gradients are derived
by hand; the test-suite checks each of them against finite differences.

Three models are provided:

* ``LinearGaussian`` -- ``y = xi * theta + sigma * u``, conjugate and
  therefore the oracle for the whole pipeline;
* ``SourceLocation`` -- 2D location finding with ``S`` sources and a
  log-normal intensity measurement;
* ``CES`` -- constant elasticity of substitution, a censored logit-normal
  rating of two baskets of three goods.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import special

__all__ = [
    "InvalidObservationError",
    "History",
    "Model",
    "LinearGaussian",
    "SourceLocation",
    "CES",
    "make_model",
    "MODELS",
]

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class InvalidObservationError(ValueError):
    """Observation outside the support of the model."""


@dataclass
class History:
    """Append-only record of ``(observation, design)`` pairs."""

    observations: list = field(default_factory=list)
    designs: list = field(default_factory=list)

    def append(self, y, xi):
        self.observations.append(float(y))
        self.designs.append(np.array(xi, dtype=float))

    def __len__(self):
        return len(self.observations)

    def pairs(self):
        return list(zip(self.observations, self.designs))

    def prefix(self, k):
        return History(list(self.observations[:k]), [d.copy() for d in self.designs[:k]])


class Model:
    """Base class.  Subclasses fill in the closed-form pieces."""

    name = "model"
    d_theta = 0
    d_xi = 0

    def __init__(self, bounds):
        bounds = np.array(bounds, dtype=float)
        if bounds.shape != (self.d_xi, 2):
            raise ValueError(f"bounds must have shape ({self.d_xi}, 2), got {bounds.shape}")
        if not np.all(bounds[:, 0] < bounds[:, 1]):
            raise ValueError("design box must satisfy lo < hi in every coordinate")
        self.bounds = bounds

    # -- design space ---------------------------------------------------
    def project(self, xi):
        return np.clip(xi, self.bounds[:, 0], self.bounds[:, 1])

    def sample_design(self, rng):
        return rng.uniform(self.bounds[:, 0], self.bounds[:, 1])

    # -- prior ----------------------------------------------------------
    def sample_prior(self, rng, n):
        raise NotImplementedError

    def log_prior(self, theta):
        raise NotImplementedError

    # -- likelihood -----------------------------------------------------
    def log_likelihood(self, y, theta, xi):
        raise NotImplementedError

    def simulate(self, theta, xi, u):
        raise NotImplementedError

    def grad_design(self, y, theta, xi):
        """Partial derivative of the log-likelihood in ``xi`` at fixed ``y``."""
        raise NotImplementedError

    def grad_obs(self, y, theta, xi):
        """Partial derivative of the log-likelihood in ``y``."""
        raise NotImplementedError

    def sim_grad_design(self, theta, xi, u):
        """Jacobian of ``simulate`` with respect to ``xi`` at fixed noise."""
        raise NotImplementedError

    def loglik_and_grads(self, y, theta, xi):
        """``(log_likelihood, grad_design, grad_obs)`` in one call."""
        return (self.log_likelihood(y, theta, xi), self.grad_design(y, theta, xi),
                self.grad_obs(y, theta, xi))

    def simulate_with_grad(self, theta, xi, u):
        """``(simulate, sim_grad_design)`` in one call."""
        return self.simulate(theta, xi, u), self.sim_grad_design(theta, xi, u)

    def log_likelihood_history(self, theta, history):
        """Sum of log-likelihoods of all pairs in ``history``."""
        theta = np.asarray(theta, dtype=float)
        out = np.zeros(theta.shape[:-1])
        for y, xi in history.pairs():
            out = out + self.log_likelihood(y, theta, xi)
        return out

    # -- reparametrisation for the MH kernel ----------------------------
    def to_unconstrained(self, theta):
        """Return ``(z, log_jacobian)`` where ``log_jacobian = log|det dtheta/dz|``."""
        theta = np.asarray(theta, dtype=float)
        return theta.copy(), np.zeros(theta.shape[:-1])

    def from_unconstrained(self, z):
        return np.asarray(z, dtype=float).copy()

    def log_jacobian(self, z):
        z = np.asarray(z, dtype=float)
        return np.zeros(z.shape[:-1])

    @property
    def d_unconstrained(self):
        return self.d_theta

    # -- bookkeeping ----------------------------------------------------
    def param_blocks(self):
        """Named slices used for per-block posterior diagnostics."""
        return {"theta": slice(0, self.d_theta)}

    def exchangeable_blocks(self):
        """Equal-sized parameter blocks whose relabelling leaves the likelihood unchanged."""
        return []

    def constants(self):
        return {}


class LinearGaussian(Model):
    """Scalar conjugate model ``y = xi * theta + sigma * u``, ``theta ~ N(0, prior_std^2)``."""

    name = "lingauss"
    d_theta = 1
    d_xi = 1

    def __init__(self, prior_std=1.0, sigma=1.0, bounds=((-3.0, 3.0),)):
        super().__init__(bounds)
        self.prior_std = float(prior_std)
        self.sigma = float(sigma)

    def constants(self):
        return {"prior_std": self.prior_std, "sigma": self.sigma, "bounds": self.bounds.tolist()}

    def sample_prior(self, rng, n):
        return self.prior_std * rng.standard_normal((n, 1))

    def log_prior(self, theta):
        t = np.asarray(theta, dtype=float)[..., 0]
        return -0.5 * (t / self.prior_std) ** 2 - np.log(self.prior_std) - _LOG_SQRT_2PI

    def _resid(self, y, theta, xi):
        t = np.asarray(theta, dtype=float)[..., 0]
        x = np.asarray(xi, dtype=float)[..., 0]
        return np.asarray(y, dtype=float) - x * t, t

    def log_likelihood(self, y, theta, xi):
        r, _ = self._resid(y, theta, xi)
        return -0.5 * (r / self.sigma) ** 2 - np.log(self.sigma) - _LOG_SQRT_2PI

    def simulate(self, theta, xi, u):
        t = np.asarray(theta, dtype=float)[..., 0]
        x = np.asarray(xi, dtype=float)[..., 0]
        return x * t + self.sigma * np.asarray(u, dtype=float)

    def grad_design(self, y, theta, xi):
        r, t = self._resid(y, theta, xi)
        return (t * r / self.sigma**2)[..., None]

    def grad_obs(self, y, theta, xi):
        r, _ = self._resid(y, theta, xi)
        return -r / self.sigma**2

    def sim_grad_design(self, theta, xi, u):
        t = np.asarray(theta, dtype=float)[..., 0]
        shape = np.broadcast_shapes(t.shape, np.shape(u), np.shape(xi)[:-1])
        return np.broadcast_to(t, shape)[..., None].copy()

    # closed forms used by the oracles
    def posterior(self, history):
        """Conjugate posterior ``(mean, variance)`` given ``history``."""
        prec = 1.0 / self.prior_std**2
        lin = 0.0
        for y, xi in history.pairs():
            prec += xi[0] ** 2 / self.sigma**2
            lin += xi[0] * y / self.sigma**2
        return lin / prec, 1.0 / prec

    def eig(self, designs):
        """Total expected information gain of a design sequence (in nats)."""
        s = sum(float(np.asarray(x)[0]) ** 2 for x in designs)
        return 0.5 * np.log1p(s * self.prior_std**2 / self.sigma**2)


class SourceLocation(Model):
    """Location finding with ``S`` sources in the plane.

    The measured intensity is log-normal around
    ``mu = b + sum_s alpha_s / (m + |theta_s - xi|^2)``.
    """

    name = "sources"
    d_xi = 2

    def __init__(self, n_sources=2, alpha=None, b=0.1, m=1e-4, sigma=0.5,
                 prior_std=1.0, bounds=((-10.0, 10.0), (-10.0, 10.0))):
        self.n_sources = int(n_sources)
        self.d_theta = 2 * self.n_sources
        super().__init__(bounds)
        if alpha is None:
            alpha = [1.0] * self.n_sources
        self.alpha = np.array(alpha, dtype=float)
        if self.alpha.shape != (self.n_sources,):
            raise ValueError("need one amplitude alpha per source")
        self.b = float(b)
        self.m = float(m)
        self.sigma = float(sigma)
        self.prior_std = float(prior_std)
        if self.sigma <= 0 or self.prior_std <= 0 or self.m <= 0:
            raise ValueError("sigma, prior_std and m must be positive")

    def constants(self):
        return {"n_sources": self.n_sources, "alpha": self.alpha.tolist(), "b": self.b,
                "m": self.m, "sigma": self.sigma, "prior_std": self.prior_std,
                "bounds": self.bounds.tolist()}

    def param_blocks(self):
        return {f"source_{s}": slice(2 * s, 2 * s + 2) for s in range(self.n_sources)}

    def exchangeable_blocks(self):
        # equal intensities make the likelihood symmetric under relabelling sources
        if np.all(self.alpha == self.alpha[0]):
            return list(self.param_blocks().values())
        return []

    def sample_prior(self, rng, n):
        return self.prior_std * rng.standard_normal((n, self.d_theta))

    def log_prior(self, theta):
        t = np.asarray(theta, dtype=float) / self.prior_std
        return -0.5 * np.sum(t**2, axis=-1) - self.d_theta * (np.log(self.prior_std) + _LOG_SQRT_2PI)

    def _mean(self, theta, xi, grad=False):
        theta = np.asarray(theta, dtype=float)
        xi = np.asarray(xi, dtype=float)
        x0, x1 = xi[..., 0], xi[..., 1]
        mu = self.b
        dmu0 = dmu1 = 0.0
        for s in range(self.n_sources):
            d0 = theta[..., 2 * s] - x0
            d1 = theta[..., 2 * s + 1] - x1
            inv = 1.0 / (self.m + d0 * d0 + d1 * d1)
            mu = mu + self.alpha[s] * inv
            if grad:
                c = 2.0 * self.alpha[s] * inv * inv
                dmu0 = dmu0 + c * d0
                dmu1 = dmu1 + c * d1
        if not grad:
            return mu
        return mu, np.stack(np.broadcast_arrays(dmu0, dmu1), axis=-1)

    def signal_mean(self, theta, xi):
        return self._mean(theta, xi)

    def _check(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(~(y > 0)):
            raise InvalidObservationError("source-location observations must be positive")
        return y

    def log_likelihood(self, y, theta, xi):
        y = self._check(y)
        logy = np.log(y)
        r = logy - np.log(self._mean(theta, xi))
        return -0.5 * (r / self.sigma) ** 2 - logy - np.log(self.sigma) - _LOG_SQRT_2PI

    def simulate(self, theta, xi, u):
        return np.exp(np.log(self._mean(theta, xi)) + self.sigma * np.asarray(u, dtype=float))

    def grad_design(self, y, theta, xi):
        y = self._check(y)
        mu, dmu = self._mean(theta, xi, grad=True)
        r = np.log(y) - np.log(mu)
        return (r / (self.sigma**2 * mu))[..., None] * dmu

    def grad_obs(self, y, theta, xi):
        y = self._check(y)
        r = np.log(y) - np.log(self._mean(theta, xi))
        return -(1.0 + r / self.sigma**2) / y

    def sim_grad_design(self, theta, xi, u):
        return self.simulate_with_grad(theta, xi, u)[1]

    def simulate_with_grad(self, theta, xi, u):
        mu, dmu = self._mean(theta, xi, grad=True)
        y = np.exp(np.log(mu) + self.sigma * np.asarray(u, dtype=float))
        return y, (y / mu)[..., None] * dmu

    def loglik_and_grads(self, y, theta, xi):
        y = self._check(y)
        mu, dmu = self._mean(theta, xi, grad=True)
        logy = np.log(y)
        r = logy - np.log(mu)
        rs = r / self.sigma**2
        ll = -0.5 * r * rs - logy - np.log(self.sigma) - _LOG_SQRT_2PI
        return ll, (rs / mu)[..., None] * dmu, -(1.0 + rs) / y


def _log_ndtr_tail(x, threshold):
    """log of the standard normal CDF, first-order tail formula below ``-threshold``."""
    x = np.asarray(x, dtype=float)
    tail = x < -threshold
    xs = np.where(tail, x, 0.0)
    approx = -0.5 * xs**2 - _LOG_SQRT_2PI - np.log(np.abs(np.where(tail, xs, 1.0)))
    return np.where(tail, approx, special.log_ndtr(np.where(tail, 0.0, x)))


def _dlog_ndtr_tail(x, threshold):
    """Derivative of ``_log_ndtr_tail``."""
    x = np.asarray(x, dtype=float)
    tail = x < -threshold
    xs = np.where(tail, x, 1.0)
    xn = np.where(tail, 0.0, x)
    exact = np.exp(-0.5 * xn**2 - _LOG_SQRT_2PI - special.log_ndtr(xn))
    return np.where(tail, -xs - 1.0 / xs, exact)


class CES(Model):
    """Constant elasticity of substitution rating model.

    ``theta = (rho, alpha_1, alpha_2, alpha_3, u)``; the design stacks two
    baskets of three goods.  The rating is a sigmoid of a Gaussian latent,
    censored to ``[eps, 1 - eps]``, so the likelihood mixes two point masses
    with a logit-normal density on the interior.
    """

    name = "ces"
    d_theta = 5
    d_xi = 6

    def __init__(self, eps=2.0**-22, tau=0.005, rho_a=1.0, rho_b=1.0,
                 alpha_conc=(1.0, 1.0, 1.0), log_u_loc=1.0, log_u_scale=3.0,
                 tail_threshold=8.0, basket_floor=1e-10, bounds=None):
        if bounds is None:
            bounds = [[0.0, 100.0]] * 6
        super().__init__(bounds)
        self.eps = float(eps)
        self.tau = float(tau)
        self.rho_a = float(rho_a)
        self.rho_b = float(rho_b)
        self.alpha_conc = np.array(alpha_conc, dtype=float)
        self.log_u_loc = float(log_u_loc)
        self.log_u_scale = float(log_u_scale)
        self.tail_threshold = float(tail_threshold)
        self.basket_floor = float(basket_floor)
        self.logit_lo = float(special.logit(self.eps))
        self.logit_hi = float(special.logit(1.0 - self.eps))

    def constants(self):
        return {"eps": self.eps, "tau": self.tau, "rho_a": self.rho_a, "rho_b": self.rho_b,
                "alpha_conc": self.alpha_conc.tolist(), "log_u_loc": self.log_u_loc,
                "log_u_scale": self.log_u_scale, "tail_threshold": self.tail_threshold,
                "basket_floor": self.basket_floor, "bounds": self.bounds.tolist()}

    def param_blocks(self):
        return {"rho": slice(0, 1), "alpha": slice(1, 4), "u": slice(4, 5)}

    # -- prior ----------------------------------------------------------
    def sample_prior(self, rng, n):
        rho = rng.beta(self.rho_a, self.rho_b, size=n)
        alpha = rng.dirichlet(self.alpha_conc, size=n)
        u = np.exp(self.log_u_loc + self.log_u_scale * rng.standard_normal(n))
        return np.column_stack([rho, alpha, u])

    def in_support(self, theta):
        theta = np.asarray(theta, dtype=float)
        rho, alpha, u = theta[..., 0], theta[..., 1:4], theta[..., 4]
        ok = (rho > 0) & (rho < 1) & (u > 0) & np.all(alpha > 0, axis=-1)
        ok &= np.abs(np.sum(alpha, axis=-1) - 1.0) < 1e-8
        return ok & np.all(np.isfinite(theta), axis=-1)

    def log_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        ok = self.in_support(theta)
        safe = np.where(ok[..., None], theta, [0.5, 1 / 3, 1 / 3, 1 / 3, 1.0])
        rho, alpha, u = safe[..., 0], safe[..., 1:4], safe[..., 4]
        c = self.alpha_conc
        lp = ((self.rho_a - 1) * np.log(rho) + (self.rho_b - 1) * np.log1p(-rho)
              - special.betaln(self.rho_a, self.rho_b))
        lp = lp + special.gammaln(c.sum()) - special.gammaln(c).sum() + np.sum((c - 1) * np.log(alpha), axis=-1)
        logu = np.log(u)
        lp = lp - logu - np.log(self.log_u_scale) - _LOG_SQRT_2PI - 0.5 * ((logu - self.log_u_loc) / self.log_u_scale) ** 2
        return np.where(ok, lp, -np.inf)

    # -- transforms -----------------------------------------------------
    @property
    def d_unconstrained(self):
        return 4

    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        rho, a, u = theta[..., 0], theta[..., 1:4], theta[..., 4]
        z = np.stack([special.logit(rho), np.log(a[..., 0] / a[..., 2]),
                      np.log(a[..., 1] / a[..., 2]), np.log(u)], axis=-1)
        return z, self.log_jacobian(z)

    def from_unconstrained(self, z):
        z = np.asarray(z, dtype=float)
        rho = special.expit(z[..., 0])
        logits = np.stack([z[..., 1], z[..., 2], np.zeros_like(z[..., 0])], axis=-1)
        alpha = np.exp(logits - special.logsumexp(logits, axis=-1, keepdims=True))
        return np.concatenate([rho[..., None], alpha, np.exp(z[..., 3])[..., None]], axis=-1)

    def log_jacobian(self, z):
        z = np.asarray(z, dtype=float)
        logits = np.stack([z[..., 1], z[..., 2], np.zeros_like(z[..., 0])], axis=-1)
        log_alpha = logits - special.logsumexp(logits, axis=-1, keepdims=True)
        return (special.log_expit(z[..., 0]) + special.log_expit(-z[..., 0])
                + np.sum(log_alpha, axis=-1) + z[..., 3])

    # -- utility and latent moments --------------------------------------
    @staticmethod
    def utility(alpha, rho, basket):
        """CES utility ``(sum_i alpha_i basket_i^rho)^(1/rho)``."""
        alpha = np.asarray(alpha, dtype=float)
        rho = np.asarray(rho, dtype=float)
        basket = np.asarray(basket, dtype=float)
        s = np.sum(alpha * basket ** rho[..., None], axis=-1)
        return s ** (1.0 / rho)

    def _utility_grad(self, alpha, rho, basket):
        # dU/db_i = alpha_i b_i^(rho-1) S^(1/rho - 1)
        s = np.sum(alpha * basket ** rho[..., None], axis=-1)
        b = np.maximum(basket, self.basket_floor)
        return alpha * b ** (rho[..., None] - 1.0) * (s ** (1.0 / rho - 1.0))[..., None]

    def _latent(self, theta, xi, grad=False):
        theta = np.asarray(theta, dtype=float)
        xi = np.asarray(xi, dtype=float)
        rho, alpha, u = theta[..., 0], theta[..., 1:4], theta[..., 4]
        x1, x2 = xi[..., :3], xi[..., 3:]
        mu = (self.utility(alpha, rho, x1) - self.utility(alpha, rho, x2)) * u
        delta = x1 - x2
        dist = np.sqrt(np.sum(delta**2, axis=-1))
        sigma = (1.0 + dist) * self.tau * u
        if not grad:
            return mu, sigma
        dmu = np.concatenate([self._utility_grad(alpha, rho, x1),
                              -self._utility_grad(alpha, rho, x2)], axis=-1) * u[..., None]
        unit = delta / np.where(dist > 0, dist, 1.0)[..., None]
        ds1 = (self.tau * u)[..., None] * unit
        dsigma = np.concatenate([ds1, -ds1], axis=-1)
        return mu, sigma, dmu, dsigma

    def _branches(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(~((y >= self.eps) & (y <= 1.0 - self.eps))):
            raise InvalidObservationError(f"CES observations must lie in [{self.eps}, 1 - {self.eps}]")
        lo = y <= self.eps
        hi = y >= 1.0 - self.eps
        return y, lo, hi, ~(lo | hi)

    def censoring_log_masses(self, theta, xi):
        """``(log p0, log p1)``: log masses of the two censoring atoms."""
        mu, sigma = self._latent(theta, xi)
        return (_log_ndtr_tail((self.logit_lo - mu) / sigma, self.tail_threshold),
                _log_ndtr_tail((mu - self.logit_hi) / sigma, self.tail_threshold))

    def log_likelihood(self, y, theta, xi):
        y, lo, hi, mid = self._branches(y)
        mu, sigma = self._latent(theta, xi)
        ys = np.where(mid, y, 0.5)
        z = (special.logit(ys) - mu) / sigma
        interior = -np.log(sigma) - _LOG_SQRT_2PI - 0.5 * z**2 - np.log(ys) - np.log1p(-ys)
        lp0 = _log_ndtr_tail((self.logit_lo - mu) / sigma, self.tail_threshold)
        lp1 = _log_ndtr_tail((mu - self.logit_hi) / sigma, self.tail_threshold)
        return np.where(lo, lp0, np.where(hi, lp1, interior))

    def simulate(self, theta, xi, u):
        mu, sigma = self._latent(theta, xi)
        eta = mu + sigma * np.asarray(u, dtype=float)
        return np.clip(special.expit(eta), self.eps, 1.0 - self.eps)

    def grad_design(self, y, theta, xi):
        return self.loglik_and_grads(y, theta, xi)[1]

    def loglik_and_grads(self, y, theta, xi):
        y, lo, hi, mid = self._branches(y)
        mu, sigma, dmu, dsigma = self._latent(theta, xi, grad=True)
        ys = np.where(mid, y, 0.5)
        z = (special.logit(ys) - mu) / sigma
        x0 = (self.logit_lo - mu) / sigma
        x1 = (mu - self.logit_hi) / sigma
        interior = -np.log(sigma) - _LOG_SQRT_2PI - 0.5 * z**2 - np.log(ys) - np.log1p(-ys)
        ll = np.where(lo, _log_ndtr_tail(x0, self.tail_threshold),
                      np.where(hi, _log_ndtr_tail(x1, self.tail_threshold), interior))
        h0 = _dlog_ndtr_tail(x0, self.tail_threshold)
        h1 = _dlog_ndtr_tail(x1, self.tail_threshold)
        d_mu = np.where(lo, -h0 / sigma, np.where(hi, h1 / sigma, z / sigma))
        d_sigma = np.where(lo, -h0 * x0 / sigma, np.where(hi, -h1 * x1 / sigma, (z**2 - 1.0) / sigma))
        g_design = d_mu[..., None] * dmu + d_sigma[..., None] * dsigma
        g_obs = np.where(mid, -z / (sigma * ys * (1.0 - ys)) - 1.0 / ys + 1.0 / (1.0 - ys), 0.0)
        return ll, g_design, g_obs

    def grad_obs(self, y, theta, xi):
        y, lo, hi, mid = self._branches(y)
        mu, sigma = self._latent(theta, xi)
        ys = np.where(mid, y, 0.5)
        z = (special.logit(ys) - mu) / sigma
        g = -z / (sigma * ys * (1.0 - ys)) - 1.0 / ys + 1.0 / (1.0 - ys)
        return np.where(mid, g, 0.0)

    def sim_grad_design(self, theta, xi, u):
        return self.simulate_with_grad(theta, xi, u)[1]

    def simulate_with_grad(self, theta, xi, u):
        mu, sigma, dmu, dsigma = self._latent(theta, xi, grad=True)
        u = np.asarray(u, dtype=float)
        y = np.clip(special.expit(mu + sigma * u), self.eps, 1.0 - self.eps)
        inside = (y > self.eps) & (y < 1.0 - self.eps)
        dy = (y * (1.0 - y))[..., None] * (dmu + u[..., None] * dsigma)
        return y, np.where(inside[..., None], dy, 0.0)


MODELS = {cls.name: cls for cls in (LinearGaussian, SourceLocation, CES)}


def make_model(name, **constants):
    """Instantiate a model by its registry name (``lingauss``, ``sources``, ``ces``)."""
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**constants)
