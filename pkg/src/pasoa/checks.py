"""Quick self-checks run by ``pasoa check``.

A small, fast subset of the test-suite oracles: gradient-vs-finite-difference,
the contrastive bound cap, CES mixture normalisation, ESS control of the
tempering schedule and the conjugate posterior of the linear-Gaussian model.
"""

import numpy as np
from scipy import integrate, special

from ._math import logsumexp
from .contrastive import ContrastiveSet, pce_integrand, pce_sample_gradient
from .evaluation import posterior_moments
from .models import CES, History, LinearGaussian, SourceLocation
from .smc import TemperConfig, initial_cloud, temper_to_posterior

__all__ = ["fd_total_gradient", "ces_interior_mass", "run_checks"]


def fd_total_gradient(model, xi, cs, u, h=1e-5):
    """Central differences of ``xi -> F(xi, cs, simulate(theta_0, xi, u))``."""
    xi = np.asarray(xi, dtype=float)
    g = np.zeros_like(xi)
    for j in range(xi.size):
        e = np.zeros_like(xi)
        e[j] = h
        fp = pce_integrand(model, xi + e, cs, model.simulate(cs.theta_0, xi + e, u))
        fm = pce_integrand(model, xi - e, cs, model.simulate(cs.theta_0, xi - e, u))
        g[j] = (fp - fm) / (2 * h)
    return g


def _grad_close(a, b, rtol=1e-4):
    atol = rtol * max(np.max(np.abs(b)), 1e-12)
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.abs(b)))


def _check_gradients(rng, n=10):
    ok = True
    for model in (LinearGaussian(), SourceLocation()):
        for _ in range(n):
            L = 5
            th = model.sample_prior(rng, L + 1)
            xi = model.sample_design(rng)
            cs = ContrastiveSet(th[0], th[1:])
            u = rng.standard_normal()
            ok &= _grad_close(pce_sample_gradient(model, xi, cs, u), fd_total_gradient(model, xi, cs, u))
    return ok


def _check_bound(rng, n=1000):
    model = SourceLocation()
    L = 10
    for _ in range(n):
        th = model.sample_prior(rng, L + 1)
        xi = model.sample_design(rng)
        y = model.simulate(th[0], xi, rng.standard_normal())
        if pce_integrand(model, xi, ContrastiveSet(th[0], th[1:]), y) > np.log(L + 1):
            return False
    return True


def ces_interior_mass(model, theta, xi):
    """Quadrature of the interior density over ``(eps, 1 - eps)``.

    Integrated in the logit coordinate ``y = expit(eta)``, with breakpoints
    around the latent mean where the density is peaked.
    """
    mu, sigma = (float(v) for v in model._latent(theta, xi))
    a, b = model.logit_lo, model.logit_hi

    def f(eta):
        y = float(np.clip(special.expit(eta), model.eps, 1.0 - model.eps))
        if not model.eps < y < 1.0 - model.eps:
            return 0.0
        return float(np.exp(model.log_likelihood(y, theta, xi))) * y * (1.0 - y)

    pts = [p for p in (mu - 5 * sigma, mu, mu + 5 * sigma) if a < p < b]
    return integrate.quad(f, a, b, points=pts or None, limit=500)[0]


def _check_ces_normalisation(rng, n=5):
    model = CES()
    worst = 0.0
    for _ in range(n):
        theta = model.sample_prior(rng, 1)[0]
        theta[4] = np.exp(rng.uniform(-2.0, 2.0))
        xi = model.sample_design(rng)
        lp0, lp1 = model.censoring_log_masses(theta, xi)
        worst = max(worst, abs(np.exp(lp0) + np.exp(lp1) + ces_interior_mass(model, theta, xi) - 1.0))
    return worst < 1e-3


def _check_ess(rng):
    model = SourceLocation()
    m = 2000
    cfg = TemperConfig()
    cloud = initial_cloud(model, rng, m)
    theta_star = model.sample_prior(rng, 1)[0]
    history = History()
    for _ in range(3):
        xi = model.sample_design(rng)
        y = float(model.simulate(theta_star, xi, rng.standard_normal()))
        cloud, trace = temper_to_posterior(model, cloud, y, xi, history, cfg, rng)
        history.append(y, xi)
        for ess in trace.ess_values[:-1]:
            if abs(ess - cfg.ess_min_fraction * m) > max(1.0, 1e-6 * m):
                return False
        if trace.lambdas[-1] != 1.0 or np.any(np.diff(trace.lambdas) <= 0):
            return False
    return abs(logsumexp(cloud.log_weights)) < 1e-9


def _check_conjugate(rng):
    model = LinearGaussian()
    cloud = initial_cloud(model, rng, 20_000)
    history = History()
    for xi in (1.0, -2.0, 0.5):
        y = float(model.simulate(np.array([0.7]), np.array([xi]), rng.standard_normal()))
        cloud, _ = temper_to_posterior(model, cloud, y, np.array([xi]), history, TemperConfig(), rng)
        history.append(y, [xi])
    mean, cov = posterior_moments(cloud)
    m_exact, v_exact = model.posterior(history)
    return abs(mean[0] - m_exact) < 0.05 * max(1.0, abs(m_exact)) and abs(cov[0, 0] / v_exact - 1) < 0.05


CHECKS = (
    ("pce gradient matches finite differences", _check_gradients),
    ("pce integrand <= log(L+1)", _check_bound),
    ("ces mixture integrates to one", _check_ces_normalisation),
    ("tempering hits the ESS target", _check_ess),
    ("lingauss posterior matches conjugate update", _check_conjugate),
)


def run_checks(seed=0, out=print):
    """Run every quick check; returns True when all pass."""
    rng = np.random.default_rng(seed)
    all_ok = True
    for name, fn in CHECKS:
        ok = bool(fn(rng))
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}")
    return all_ok
