"""Isotropic Gaussian mixtures and the closed-form bridge quantities built on them.

These serve two roles: experiment targets, and exact oracles for the learned
estimators and the integrator (smoothed densities, scores, the density ratio
against the Gaussian reference, and both bridge drifts).
"""

from __future__ import annotations

import configparser
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .rng import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k,) isotropic per component

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        var = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if not (len(w) == len(mu) == len(var) >= 1):
            raise ValueError("weights, means and variances must have the same nonzero length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def k(self) -> int:
        return len(self.weights)

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        """``n`` i.i.d. draws as an ``(n, d)`` array."""
        if n < 0:
            raise ValueError("n must be nonnegative")
        comp = rng.choice(self.k, size=n, p=self.weights)
        z = rng.normal((n, self.d))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * z

    def smooth(self, s: float) -> GaussianMixture:
        """Convolution with N(0, s^2 I)."""
        if s < 0:
            raise ValueError("smoothing std must be nonnegative")
        return GaussianMixture(self.weights, self.means, self.variances + s * s)

    def _component_terms(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[1] != self.d:
            raise ValueError(f"points have dimension {x2.shape[1]}, mixture has {self.d}")
        diff = self.means[None, :, :] - x2[:, None, :]  # (n, k, d)
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        logc = logw - 0.5 * self.d * np.log(2 * np.pi * self.variances) - 0.5 * sq / self.variances
        return logc, diff, single

    def log_pdf(self, x):
        logc, _, single = self._component_terms(x)
        out = logsumexp(logc, axis=1)
        return out[0] if single else out

    def score(self, x):
        """Gradient of ``log_pdf`` in ``x``."""
        logc, diff, single = self._component_terms(x)
        resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
        out = np.einsum("nk,nkd->nd", resp / self.variances, diff)
        return out[0] if single else out


def gmm_sample(g: GaussianMixture, n: int, rng: Rng) -> np.ndarray:
    return g.sample(n, rng)


def gmm_smooth(g: GaussianMixture, s: float) -> GaussianMixture:
    return g.smooth(s)


def gmm_log_pdf(g: GaussianMixture, x):
    return g.log_pdf(x)


def gmm_score(g: GaussianMixture, x):
    return g.score(x)


def iso_log_pdf(variance: float, x):
    """Log density of N(0, variance I) at ``x`` (vector or batch)."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    return -0.5 * d * np.log(2 * np.pi * variance) - 0.5 * np.sum(x * x, axis=-1) / variance


def heat_kernel(tau: float, s: float, x, t: float, y) -> float:
    """Transition density of sqrt(tau)-scaled Brownian motion from (s, x) to (t, y)."""
    if t <= s:
        raise ValueError("heat kernel requires t > s")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    var = tau * (t - s)
    sq = np.sum((x - y) ** 2, axis=-1)
    return (2 * np.pi * var) ** (-x.shape[-1] / 2) * np.exp(-sq / (2 * var))


def log_density_ratio_exact(g: GaussianMixture, sigma: float, tau: float, x):
    """``log q_sigma(x) - log N(x; 0, tau I)``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return g.smooth(sigma).log_pdf(x) - iso_log_pdf(tau, x)


def density_ratio_exact(g: GaussianMixture, sigma: float, tau: float, x):
    lr = log_density_ratio_exact(g, sigma, tau, x)
    with np.errstate(over="ignore"):
        out = np.exp(lr)
    if np.any(np.isinf(out)):
        log.warning("density ratio overflowed to +inf at %d point(s)", int(np.sum(np.isinf(out))))
    return out


def drift_stage2_exact(g: GaussianMixture, sigma: float, t: float, x):
    """Score of the target smoothed at std ``sqrt(1 - t) * sigma``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return g.smooth(math.sqrt(1.0 - t) * sigma).score(x)


def drift_stage1_exact(g: GaussianMixture, sigma: float, tau: float, t: float, x):
    """Gradient of ``log E_{z ~ N(0, tau I)} f(x + sqrt(1 - t) z)`` in closed form.

    Per component ``N(mu, v)`` of the smoothed target, with ``a = (1 - t) tau``,
    ``s = v a / (v + a)`` and ``m = (a mu + v x) / (v + a)``::

        log E_i = log N(mu; x, (v + a) I) + |m|^2 / (2 (tau - s))
                  - d/2 log(1 - s / tau) + const

    and the drift is the responsibility-weighted sum of the per-component
    gradients ``(mu - x)/(v + a) + v m / ((v + a)(tau - s))``.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must lie in [0, 1), got {t}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    d = g.d
    v = g.variances + sigma * sigma  # (k,)
    a = (1.0 - t) * tau
    va = v + a
    s = v * a / va
    mu = g.means  # (k, d)
    m = (a * mu[None, :, :] + v[None, :, None] * x2[:, None, :]) / va[None, :, None]  # (n, k, d)
    diff = mu[None, :, :] - x2[:, None, :]
    sq_diff = np.einsum("nkd,nkd->nk", diff, diff)
    sq_m = np.einsum("nkd,nkd->nk", m, m)
    with np.errstate(divide="ignore"):
        logw = np.log(g.weights)
    log_e = (
        logw
        - 0.5 * d * np.log(2 * np.pi * va)
        - 0.5 * sq_diff / va
        + 0.5 * sq_m / (tau - s)
        - 0.5 * d * np.log1p(-s / tau)
    )
    resp = np.exp(log_e - logsumexp(log_e, axis=1, keepdims=True))
    grad = diff / va[None, :, None] + (v / (va * (tau - s)))[None, :, None] * m
    out = np.einsum("nk,nkd->nd", resp, grad)
    return out[0] if single else out


def six_modes(radius: float = 5.0, variance: float = 0.01) -> GaussianMixture:
    """Six equal-weight modes on a circle at angles k * 60 degrees."""
    angles = np.deg2rad(60.0 * np.arange(6))
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(np.full(6, 1 / 6), means, np.full(6, variance))


def gauss_1d(variance: float = 1.0) -> GaussianMixture:
    return GaussianMixture(np.ones(1), np.zeros((1, 1)), np.array([variance]))


def matched_variance(sigma: float, tau: float, d: int = 2) -> GaussianMixture:
    """Target whose sigma-smoothing equals the reference N(0, tau I), so f == 1."""
    if tau <= sigma * sigma:
        raise ValueError("matched-variance target needs tau > sigma^2")
    return GaussianMixture(np.ones(1), np.zeros((1, d)), np.array([tau - sigma * sigma]))


def preset(name: str, sigma: float = 1.0, tau: float = 5.0) -> GaussianMixture:
    if name == "six-modes":
        return six_modes()
    if name == "gauss-1d":
        return gauss_1d()
    if name == "matched-variance":
        return matched_variance(sigma, tau)
    raise ValueError(f"unknown preset {name!r}")


PRESETS = ("six-modes", "gauss-1d", "matched-variance")


def mixture_to_text(g: GaussianMixture) -> str:
    """Key-value text form::

        [mixture]
        d = 2
        weights = 0.5, 0.5
        means = 1.0 0.0; -1.0 0.0
        variances = 0.01, 0.01
    """
    means = "; ".join(" ".join(repr(float(c)) for c in row) for row in g.means)
    return (
        "[mixture]\n"
        f"d = {g.d}\n"
        f"weights = {', '.join(repr(float(w)) for w in g.weights)}\n"
        f"means = {means}\n"
        f"variances = {', '.join(repr(float(v)) for v in g.variances)}\n"
    )


def mixture_from_text(text: str) -> GaussianMixture:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    sec = cp["mixture"]
    d = sec.getint("d")
    weights = np.array([float(w) for w in sec["weights"].split(",")])
    means = np.array([[float(c) for c in row.split()] for row in sec["means"].split(";")])
    variances = np.array([float(v) for v in sec["variances"].split(",")])
    if means.shape[1] != d:
        raise ValueError(f"means have dimension {means.shape[1]}, header says d = {d}")
    # normalize away text rounding
    weights = weights / weights.sum()
    return GaussianMixture(weights, means, variances)


def load_mixture(path) -> GaussianMixture:
    with open(path) as fh:
        return mixture_from_text(fh.read())
