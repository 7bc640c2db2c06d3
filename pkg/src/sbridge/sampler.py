"""Two-stage bridge sampler: point mass -> q_sigma -> target, by Euler-Maruyama.

Particles are processed in fixed-size blocks. Block ``b`` of a stage draws all
of its randomness from ``rng.child(stage_key, b)``, so results do not depend on
how many threads run the blocks.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .mixtures import GaussianMixture, density_ratio_exact, drift_stage1_exact
from .rng import Rng

log = logging.getLogger(__name__)

STAGE1_KEY = 1
STAGE2_KEY = 2
PRIOR_KEY = 3


class ParticleError(FloatingPointError):
    """A particle left the finite reals during integration."""


class ExactScore:
    """Closed-form score of a Gaussian-mixture target smoothed at any level."""

    def __init__(self, g: GaussianMixture):
        self.g = g
        self.d = g.d

    def score(self, x, sigma_tilde, clamp: bool = False):
        st = float(np.max(sigma_tilde)) if np.ndim(sigma_tilde) else float(sigma_tilde)
        return self.g.smooth(st).score(x)


class ExactRatio:
    """Closed-form q_sigma / N(0, tau I) for a Gaussian-mixture target."""

    def __init__(self, g: GaussianMixture, sigma: float, tau: float):
        self.g, self.sigma, self.tau = g, sigma, tau

    def ratio(self, x):
        return density_ratio_exact(self.g, self.sigma, self.tau, x)


@dataclass
class BridgeConfig:
    sigma: float = 1.0
    tau: float = 5.0
    n1: int = 1000
    n2: int = 1000
    n3: int = 1
    seed: int = 0
    final_denoise: bool = False
    drift_source: GaussianMixture | None = None  # None means learned estimators
    block_size: int = 1024
    threads: int = 1

    def __post_init__(self):
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("sigma and tau must be positive")
        if self.n1 < 1 or self.n2 < 1 or self.n3 < 1:
            raise ValueError("n1, n2, n3 must be >= 1")
        if self.block_size < 1 or self.threads < 1:
            raise ValueError("block_size and threads must be >= 1")
        if self.tau < self.sigma**2:
            log.warning("tau=%g < sigma^2=%g", self.tau, self.sigma**2)

    @property
    def exact(self) -> bool:
        return self.drift_source is not None


@dataclass
class ParticleBatch:
    positions: np.ndarray
    stage: str  # "one", "two" or "done"
    step_index: int
    trajectory: list[tuple[str, int, np.ndarray]] = field(default_factory=list)


@dataclass
class InpaintTask:
    y: np.ndarray
    mask: np.ndarray
    config: BridgeConfig

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=np.float64)
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        self.mask = np.broadcast_to(mask, self.y.shape).copy()
        self.y = np.where(self.mask == 1, self.y, 0.0)


def _check_finite(x, stage: str, step: int):
    if not np.all(np.isfinite(x)):
        raise ParticleError(f"non-finite particle in stage {stage} at step {step}")


def _map_blocks(fn, n: int, block_size: int, threads: int):
    slices = [slice(i, min(i + block_size, n)) for i in range(0, n, block_size)]
    jobs = list(enumerate(slices))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda job: fn(*job), jobs))
    return [fn(b, sl) for b, sl in jobs]


def _merge(results, stage: str, d: int):
    if not results:
        return np.empty((0, d)), []
    positions = np.concatenate([r[0] for r in results])
    traj = []
    for i, (step, _) in enumerate(results[0][1]):
        traj.append((stage, step, np.concatenate([r[1][i][1] for r in results])))
    return positions, traj


def _dim(cfg: BridgeConfig, score) -> int:
    return cfg.drift_source.d if cfg.exact else score.d


def stage1_drift(ratio, score, x, t: float, cfg: BridgeConfig, rng: Rng):
    """Self-normalized Monte-Carlo estimate of the stage-1 drift at rows of ``x``.

    Draws ``2 * n3`` standard normals per particle; the weighted score sum runs
    over the first ``n3`` and the normalizing weight sum over the last ``n3``.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must lie in [0, 1), got {t}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    n, d = x2.shape
    n3 = cfg.n3
    z = rng.normal((2 * n3, n, d))
    xt = x2[None] + math.sqrt(cfg.tau * (1.0 - t)) * z
    w = np.asarray(ratio.ratio(xt.reshape(-1, d))).reshape(2 * n3, n)
    s = np.asarray(score.score(xt[:n3].reshape(-1, d), cfg.sigma)).reshape(n3, n, d)
    num = np.sum(w[:n3, :, None] * (s + math.sqrt((1.0 - t) / cfg.tau) * z[:n3]), axis=0)
    den = np.sum(w[n3:], axis=0)
    if np.any(den <= 1e-300):
        raise FloatingPointError(f"stage-1 weight sum underflowed at t={t}")
    b = num / den[:, None] + x2 / cfg.tau
    return b[0] if single else b


def run_stage1(ratio, score, n_particles: int, cfg: BridgeConfig, rng: Rng,
               record_every: int = 0) -> ParticleBatch:
    """Drive particles from the origin to (approximately) q_sigma."""
    d = _dim(cfg, score)
    h = cfg.tau / cfg.n1
    sqrt_h = math.sqrt(h)

    def block(b, sl):
        brng = rng.child(STAGE1_KEY, b)
        x = np.zeros((sl.stop - sl.start, d))
        traj = [(0, x.copy())] if record_every else []
        for k in range(cfg.n1):
            t = k / cfg.n1
            if cfg.exact:
                drift = drift_stage1_exact(cfg.drift_source, cfg.sigma, cfg.tau, t, x)
            else:
                drift = stage1_drift(ratio, score, x, t, cfg, brng)
            x = x + h * drift + sqrt_h * brng.normal(x.shape)
            _check_finite(x, "one", k + 1)
            if record_every and ((k + 1) % record_every == 0 or k + 1 == cfg.n1):
                traj.append((k + 1, x.copy()))
        return x, traj

    results = _map_blocks(block, n_particles, cfg.block_size, cfg.threads)
    positions, traj = _merge(results, "one", d)
    return ParticleBatch(positions, "one", cfg.n1, traj)


def _anneal(score, x, sigma_start: float, n_steps: int, rng: Rng, clamp: bool,
            final_denoise: bool, record_every: int = 0, project=None):
    h = sigma_start**2 / n_steps
    noise = sigma_start / math.sqrt(n_steps)
    traj = [(0, x.copy())] if record_every else []
    for k in range(n_steps):
        st = math.sqrt(1.0 - k / n_steps) * sigma_start
        x = x + h * score.score(x, st, clamp=clamp) + noise * rng.normal(x.shape)
        if project is not None:
            x = project(x, k + 1)
        _check_finite(x, "two", k + 1)
        if record_every and ((k + 1) % record_every == 0 or k + 1 == n_steps):
            traj.append((k + 1, x.copy()))
    if final_denoise:
        x = x + h * score.score(x, math.sqrt(1.0 / n_steps) * sigma_start, clamp=clamp)
        if project is not None:
            x = project(x, n_steps)
        _check_finite(x, "two", n_steps)
    return x, traj


def run_stage2(score, start, cfg: BridgeConfig, rng: Rng, record_every: int = 0) -> ParticleBatch:
    """Anneal particles from q_sigma to the target.

    ``start`` is a :class:`ParticleBatch` from :func:`run_stage1` or an array of
    externally supplied starting points.
    """
    if isinstance(start, ParticleBatch):
        if start.stage != "one":
            raise ValueError(f"stage 2 must start from stage-1 particles, got stage {start.stage!r}")
        x0 = start.positions
    else:
        x0 = np.atleast_2d(np.asarray(start, dtype=np.float64))
    drift = ExactScore(cfg.drift_source) if cfg.exact else score
    d = _dim(cfg, score)
    if x0.shape[0] and x0.shape[1] != d:
        raise ValueError(f"start points have dimension {x0.shape[1]}, expected {d}")

    def block(b, sl):
        return _anneal(drift, x0[sl], cfg.sigma, cfg.n2, rng.child(STAGE2_KEY, b),
                       clamp=not cfg.exact, final_denoise=cfg.final_denoise, record_every=record_every)

    results = _map_blocks(block, x0.shape[0], cfg.block_size, cfg.threads)
    positions, traj = _merge(results, "two", d)
    return ParticleBatch(positions, "done", cfg.n2, traj)


def sample(ratio, score, n_particles: int, cfg: BridgeConfig, rng: Rng) -> np.ndarray:
    """Stage 1 then stage 2; returns an ``(n, d)`` array."""
    if n_particles == 0:
        return np.empty((0, _dim(cfg, score)))
    first = run_stage1(ratio, score, n_particles, cfg, rng)
    return run_stage2(score, first, cfg, rng).positions


def prior_start(n_particles: int, d: int, cfg: BridgeConfig, rng: Rng) -> np.ndarray:
    """Uninformative N(0, tau I) start used when stage 1 is skipped."""
    return math.sqrt(cfg.tau) * rng.child(PRIOR_KEY).normal((n_particles, d))


def inpaint(task: InpaintTask, score, rng: Rng) -> np.ndarray:
    """Fill the masked-out coordinates of ``task.y`` by stage-2 annealing.

    A single ``z`` is drawn up front and reused in every re-projection of the
    observed coordinates, so the output equals ``y`` exactly where mask is 1.
    """
    cfg = task.config
    drift = ExactScore(cfg.drift_source) if cfg.exact else score
    y, mask = task.y, task.mask == 1
    z = rng.normal(y.shape)
    x0 = y + cfg.sigma * z

    def project(x, k):
        level = math.sqrt(max(0.0, 1.0 - k / cfg.n2)) * cfg.sigma
        return np.where(mask, y + level * z, x)

    x, _ = _anneal(drift, x0, cfg.sigma, cfg.n2, rng.child(STAGE2_KEY), clamp=not cfg.exact,
                   final_denoise=cfg.final_denoise, project=project)
    return x


def interpolate(x_a, x_b, lam, sigma_interp: float, score, cfg: BridgeConfig, rng: Rng) -> np.ndarray:
    """Noise the linear interpolant at ``sigma_interp`` and anneal it back to the target.

    ``lam`` may be a scalar (returns a vector) or an array (returns one row per value).
    """
    model_sigma = cfg.sigma if cfg.exact else score.sigma_max
    if sigma_interp > model_sigma:
        raise ValueError(f"sigma_interp={sigma_interp} exceeds the model noise level {model_sigma}")
    if sigma_interp <= 0:
        raise ValueError("sigma_interp must be positive")
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape:
        raise ValueError("endpoints differ in dimension")
    lam_arr = np.asarray(lam, dtype=np.float64)
    w = (1.0 - lam_arr[..., None]) * x_a + lam_arr[..., None] * x_b
    w = w + sigma_interp * rng.normal(w.shape)
    drift = ExactScore(cfg.drift_source) if cfg.exact else score
    out, _ = _anneal(drift, np.atleast_2d(w), sigma_interp, cfg.n2, rng.child(STAGE2_KEY),
                     clamp=not cfg.exact, final_denoise=cfg.final_denoise)
    return out[0] if lam_arr.ndim == 0 else out
