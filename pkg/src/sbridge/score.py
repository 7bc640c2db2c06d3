"""Noise-conditional score estimator trained by weighted denoising score matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nn import AdamState, MlpNetwork, sinusoidal_embedding
from .rng import Rng

log = logging.getLogger(__name__)

DEFAULT_EMBED_DIM = 32


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns non-finite; carries the loss trace so far."""

    def __init__(self, message: str, trace: list[tuple[int, float]]):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    batch_size: int = 1000
    iterations: int = 10000
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    sigma_floor: float | None = None  # defaults to 0.01 * sigma
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def optimizer(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass
class ScoreModel:
    net: MlpNetwork
    sigma_max: float
    sigma_floor: float

    def __post_init__(self):
        if self.sigma_max <= 0:
            raise ValueError("sigma_max must be positive")
        if not 0 < self.sigma_floor < self.sigma_max:
            raise ValueError("sigma_floor must lie in (0, sigma_max)")
        if self.net.layer_dims[0] != self.net.layer_dims[-1]:
            raise ValueError("score network must map R^d to R^d")

    @property
    def d(self) -> int:
        return self.net.layer_dims[0]

    def embed(self, sigma_tilde) -> np.ndarray:
        return sinusoidal_embedding(np.asarray(sigma_tilde) / self.sigma_max, self.net.embed_dim)

    def score(self, x, sigma_tilde, clamp: bool = False):
        """Estimated score of the target smoothed at ``sigma_tilde``.

        ``sigma_tilde`` is a scalar or one level per row. With ``clamp`` the
        level is clipped into ``[sigma_floor, sigma_max]`` instead of rejected.
        """
        st = np.asarray(sigma_tilde, dtype=np.float64)
        if clamp:
            st = np.clip(st, self.sigma_floor, self.sigma_max)
        # relative slack for levels computed as sqrt(1 - k/N) * sigma
        elif np.any(st < self.sigma_floor * (1 - 1e-12)) or np.any(st > self.sigma_max * (1 + 1e-12)):
            raise ValueError(f"noise level outside [{self.sigma_floor}, {self.sigma_max}]")
        return self.net.forward(x, self.embed(st))


def score_estimate(model: ScoreModel, x, sigma_tilde):
    return model.score(x, sigma_tilde)


def init_score_model(d: int, hidden, sigma: float, rng: Rng, embed_dim: int = DEFAULT_EMBED_DIM,
                     sigma_floor: float | None = None) -> ScoreModel:
    net = MlpNetwork.init([d, *hidden, d], rng, embed_dim=embed_dim)
    floor = 0.01 * sigma if sigma_floor is None else sigma_floor
    return ScoreModel(net, sigma, floor)


def dsm_loss_at(model: ScoreModel, x, z, sigma_tilde):
    """Loss and parameter gradients for fixed noise draws.

    ``loss = mean_i st_i^2 * |s(x_i + z_i, st_i) + z_i / st_i^2|^2``
    """
    x = np.atleast_2d(x)
    z = np.atleast_2d(z)
    st = np.broadcast_to(np.asarray(sigma_tilde, dtype=np.float64), (x.shape[0],))
    n = x.shape[0]
    var = st * st
    out, cache = model.net.forward(x + z, model.embed(st), keep_cache=True)
    resid = out + z / var[:, None]
    loss = float(np.sum(var * np.sum(resid * resid, axis=1)) / n)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite denoising loss {loss}")
    grads, _ = model.net.backward(cache, (2.0 / n) * var[:, None] * resid)
    return loss, grads


def dsm_loss(model: ScoreModel, batch_x, rng: Rng):
    """Draw one noise level per row, sigma_tilde^2 ~ U[floor^2, sigma^2], then :func:`dsm_loss_at`."""
    batch_x = np.atleast_2d(batch_x)
    n = batch_x.shape[0]
    if n < 1:
        raise ValueError("empty batch")
    var = rng.uniform(model.sigma_floor**2, model.sigma_max**2, n)
    st = np.sqrt(var)
    z = rng.normal(batch_x.shape) * st[:, None]
    return dsm_loss_at(model, batch_x, z, st)


def train_score(data, cfg: TrainConfig, hidden=(256, 512), sigma: float = 1.0,
                embed_dim: int = DEFAULT_EMBED_DIM, model: ScoreModel | None = None,
                log_every: int = 0):
    """Adam on minibatches drawn with replacement from ``data``.

    Returns ``(model, trace)`` with ``trace`` a list of ``(iteration, loss)``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("no training data")
    rng = Rng(cfg.seed)
    if model is None:
        model = init_score_model(data.shape[1], hidden, sigma, rng.child(0), embed_dim, cfg.sigma_floor)
    opt = cfg.optimizer()
    params = model.net.parameters()
    batch_rng = rng.child(1)
    trace: list[tuple[int, float]] = []
    for it in range(1, cfg.iterations + 1):
        idx = batch_rng.integers(0, data.shape[0], cfg.batch_size)
        try:
            loss, grads = dsm_loss(model, data[idx], batch_rng)
            opt.update(params, grads)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"score training diverged at iteration {it}: {exc}", trace) from exc
        trace.append((it, loss))
        if log_every and it % log_every == 0:
            log.info("score iter %d loss %.5f", it, loss)
    return model, trace
