"""Density ratio q_sigma / N(0, tau I) estimated by logistic regression."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nn import MlpNetwork
from .rng import Rng
from .score import TrainConfig, TrainingDiverged

log = logging.getLogger(__name__)


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class RatioModel:
    net: MlpNetwork
    sigma: float
    tau: float
    logit_clamp: float = 30.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.net.layer_dims[-1] != 1 or self.net.embed_dim:
            raise ValueError("ratio network must be unconditioned with scalar output")
        if not np.isfinite(self.logit_clamp) or self.logit_clamp <= 0:
            raise ValueError("logit_clamp must be finite and positive")

    def logit(self, x):
        out = self.net.forward(x)
        return out[..., 0]

    def ratio(self, x):
        return np.exp(np.clip(self.logit(x), -self.logit_clamp, self.logit_clamp))


def ratio_estimate(model: RatioModel, x):
    return model.ratio(x)


def logistic_loss(model: RatioModel, batch_q, batch_ref):
    """Mean of softplus(-r(x_q)) + softplus(r(x_ref)) and its parameter gradients."""
    batch_q = np.atleast_2d(batch_q)
    batch_ref = np.atleast_2d(batch_ref)
    n = batch_q.shape[0]
    if n == 0 or batch_ref.shape[0] != n:
        raise ValueError("batches must be nonempty and of equal size")
    x = np.concatenate([batch_q, batch_ref])
    out, cache = model.net.forward(x, keep_cache=True)
    r = out[:, 0]
    rq, rr = r[:n], r[n:]
    loss = float((np.sum(softplus(-rq)) + np.sum(softplus(rr))) / n)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite logistic loss {loss}")
    upstream = np.concatenate([-sigmoid(-rq), sigmoid(rr)])[:, None] / n
    grads, _ = model.net.backward(cache, upstream)
    return loss, grads


def train_ratio(data, sigma: float, tau: float, cfg: TrainConfig, hidden=(256, 512),
                model: RatioModel | None = None, logit_clamp: float = 30.0, log_every: int = 0):
    """Each step noises a resampled data batch to q_sigma and draws a fresh N(0, tau I) batch."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("no training data")
    if tau < sigma * sigma:
        log.warning("tau=%g is below sigma^2=%g; the ratio may be poorly conditioned", tau, sigma * sigma)
    d = data.shape[1]
    rng = Rng(cfg.seed)
    if model is None:
        model = RatioModel(MlpNetwork.init([d, *hidden, 1], rng.child(0)), sigma, tau, logit_clamp)
    opt = cfg.optimizer()
    params = model.net.parameters()
    batch_rng = rng.child(1)
    trace: list[tuple[int, float]] = []
    for it in range(1, cfg.iterations + 1):
        idx = batch_rng.integers(0, data.shape[0], cfg.batch_size)
        xq = data[idx] + sigma * batch_rng.normal((cfg.batch_size, d))
        xr = np.sqrt(tau) * batch_rng.normal((cfg.batch_size, d))
        try:
            loss, grads = logistic_loss(model, xq, xr)
            opt.update(params, grads)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"ratio training diverged at iteration {it}: {exc}", trace) from exc
        trace.append((it, loss))
        if log_every and it % log_every == 0:
            log.info("ratio iter %d loss %.5f", it, loss)
    return model, trace
