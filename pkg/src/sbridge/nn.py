"""Dense ReLU networks with hand-written backprop, Adam, and sinusoidal embeddings."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

CHECKPOINT_MAGIC = b"SBNN"
CHECKPOINT_VERSION = 1
_TINY = np.finfo(np.float64).tiny


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Sines then cosines of ``t * w_k`` with ``w_k`` geometric on [1, 1e4].

    ``t`` may be a scalar (returns shape ``(dim,)``) or a 1-D array (returns
    ``(len(t), dim)``).
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 1e4 ** (np.arange(half) / (half - 1))
    t_arr = np.asarray(t, dtype=np.float64)
    args = t_arr[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


@dataclass
class MlpNetwork:
    """Fully connected ReLU network.

    ``weights[i]`` has shape ``(layer_dims[i+1], layer_dims[i])``. When
    ``embed_dim > 0`` every hidden layer adds ``embed_projections[i] @ embed``
    before its activation; the output layer stays purely affine.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    embed_dim: int = 0
    embed_projections: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.layer_dims) - 1
        if n < 1:
            raise ValueError("need at least an input and an output dimension")
        if len(self.weights) != n or len(self.biases) != n:
            raise ValueError("one weight matrix and bias per layer required")
        for i in range(n):
            if self.weights[i].shape != (self.layer_dims[i + 1], self.layer_dims[i]):
                raise ValueError(f"layer {i} weight shape {self.weights[i].shape} does not match dims")
            if self.biases[i].shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} bias shape {self.biases[i].shape} does not match dims")
        if self.embed_dim:
            if len(self.embed_projections) != n - 1:
                raise ValueError("one embedding projection per hidden layer required")
            for i, e in enumerate(self.embed_projections):
                if e.shape != (self.layer_dims[i + 1], self.embed_dim):
                    raise ValueError(f"embedding projection {i} has shape {e.shape}")
        elif self.embed_projections:
            raise ValueError("embedding projections given but embed_dim is 0")

    @classmethod
    def init(cls, layer_dims, rng: Rng, embed_dim: int = 0) -> MlpNetwork:
        """Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        layer_dims = [int(d) for d in layer_dims]
        weights, biases, projections = [], [], []
        for i in range(len(layer_dims) - 1):
            fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, fan_out))
            if embed_dim and i < len(layer_dims) - 2:
                eb = 1.0 / np.sqrt(embed_dim)
                projections.append(rng.uniform(-eb, eb, (fan_out, embed_dim)))
        return cls(layer_dims, weights, biases, embed_dim, projections)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in checkpoint order: W, b, (E) per layer."""
        out = []
        for i in range(self.n_layers):
            out.append(self.weights[i])
            out.append(self.biases[i])
            if self.embed_dim and i < self.n_layers - 1:
                out.append(self.embed_projections[i])
        return out

    def copy(self) -> MlpNetwork:
        return MlpNetwork(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.embed_dim,
            [e.copy() for e in self.embed_projections],
        )

    def _check_inputs(self, x, embed):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.layer_dims[0]:
            raise ValueError(f"input has shape {x.shape}, expected (..., {self.layer_dims[0]})")
        if self.embed_dim:
            if embed is None:
                raise ValueError("network expects a conditioning embedding")
            embed = np.asarray(embed, dtype=np.float64)
            # a single shared embedding stays 1-D: one projection, broadcast over rows
            if embed.ndim == 1 and embed.shape == (self.embed_dim,):
                return x2, embed, single
            if embed.shape != (x2.shape[0], self.embed_dim):
                raise ValueError(f"embedding has shape {embed.shape}, expected ({x2.shape[0]}, {self.embed_dim})")
        elif embed is not None:
            raise ValueError("network has no embedding projections")
        return x2, embed, single

    def forward(self, x, embed=None, keep_cache: bool = False):
        """Evaluate on a single vector ``(d,)`` or a batch ``(n, d)``."""
        x2, embed, single = self._check_inputs(x, embed)
        h = x2
        acts = [h]
        for i in range(self.n_layers):
            z = h @ self.weights[i].T
            z += self.biases[i]
            if i < self.n_layers - 1:
                if self.embed_dim:
                    z += embed @ self.embed_projections[i].T
                h = np.maximum(z, 0.0, out=z)
            else:
                h = z
            acts.append(h)
        out = h[0] if single else h
        if keep_cache:
            return out, (acts, embed, single)
        return out

    __call__ = forward

    def backward(self, cache, upstream):
        """Reverse pass for a cached forward.

        Returns ``(grads, dx)`` where ``grads`` follows :meth:`parameters` order
        and gradients are summed over the batch.
        """
        acts, embed, single = cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream gradient has shape {g.shape}, expected {acts[-1].shape}")
        per_layer = [None] * self.n_layers
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                # g is a fresh array from the layer above, so masking in place is safe
                np.multiply(g, acts[i + 1] > 0.0, out=g)
            dw = (acts[i].T @ g).T
            db = g.sum(axis=0)
            de = None
            if self.embed_dim and i < self.n_layers - 1:
                de = np.outer(db, embed) if embed.ndim == 1 else g.T @ embed
            per_layer[i] = (dw, db, de)
            g = g @ self.weights[i]
        grads = []
        for dw, db, de in per_layer:
            grads.append(dw)
            grads.append(db)
            if de is not None:
                grads.append(de)
        dx = g[0] if single else g
        return grads, dx


def mlp_forward(net: MlpNetwork, x, embed=None) -> np.ndarray:
    return net.forward(x, embed)


def mlp_backward(net: MlpNetwork, x, embed, upstream_grad):
    """Gradients of ``<upstream_grad, net(x, embed)>`` w.r.t. every parameter and ``x``."""
    _, cache = net.forward(x, embed, keep_cache=True)
    return net.backward(cache, upstream_grad)


@dataclass
class AdamState:
    """Adam with L2 weight decay folded into the gradient."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place Adam step on ``params``."""
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {i} at step {self.step + 1}")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if any(m.shape != p.shape for m, p in zip(self.m, params)):
            raise ValueError("optimizer state does not match parameter shapes")

        self.step += 1
        bc1 = 1.0 - self.beta1**self.step
        bc2 = 1.0 - self.beta2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                # decayed dead units drift into subnormals, which slow BLAS several-fold
                for a in (p, m, v):
                    a[np.abs(a) < _TINY] = 0.0


def adam_update(state: AdamState, params, grads):
    state.update(params, grads)
    return params, state


def _format_meta(meta: dict) -> bytes:
    lines = []
    for key in sorted(meta):
        value = meta[key]
        if isinstance(value, (list, tuple, np.ndarray)):
            value = ",".join(repr(float(v)) for v in np.ravel(value))
        elif isinstance(value, float):
            value = repr(float(value))
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _parse_meta(raw: bytes) -> dict[str, str]:
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def network_to_bytes(net: MlpNetwork, meta: dict | None = None) -> bytes:
    """Serialize to the SBNN container.

    Layout (little-endian): magic ``SBNN``, u32 version, u32 number of dims,
    u32 dims, u32 embed_dim, then each parameter as f64 row-major in
    :meth:`MlpNetwork.parameters` order, then u32 metadata length and
    ``key=value`` lines.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(net.layer_dims))]
    parts.append(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
    parts.append(struct.pack("<I", net.embed_dim))
    for p in net.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    raw_meta = _format_meta(meta or {})
    parts.append(struct.pack("<I", len(raw_meta)))
    parts.append(raw_meta)
    return b"".join(parts)


def network_from_bytes(data: bytes) -> tuple[MlpNetwork, dict[str, str]]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an SBNN checkpoint (bad magic)")
    version, n_dims = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    dims = list(struct.unpack_from(f"<{n_dims}I", data, off))
    off += 4 * n_dims
    (embed_dim,) = struct.unpack_from("<I", data, off)
    off += 4

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
        return arr

    weights, biases, projections = [], [], []
    n_layers = len(dims) - 1
    for i in range(n_layers):
        weights.append(take((dims[i + 1], dims[i])))
        biases.append(take((dims[i + 1],)))
        if embed_dim and i < n_layers - 1:
            projections.append(take((dims[i + 1], embed_dim)))
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = _parse_meta(data[off : off + meta_len])
    return MlpNetwork(dims, weights, biases, embed_dim, projections), meta


def save_network(path, net: MlpNetwork, meta: dict | None = None) -> None:
    """Write atomically so an interrupted save never leaves a partial file."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(network_to_bytes(net, meta))
    os.replace(tmp, path)


def load_network(path) -> tuple[MlpNetwork, dict[str, str]]:
    with open(path, "rb") as fh:
        return network_from_bytes(fh.read())
