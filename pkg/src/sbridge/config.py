"""Experiment configuration as flat ``key = value`` sections."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

from .mixtures import PRESETS, GaussianMixture, load_mixture, preset
from .sampler import BridgeConfig
from .score import DEFAULT_EMBED_DIM, TrainConfig


def default_score_train() -> TrainConfig:
    return TrainConfig(batch_size=1000, iterations=10000, lr=1e-4, beta1=0.5, beta2=0.999)


def default_ratio_train() -> TrainConfig:
    return TrainConfig(batch_size=1000, iterations=3000, lr=1e-3, beta1=0.5, beta2=0.999, weight_decay=0.003)


@dataclass
class ExperimentConfig:
    target: str = "six-modes"
    sigma: float = 1.0
    tau: float = 5.0
    seed: int = 0
    out: str = "runs/default"
    n_data: int = 50000
    threads: int = 1
    score_train: TrainConfig = field(default_factory=default_score_train)
    score_hidden: tuple[int, ...] = (256, 512)
    embed_dim: int = DEFAULT_EMBED_DIM
    ratio_train: TrainConfig = field(default_factory=default_ratio_train)
    ratio_hidden: tuple[int, ...] = (256, 512)
    logit_clamp: float = 30.0
    n1: int = 1000
    n2: int = 1000
    n3: int = 1
    final_denoise: bool = False
    block_size: int = 1024

    def __post_init__(self):
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("sigma and tau must be positive")

    def load_target(self) -> GaussianMixture:
        if self.target in PRESETS:
            return preset(self.target, self.sigma, self.tau)
        if not os.path.exists(self.target):
            raise FileNotFoundError(f"target file {self.target!r} does not exist")
        return load_mixture(self.target)

    def bridge(self, exact: GaussianMixture | None = None) -> BridgeConfig:
        return BridgeConfig(self.sigma, self.tau, self.n1, self.n2, self.n3, self.seed,
                            self.final_denoise, exact, self.block_size, self.threads)


_EXPERIMENT_KEYS = ("target", "sigma", "tau", "seed", "out", "n_data", "threads")
_BRIDGE_KEYS = ("n1", "n2", "n3", "final_denoise", "block_size")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _coerce(raw: str, like, annotation: str = ""):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if isinstance(like, bool):
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float) or "float" in annotation:
        return float(raw)
    if isinstance(like, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def config_to_text(cfg: ExperimentConfig) -> str:
    out = ["[experiment]"]
    out += [f"{k} = {_fmt(getattr(cfg, k))}" for k in _EXPERIMENT_KEYS]
    for name, train, extra in (
        ("score", cfg.score_train, {"hidden": cfg.score_hidden, "embed_dim": cfg.embed_dim}),
        ("ratio", cfg.ratio_train, {"hidden": cfg.ratio_hidden, "logit_clamp": cfg.logit_clamp}),
    ):
        out += ["", f"[{name}]"]
        out += [f"{f.name} = {_fmt(getattr(train, f.name))}" for f in fields(TrainConfig)]
        out += [f"{k} = {_fmt(v)}" for k, v in extra.items()]
    out += ["", "[bridge]"]
    out += [f"{k} = {_fmt(getattr(cfg, k))}" for k in _BRIDGE_KEYS]
    return "\n".join(out) + "\n"


def config_from_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    base = ExperimentConfig()
    kwargs = {}
    unknown = set(cp.sections()) - {"experiment", "score", "ratio", "bridge"}
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")

    def section(name, keys, obj):
        if name not in cp:
            return {}
        got = {}
        for key, raw in cp[name].items():
            if key not in keys:
                raise ValueError(f"unknown key {key!r} in [{name}]")
            got[key] = _coerce(raw, getattr(obj, key), keys[key])
        return got

    exp_keys = {k: "" for k in _EXPERIMENT_KEYS}
    kwargs.update(section("experiment", exp_keys, base))
    kwargs.update(section("bridge", {k: "" for k in _BRIDGE_KEYS}, base))

    train_keys = {f.name: str(f.type) for f in fields(TrainConfig)}
    for name, attr, extra in (
        ("score", "score_train", {"hidden": "score_hidden", "embed_dim": "embed_dim"}),
        ("ratio", "ratio_train", {"hidden": "ratio_hidden", "logit_clamp": "logit_clamp"}),
    ):
        proto = getattr(base, attr)
        got = section(name, {**train_keys, **{k: "" for k in extra}},
                      _TrainView(proto, {k: getattr(base, v) for k, v in extra.items()}))
        train_kwargs = {k: v for k, v in got.items() if k in train_keys}
        kwargs[attr] = TrainConfig(**{**proto.__dict__, **train_kwargs})
        for k, v in extra.items():
            if k in got:
                kwargs[v] = got[k]
    return ExperimentConfig(**kwargs)


class _TrainView:
    """Attribute lookup over a TrainConfig plus section-specific extras."""

    def __init__(self, train: TrainConfig, extra: dict):
        self._train, self._extra = train, extra

    def __getattr__(self, key):
        if key in self._extra:
            return self._extra[key]
        return getattr(self._train, key)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_text(fh.read())
