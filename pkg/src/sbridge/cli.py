"""Command-line front end: ``sbridge <verb> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import io
from .config import ExperimentConfig, config_to_text, load_config
from .metrics import drift_field, energy_distance, mode_coverage, w2_method, wasserstein2
from .mixtures import drift_stage1_exact, drift_stage2_exact
from .nn import load_network, save_network
from .ratio import RatioModel, train_ratio
from .rng import Rng
from .sampler import (
    InpaintTask,
    inpaint,
    interpolate,
    prior_start,
    run_stage1,
    run_stage2,
    stage1_drift,
)
from .score import ScoreModel, TrainingDiverged, train_score

log = logging.getLogger("sbridge")

DATA_KEY = 10
BASELINE_KEY = 11
FIELD_KEY = 12
TASK_KEY = 13


class CliError(Exception):
    pass


def center_data(data):
    """Subtract the sample mean; returns ``(centered, mean)``."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("cannot center an empty dataset")
    mean = data.mean(axis=0)
    return data - mean, mean


def uncenter(data, mean):
    return np.asarray(data) + mean


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("SB_THREADS", "1"))


def _limit_blas(threads: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=threads)


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {"threads": _threads(args)}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return replace(cfg, **overrides)


def training_data(cfg: ExperimentConfig):
    g = cfg.load_target()
    data = g.sample(cfg.n_data, Rng(cfg.seed).child(DATA_KEY))
    return center_data(data)


def _meta_float(meta, key) -> float:
    try:
        return float(meta[key])
    except KeyError:
        raise CliError(f"checkpoint lacks {key!r}") from None


def load_score(path, cfg: ExperimentConfig):
    net, meta = load_network(path)
    sigma = _meta_float(meta, "sigma")
    if not math.isclose(sigma, cfg.sigma, rel_tol=1e-12):
        raise CliError(f"score checkpoint has sigma={sigma}, config has sigma={cfg.sigma}")
    mean = np.array([float(v) for v in meta["data_mean"].split(",")])
    return ScoreModel(net, sigma, _meta_float(meta, "sigma_floor")), mean


def load_ratio(path, cfg: ExperimentConfig):
    net, meta = load_network(path)
    sigma, tau = _meta_float(meta, "sigma"), _meta_float(meta, "tau")
    if not math.isclose(sigma, cfg.sigma, rel_tol=1e-12) or not math.isclose(tau, cfg.tau, rel_tol=1e-12):
        raise CliError(f"ratio checkpoint has sigma={sigma}, tau={tau}; config has sigma={cfg.sigma}, tau={cfg.tau}")
    return RatioModel(net, sigma, tau, _meta_float(meta, "logit_clamp"))


def _paths(cfg: ExperimentConfig):
    return {
        "score": os.path.join(cfg.out, "score.sbnn"),
        "ratio": os.path.join(cfg.out, "ratio.sbnn"),
    }


def cmd_train_score(cfg: ExperimentConfig) -> str:
    data, mean = training_data(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    trace_path = os.path.join(cfg.out, "score_loss.csv")
    train = replace(cfg.score_train, seed=cfg.seed)
    try:
        model, trace = train_score(data, train, cfg.score_hidden, cfg.sigma, cfg.embed_dim, log_every=1000)
    except TrainingDiverged as exc:
        io.write_trace(trace_path, exc.trace)
        raise CliError(str(exc)) from exc
    io.write_trace(trace_path, trace)
    path = _paths(cfg)["score"]
    save_network(path, model.net, {"kind": "score", "sigma": cfg.sigma, "sigma_floor": model.sigma_floor,
                                   "data_mean": mean})
    return path


def cmd_train_ratio(cfg: ExperimentConfig) -> str:
    data, mean = training_data(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    trace_path = os.path.join(cfg.out, "ratio_loss.csv")
    train = replace(cfg.ratio_train, seed=cfg.seed + 1)
    try:
        model, trace = train_ratio(data, cfg.sigma, cfg.tau, train, cfg.ratio_hidden,
                                   logit_clamp=cfg.logit_clamp, log_every=1000)
    except TrainingDiverged as exc:
        io.write_trace(trace_path, exc.trace)
        raise CliError(str(exc)) from exc
    io.write_trace(trace_path, trace)
    path = _paths(cfg)["ratio"]
    save_network(path, model.net, {"kind": "ratio", "sigma": cfg.sigma, "tau": cfg.tau,
                                   "logit_clamp": cfg.logit_clamp, "data_mean": mean})
    return path


def _models(cfg: ExperimentConfig, exact: bool, need_ratio: bool = True):
    """``(ratio, score, bridge_config, mean)`` for learned or exact drifts."""
    if exact:
        g = cfg.load_target()
        return None, None, cfg.bridge(g), np.zeros(g.d)
    paths = _paths(cfg)
    for key in ("score", "ratio") if need_ratio else ("score",):
        if not os.path.exists(paths[key]):
            raise CliError(f"missing {key} checkpoint {paths[key]}; run train-{key} first or pass --exact-drifts")
    score, mean = load_score(paths["score"], cfg)
    ratio = load_ratio(paths["ratio"], cfg) if need_ratio else None
    return ratio, score, cfg.bridge(), mean


def cmd_sample(cfg: ExperimentConfig, n: int, stage1_only=False, skip_stage1=False, exact=False,
               dump_trajectory: int = 0, stem: str = "samples"):
    if stage1_only and skip_stage1:
        raise CliError("--stage1-only and --skip-stage1 are mutually exclusive")
    ratio, score, bridge, mean = _models(cfg, exact, need_ratio=not skip_stage1)
    d = len(mean)
    rng = Rng(cfg.seed)
    trajectory = []
    if skip_stage1:
        out = run_stage2(score, prior_start(n, d, bridge, rng), bridge, rng, dump_trajectory)
        trajectory += out.trajectory
    else:
        first = run_stage1(ratio, score, n, bridge, rng, dump_trajectory)
        trajectory += first.trajectory
        out = first
        if not stage1_only:
            out = run_stage2(score, first, bridge, rng, dump_trajectory)
            trajectory += out.trajectory
    positions = out.positions.reshape(n, d)
    os.makedirs(cfg.out, exist_ok=True)
    paths = io.write_samples(os.path.join(cfg.out, stem), uncenter(positions, mean))
    if dump_trajectory:
        trajectory = [(s, k, uncenter(p.reshape(-1, d), mean)) for s, k, p in trajectory]
        io.write_trajectory(os.path.join(cfg.out, stem + "_trajectory.csv"), trajectory)
    return paths


def cmd_eval(cfg: ExperimentConfig, samples_path: str, exact_w2=None, radius: float = 1.0) -> str:
    g = cfg.load_target()
    x = io.read_samples(samples_path)
    if x.shape[1] != g.d:
        raise CliError(f"samples have dimension {x.shape[1]}, target has {g.d}")
    n = x.shape[0]
    lines = [f"n = {n}"]
    if n:
        base_rng = Rng(cfg.seed).child(BASELINE_KEY)
        ref = g.sample(n, base_rng.child(0))
        ref2 = g.sample(n, base_rng.child(1))
        lines.append(f"w2_method = {w2_method(n, exact_w2)}")
        lines.append(f"w2 = {wasserstein2(x, ref, exact_w2)!r}")
        lines.append(f"w2_baseline = {wasserstein2(ref2, ref, exact_w2)!r}")
        lines.append(f"energy = {energy_distance(x, ref)!r}")
        lines.append(f"energy_baseline = {energy_distance(ref2, ref)!r}")
    if g.k > 1:
        lines.append(mode_coverage(x, g, radius).to_text())
    report = "\n".join(lines) + "\n"
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "report.txt"), "w") as fh:
        fh.write(report)
    return report


def cmd_field(cfg: ExperimentConfig, stage: int, t: float, exact: bool, resolution: int = 21,
              extent=(-6.0, 6.0, -6.0, 6.0), n_mc: int = 256) -> str:
    """Drift on a 2-D grid, exact or learned, for stage 1 or 2 at time ``t``."""
    if stage not in (1, 2):
        raise CliError("stage must be 1 or 2")
    if not 0.0 <= t <= 1.0:
        raise CliError("t must lie in [0, 1]")
    ratio, score, bridge, mean = _models(cfg, exact, need_ratio=(stage == 1 and t < 1))
    if len(mean) != 2:
        raise CliError("velocity fields are 2-D only")
    sigma, tau = cfg.sigma, cfg.tau

    if exact:
        g = bridge.drift_source
        if stage == 2:
            def drift(tt, x):
                return drift_stage2_exact(g, sigma, tt, x)
        else:
            def drift(tt, x):
                if tt < 1:
                    return drift_stage1_exact(g, sigma, tau, tt, x)
                return g.smooth(sigma).score(x) + x / tau
    else:
        if stage == 2:
            def drift(tt, x):
                return score.score(x - mean, math.sqrt(1 - tt) * sigma, clamp=True)
        else:
            def drift(tt, x):
                xc = x - mean
                if tt >= 1:
                    return score.score(xc, sigma) + xc / tau
                mc = replace(bridge, n3=n_mc)
                return stage1_drift(ratio, score, xc, tt, mc, Rng(cfg.seed).child(FIELD_KEY))

    grid = drift_field(drift, t, extent, resolution)
    os.makedirs(cfg.out, exist_ok=True)
    kind = "exact" if exact else "learned"
    path = os.path.join(cfg.out, f"field_stage{stage}_t{t:g}_{kind}.csv")
    with open(path, "w") as fh:
        fh.write(grid.to_csv())
    return path


def cmd_kde(cfg: ExperimentConfig, samples_path: str, resolution=200, extent=(-8.0, 8.0, -8.0, 8.0),
            bandwidth=None):
    x = io.read_samples(samples_path)
    xs, ys, dens = io.kde_grid(x, extent, resolution, bandwidth)
    os.makedirs(cfg.out, exist_ok=True)
    csv_path = os.path.join(cfg.out, "kde.csv")
    ppm_path = os.path.join(cfg.out, "kde.ppm")
    with open(csv_path, "w") as fh:
        fh.write(io.kde_to_csv(xs, ys, dens))
    with open(ppm_path, "wb") as fh:
        fh.write(io.heatmap_ppm(dens))
    return csv_path, ppm_path


def _vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")])


def cmd_inpaint(cfg: ExperimentConfig, observed, mask, count: int, exact: bool) -> str:
    _, score, bridge, mean = _models(cfg, exact, need_ratio=False)
    y = np.asarray(observed, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if y.shape != mean.shape or mask.shape != mean.shape:
        raise CliError(f"observed point and mask must have dimension {len(mean)}")
    ys = np.tile(np.where(mask == 1, y - mean, 0.0), (count, 1))
    task = InpaintTask(ys, mask, bridge)
    done = uncenter(inpaint(task, score, Rng(cfg.seed).child(TASK_KEY)), mean)
    done = np.where(mask == 1, y, done)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "inpaint")
    io.write_samples(path, done)
    return path + ".csv"


def cmd_interpolate(cfg: ExperimentConfig, x_a, x_b, steps: int, sigma_interp: float, exact: bool) -> str:
    _, score, bridge, mean = _models(cfg, exact, need_ratio=False)
    lam = np.linspace(0.0, 1.0, steps)
    out = interpolate(np.asarray(x_a) - mean, np.asarray(x_b) - mean, lam, sigma_interp, score, bridge,
                      Rng(cfg.seed).child(TASK_KEY))
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "interpolate")
    io.write_samples(path, uncenter(out, mean))
    return path + ".csv"


def _extent(text: str):
    vals = tuple(float(v) for v in text.split(","))
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("extent is xmin,xmax,ymin,ymax")
    return vals


def _global_flags(default) -> argparse.ArgumentParser:
    # subcommands get SUPPRESS defaults so flags given before the verb survive
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default, help="experiment config file")
    common.add_argument("--seed", type=int, default=default, help="override the config seed")
    common.add_argument("--out", default=default, help="output directory")
    common.add_argument("--threads", type=int, default=default,
                        help="worker threads (default: $SB_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true", default=default if default is not None else False)
    return common


def build_parser() -> argparse.ArgumentParser:
    top = _global_flags(None)
    common = _global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="sbridge", description=__doc__, parents=[top])
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("train-score", parents=[common], help="train the noise-conditional score network")
    sub.add_parser("train-ratio", parents=[common], help="train the density-ratio network")

    s = sub.add_parser("sample", parents=[common], help="run the bridge sampler")
    s.add_argument("-n", type=int, default=5000, help="number of particles")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--stage1-only", action="store_true")
    mode.add_argument("--skip-stage1", action="store_true", help="start stage 2 from N(0, tau I)")
    s.add_argument("--exact-drifts", action="store_true", help="use closed-form drifts of the target")
    s.add_argument("--dump-trajectory", type=int, default=0, metavar="K", help="record every K-th step")
    s.add_argument("--final-denoise", action="store_true", help="add the noise-free denoising step")
    s.add_argument("--name", default="samples", help="output file stem")

    e = sub.add_parser("eval", parents=[common], help="compare samples against the target")
    e.add_argument("samples")
    e.add_argument("--exact-w2", action="store_true", default=None, help="force exact assignment W2")
    e.add_argument("--radius", type=float, default=1.0)

    f = sub.add_parser("field", parents=[common], help="dump a drift field on a grid")
    f.add_argument("--stage", type=int, choices=(1, 2), default=2)
    f.add_argument("--t", type=float, default=1.0)
    f.add_argument("--exact-drifts", action="store_true")
    f.add_argument("--resolution", type=int, default=21)
    f.add_argument("--extent", type=_extent, default=(-6.0, 6.0, -6.0, 6.0))

    k = sub.add_parser("kde", parents=[common], help="KDE heatmap of 2-D samples")
    k.add_argument("samples")
    k.add_argument("--resolution", type=int, default=200)
    k.add_argument("--extent", type=_extent, default=(-8.0, 8.0, -8.0, 8.0))
    k.add_argument("--bandwidth", type=float, default=None, help="KDE bandwidth factor (default: Scott)")

    ip = sub.add_parser("inpaint", parents=[common], help="complete masked coordinates")
    ip.add_argument("--observed", type=_vector, required=True, help="comma-separated point")
    ip.add_argument("--mask", type=_vector, required=True, help="comma-separated 0/1 mask")
    ip.add_argument("--count", type=int, default=10)
    ip.add_argument("--exact-drifts", action="store_true")

    it = sub.add_parser("interpolate", parents=[common], help="noisy interpolation denoised by stage 2")
    it.add_argument("--xa", type=_vector, required=True)
    it.add_argument("--xb", type=_vector, required=True)
    it.add_argument("--steps", type=int, default=9)
    it.add_argument("--sigma-interp", type=float, default=math.sqrt(0.4))
    it.add_argument("--exact-drifts", action="store_true")

    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with _limit_blas(1 if cfg.threads > 1 else cfg.threads) or contextlib.nullcontext():
            return _dispatch(args, cfg)
    except (CliError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"sbridge: error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args, cfg: ExperimentConfig) -> int:
    verb = args.verb
    if verb == "train-score":
        print(cmd_train_score(cfg))
    elif verb == "train-ratio":
        print(cmd_train_ratio(cfg))
    elif verb == "sample":
        if args.final_denoise:
            cfg = replace(cfg, final_denoise=True)
        for path in cmd_sample(cfg, args.n, args.stage1_only, args.skip_stage1, args.exact_drifts,
                               args.dump_trajectory, args.name):
            print(path)
    elif verb == "eval":
        print(cmd_eval(cfg, args.samples, args.exact_w2, args.radius), end="")
    elif verb == "field":
        print(cmd_field(cfg, args.stage, args.t, args.exact_drifts, args.resolution, args.extent))
    elif verb == "kde":
        for path in cmd_kde(cfg, args.samples, args.resolution, args.extent, args.bandwidth):
            print(path)
    elif verb == "inpaint":
        print(cmd_inpaint(cfg, args.observed, args.mask, args.count, args.exact_drifts))
    elif verb == "interpolate":
        print(cmd_interpolate(cfg, args.xa, args.xb, args.steps, args.sigma_interp, args.exact_drifts))
    elif verb == "show-config":
        print(config_to_text(cfg), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
