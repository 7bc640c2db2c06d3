"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line; the lines are echoed
during the run and repeated in the terminal summary (see ``conftest.py``).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from sbridge import io
from sbridge.cli import cmd_eval, cmd_sample, cmd_train_ratio, cmd_train_score, load_ratio, load_score
from sbridge.config import ExperimentConfig
from sbridge.metrics import mode_coverage, wasserstein2_exact
from sbridge.mixtures import gauss_1d, log_density_ratio_exact, matched_variance, six_modes
from sbridge.rng import Rng
from sbridge.sampler import BridgeConfig, InpaintTask, inpaint, run_stage1, run_stage2, sample
from sbridge.score import TrainConfig, train_score
from sbridge.ratio import train_ratio

from test_metrics import _brute_w2
from test_score import _dsm_fd_error

pytestmark = pytest.mark.slow

LINES: list[str] = []

# Frozen from the pinned pilot run of ``_score_1d`` (seed 0): MSE 0.0152, threshold = 1.5x.
SCORE_MSE_THRESHOLD = 0.023


def record(num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} {detail}"
    LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def learned(tmp_path_factory):
    """Both networks trained once through the CLI entry points with the default config."""
    out = tmp_path_factory.mktemp("six_modes")
    cfg = ExperimentConfig(out=str(out))
    t0 = time.perf_counter()
    cmd_train_score(cfg)
    cmd_train_ratio(cfg)
    return cfg, time.perf_counter() - t0


@pytest.fixture(scope="session")
def full_runs(learned):
    """Five seeds of full and stage-2-only sampling, 5000 particles each."""
    cfg, train_time = learned
    runs = {}
    for seed in range(5):
        c = replace(cfg, seed=seed)
        t0 = time.perf_counter()
        cmd_sample(c, 5000, stem=f"full_{seed}")
        elapsed = time.perf_counter() - t0
        cmd_sample(c, 5000, skip_stage1=True, stem=f"skip_{seed}")
        runs[seed] = (io.read_samples(f"{cfg.out}/full_{seed}.bin"),
                      io.read_samples(f"{cfg.out}/skip_{seed}.bin"), elapsed)
    return runs, train_time


def test_criterion_1_six_mode_recovery(full_runs):
    runs, train_time = full_runs
    x, _, sample_time = runs[0]
    rep = mode_coverage(x, six_modes(), 1.0)
    total = train_time + sample_time
    ok = not rep.missed and rep.fractions.min() >= 0.04 and total <= 30 * 60
    record(1, ok, f"missed={rep.missed} min_fraction={rep.fractions.min():.3f} "
                  f"fractions={np.round(rep.fractions, 3).tolist()} runtime={total:.0f}s")
    assert ok


def _gauss_exact_run():
    g = gauss_1d(0.25)
    cfg = BridgeConfig(sigma=1.0, tau=2.0, n1=1000, n2=1000, drift_source=g, seed=0)
    rng = Rng(0)
    first = run_stage1(None, None, 4096, cfg, rng)
    second = run_stage2(None, first, cfg, rng, record_every=500)
    return g, second


def test_criterion_2_exact_drift_integrator():
    t0 = time.perf_counter()
    g, out = _gauss_exact_run()
    x = out.positions
    elapsed = time.perf_counter() - t0
    n = len(x)
    mean, var = float(x.mean()), float(x.var())
    ref_rng = Rng(0).child(77)
    a, b = g.sample(n, ref_rng.child(0)), g.sample(n, ref_rng.child(1))
    w2 = wasserstein2_exact(x, a)
    base = wasserstein2_exact(b, a)
    ok = (abs(mean) <= 4 * np.sqrt(var / n) and abs(var - 0.25) <= 0.025 and w2 <= 1.5 * base
          and elapsed <= 120)
    record(2, ok, f"mean={mean:.4f} (4se={4 * np.sqrt(var / n):.4f}) var={var:.4f} "
                  f"w2={w2:.4f} baseline={base:.4f} runtime={elapsed:.0f}s")
    assert ok


def test_criterion_3_time_marginals():
    t0 = time.perf_counter()
    _, out = _gauss_exact_run()
    elapsed = time.perf_counter() - t0
    checks = []
    for _, k, pos in out.trajectory:
        expected = 0.25 + (1 - k / 1000)
        got = float(pos.var())
        checks.append((k, got, expected, abs(got - expected) <= 0.1 * expected))
    ok = [k for k, *_ in checks] == [0, 500, 1000] and all(c[3] for c in checks) and elapsed <= 120
    record(3, ok, " ".join(f"k={k}:var={v:.4f}/expect={e:.4f}" for k, v, e, _ in checks)
           + f" runtime={elapsed:.0f}s")
    assert ok


def test_criterion_4_weak_order():
    # narrow target keeps Monte-Carlo noise in E[x^2] far below the discretization error
    s2 = 0.01
    g = gauss_1d(s2)
    sizes = (125, 250, 500, 1000)
    errors = []
    for n2 in sizes:
        per_seed = []
        for seed in range(10):
            r = Rng(seed).child(n2)
            x0 = g.smooth(1.0).sample(32768, r.child(0))
            cfg = BridgeConfig(sigma=1.0, tau=2.0, n2=n2, drift_source=g, block_size=32768)
            x = run_stage2(None, x0, cfg, r.child(1)).positions
            per_seed.append(float(np.mean(x**2)) - s2)
        errors.append(abs(np.mean(per_seed)))
    ratios = [errors[i] / errors[i + 1] for i in range(len(errors) - 1)]
    ok = all(1.3 <= q <= 3.0 for q in ratios)
    record(4, ok, f"errors={[f'{e:.3e}' for e in errors]} ratios={[round(float(q), 3) for q in ratios]}")
    assert ok


def _score_1d():
    # target N(0, 1): the smoothed score is -x / (1 + st^2)
    data = Rng(0).child(1).normal((50000, 1))
    cfg = TrainConfig(batch_size=1000, iterations=2000, lr=1e-3, seed=0)
    model, _ = train_score(data, cfg, hidden=(256, 512), sigma=1.0)
    xs = np.linspace(-3, 3, 61)[:, None]
    errs = []
    for st in (0.2, 0.5, 1.0):
        errs.append(np.mean((model.score(xs, st)[:, 0] + xs[:, 0] / (1 + st**2)) ** 2))
    return float(np.mean(errs))


def test_criterion_5_score_oracle():
    mse = _score_1d()
    root = Rng(55)
    from sbridge.score import init_score_model

    worst = 0.0
    for case in range(50):
        r = root.child(case)
        d = int(r.integers(1, 4))
        model = init_score_model(d, (8, 8), 1.0, r.child(0), embed_dim=4)
        n = int(r.integers(1, 6))
        st = np.sqrt(r.uniform(1e-4, 1.0, n))
        worst = max(worst, _dsm_fd_error(model, r.normal((n, d)), r.normal((n, d)) * st[:, None], st))
    ok = mse <= SCORE_MSE_THRESHOLD and worst <= 1e-4
    record(5, ok, f"mse={mse:.5f} threshold={SCORE_MSE_THRESHOLD} grad_rel_err={worst:.2e}")
    assert ok


def test_criterion_6_ratio_oracle(learned):
    cfg, _ = learned
    g = six_modes()
    ratio = load_ratio(f"{cfg.out}/ratio.sbnn", cfg)
    _, mean = load_score(f"{cfg.out}/score.sbnn", cfg)
    xq = g.smooth(cfg.sigma).sample(10**4, Rng(0).child(66))
    corr = float(np.corrcoef(ratio.logit(xq - mean), log_density_ratio_exact(g, cfg.sigma, cfg.tau, xq))[0, 1])

    mv = matched_variance(cfg.sigma, cfg.tau)
    data = mv.sample(50000, Rng(0).child(67))
    mv_ratio, _ = train_ratio(data, cfg.sigma, cfg.tau, replace(cfg.ratio_train, iterations=1000, seed=5))
    flat = float(np.mean(np.abs(mv_ratio.logit(mv.smooth(cfg.sigma).sample(10**4, Rng(0).child(68))))))
    ok = corr >= 0.95 and flat <= 0.1
    record(6, ok, f"corr={corr:.4f} matched_mean_abs_logit={flat:.4f}")
    assert ok


def test_criterion_7_inpainting_invariant():
    g = six_modes()
    cfg = BridgeConfig(sigma=1.0, n2=50, drift_source=g)
    root = Rng(7)
    bad = 0
    for trial in range(100):
        r = root.child(trial)
        y = 4 * r.normal((4, 2))
        mask = (r.uniform(size=(4, 2)) < 0.5).astype(float)
        out = inpaint(InpaintTask(y, mask, cfg), None, r.child(1))
        bad += not np.array_equal(out[mask == 1], y[mask == 1])
    y = 4 * root.normal((4, 2))
    full = inpaint(InpaintTask(y, np.ones(2), cfg), None, root.child(999))
    ok = bad == 0 and np.array_equal(full, y)
    record(7, ok, f"violations={bad}/100 full_mask_exact={np.array_equal(full, y)}")
    assert ok


def test_criterion_8_stage1_ablation(full_runs, learned):
    runs, _ = full_runs
    g = six_modes()
    w_full, w_skip = [], []
    for seed, (full, skip, _) in runs.items():
        ref = g.sample(5000, Rng(seed).child(88))
        w_full.append(wasserstein2_exact(full, ref))
        w_skip.append(wasserstein2_exact(skip, ref))
    ok = np.mean(w_skip) > np.mean(w_full)
    record(8, ok, f"mean_w2_full={np.mean(w_full):.4f} mean_w2_skip={np.mean(w_skip):.4f} "
                  f"per_seed_full={np.round(w_full, 3).tolist()} per_seed_skip={np.round(w_skip, 3).tolist()}")
    assert ok


def test_criterion_9_w2_brute_force():
    root = Rng(9)
    bad = 0
    for trial in range(200):
        r = root.child(trial)
        n = int(r.integers(1, 8))
        d = int(r.integers(1, 4))
        a, b = r.normal((n, d)), r.normal((n, d))
        bad += not np.isclose(wasserstein2_exact(a, b), _brute_w2(a, b), rtol=1e-12, atol=1e-14)
    record(9, bad == 0, f"mismatches={bad}/200")
    assert bad == 0


def test_criterion_10_determinism(learned):
    cfg, _ = learned
    c = replace(cfg, threads=1, seed=10)
    cmd_sample(c, 300, stem="det_a")
    cmd_sample(c, 300, stem="det_b")
    with open(f"{cfg.out}/det_a.bin", "rb") as fa, open(f"{cfg.out}/det_b.bin", "rb") as fb:
        same = fa.read() == fb.read()
    record(10, same, "byte_identical" if same else "outputs differ")
    assert same
