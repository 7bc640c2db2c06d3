import numpy as np
import pytest

from sbridge.mixtures import drift_stage1_exact, gauss_1d, six_modes
from sbridge.rng import Rng
from sbridge.sampler import (
    BridgeConfig,
    ExactRatio,
    ExactScore,
    InpaintTask,
    ParticleBatch,
    ParticleError,
    inpaint,
    interpolate,
    prior_start,
    run_stage1,
    run_stage2,
    sample,
    stage1_drift,
)


@pytest.mark.parametrize("t", [0.0, 0.4, 0.8])
def test_monte_carlo_drift_converges_to_exact(t):
    g = six_modes()
    cfg = BridgeConfig(sigma=1.0, tau=5.0, n3=200000)
    x = np.array([[1.0, -2.0], [4.0, 0.5]])
    est = stage1_drift(ExactRatio(g, 1.0, 5.0), ExactScore(g), x, t, cfg, Rng(4))
    np.testing.assert_allclose(est, drift_stage1_exact(g, 1.0, 5.0, t, x), atol=0.05)


def test_stage1_drift_shapes_and_domain():
    g = gauss_1d(0.25)
    cfg = BridgeConfig(sigma=1.0, tau=2.0, n3=3)
    out = stage1_drift(ExactRatio(g, 1.0, 2.0), ExactScore(g), np.array([0.3]), 0.2, cfg, Rng(0))
    assert out.shape == (1,)
    with pytest.raises(ValueError):
        stage1_drift(ExactRatio(g, 1.0, 2.0), ExactScore(g), np.array([0.3]), 1.0, cfg, Rng(0))


def test_exact_stage1_reaches_smoothed_target():
    g = gauss_1d(0.25)
    cfg = BridgeConfig(sigma=1.0, tau=2.0, n1=200, n2=10, drift_source=g)
    x = run_stage1(None, None, 4000, cfg, Rng(1)).positions[:, 0]
    assert abs(x.mean()) < 4 * np.sqrt(1.25 / 4000)
    assert x.var() == pytest.approx(1.25, rel=0.1)


def test_learned_path_matches_exact_path_with_oracle_estimators():
    # with exact ratio and score plugged into the Monte-Carlo drift, stage 1 still lands on q_sigma
    g = gauss_1d(0.25)
    cfg = BridgeConfig(sigma=1.0, tau=2.0, n1=200, n2=10, n3=8)
    x = run_stage1(ExactRatio(g, 1.0, 2.0), ExactScore(g), 2000, cfg, Rng(2)).positions[:, 0]
    assert x.var() == pytest.approx(1.25, rel=0.15)


def test_results_independent_of_threads():
    g = six_modes()
    base = dict(sigma=1.0, tau=5.0, n1=20, n2=20, drift_source=g, block_size=16)
    a = sample(None, None, 70, BridgeConfig(**base, threads=1), Rng(3))
    b = sample(None, None, 70, BridgeConfig(**base, threads=4), Rng(3))
    np.testing.assert_array_equal(a, b)
    c = sample(None, None, 70, BridgeConfig(**base, threads=1), Rng(4))
    assert not np.array_equal(a, c)


def test_sample_zero_particles():
    cfg = BridgeConfig(n1=5, n2=5, drift_source=six_modes())
    out = sample(None, None, 0, cfg, Rng(0))
    assert out.shape == (0, 2)


def test_trajectory_recording():
    cfg = BridgeConfig(sigma=1.0, tau=5.0, n1=10, n2=10, drift_source=six_modes())
    first = run_stage1(None, None, 5, cfg, Rng(0), record_every=4)
    assert [k for _, k, _ in first.trajectory] == [0, 4, 8, 10]
    np.testing.assert_array_equal(first.trajectory[-1][2], first.positions)
    second = run_stage2(None, first, cfg, Rng(0), record_every=5)
    assert second.stage == "done"
    assert [k for _, k, _ in second.trajectory] == [0, 5, 10]
    with pytest.raises(ValueError):
        run_stage2(None, second, cfg, Rng(0))


def test_stage2_rejects_dimension_mismatch():
    cfg = BridgeConfig(n2=3, drift_source=six_modes())
    with pytest.raises(ValueError):
        run_stage2(None, np.zeros((4, 3)), cfg, Rng(0))


def test_nonfinite_particles_raise():
    class Blowup:
        d = 1

        def score(self, x, st, clamp=False):
            return np.full_like(x, np.inf)

    cfg = BridgeConfig(n2=3)
    with pytest.raises(ParticleError):
        run_stage2(Blowup(), np.zeros((2, 1)), cfg, Rng(0))


def test_final_denoise_shrinks_spread():
    g = gauss_1d(0.25)
    x0 = Rng(5).normal((3000, 1)) * np.sqrt(1.25)
    cfg = BridgeConfig(sigma=1.0, tau=2.0, n2=50, drift_source=g)
    plain = run_stage2(None, x0, cfg, Rng(6)).positions
    den = run_stage2(None, x0, BridgeConfig(sigma=1.0, tau=2.0, n2=50, drift_source=g, final_denoise=True),
                     Rng(6)).positions
    assert den.var() < plain.var()


def test_config_validation():
    with pytest.raises(ValueError):
        BridgeConfig(n1=0)
    with pytest.raises(ValueError):
        BridgeConfig(sigma=-1.0)
    with pytest.raises(ValueError):
        BridgeConfig(threads=0)


def test_prior_start_scale():
    cfg = BridgeConfig(tau=4.0)
    x = prior_start(20000, 2, cfg, Rng(0))
    assert x.var(axis=0) == pytest.approx([4.0, 4.0], rel=0.05)


@pytest.mark.parametrize("seed", range(5))
def test_inpaint_keeps_observed_coordinates(seed):
    r = Rng(seed)
    g = six_modes()
    cfg = BridgeConfig(sigma=1.0, n2=30, drift_source=g)
    y = r.normal((8, 2)) * 3
    mask = (r.uniform(size=(8, 2)) < 0.5).astype(float)
    out = inpaint(InpaintTask(y, mask, cfg), None, r.child(1))
    assert np.array_equal(out[mask == 1], y[mask == 1])
    assert np.all(np.isfinite(out))


def test_inpaint_full_mask_returns_observation():
    y = np.array([[1.5, -2.25]])
    cfg = BridgeConfig(n2=10, drift_source=six_modes(), final_denoise=True)
    out = inpaint(InpaintTask(y, np.ones(2), cfg), None, Rng(0))
    assert np.array_equal(out, y)


def test_inpaint_mask_validation():
    with pytest.raises(ValueError):
        InpaintTask(np.zeros(2), np.array([0.5, 1.0]), BridgeConfig())


def test_inpaint_fills_toward_modes():
    # observe x = 5 (mode 0 lies at (5, 0)); the free coordinate should settle near 0
    g = six_modes()
    cfg = BridgeConfig(sigma=1.0, n2=200, drift_source=g)
    y = np.tile([5.0, 0.0], (200, 1))
    out = inpaint(InpaintTask(y, np.array([1.0, 0.0]), cfg), None, Rng(3))
    assert np.median(np.abs(out[:, 1])) < 0.5


def test_interpolation_endpoints_and_validation():
    g = six_modes()
    cfg = BridgeConfig(sigma=1.0, n2=100, drift_source=g)
    xa, xb = g.means[0], g.means[1]
    out = interpolate(xa, xb, np.linspace(0, 1, 5), 0.3, None, cfg, Rng(0))
    assert out.shape == (5, 2)
    assert np.linalg.norm(out[0] - xa) < 1.0 and np.linalg.norm(out[-1] - xb) < 1.0
    assert interpolate(xa, xb, 0.5, 0.3, None, cfg, Rng(0)).shape == (2,)
    with pytest.raises(ValueError):
        interpolate(xa, xb, 0.5, 2.0, None, cfg, Rng(0))
    with pytest.raises(ValueError):
        interpolate(xa, xb[:1], 0.5, 0.3, None, cfg, Rng(0))


def test_particle_batch_holds_state():
    pb = ParticleBatch(np.zeros((2, 2)), "one", 5)
    assert pb.trajectory == [] and pb.step_index == 5
