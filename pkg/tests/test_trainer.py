import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from _helpers import random_scene, random_stream
from evgs.camera import Intrinsics
from evgs.events import EventFrame, EventStream, InsufficientEventsError, accumulate_frame
from evgs.losses import LossWeights, luminance
from evgs.prior import naive_integrate
from evgs.renderer import ParamGradients
from evgs.scene import GaussianScene, init_random_cloud, logit
from evgs.simulator import OrbitSpec, SimConfig, demo_scene, render_orbit, simulate_events
from evgs.trainer import (
    Adam,
    DensifyStats,
    OptimizerConfig,
    Schedule,
    StepContext,
    TrainInputs,
    TrainSettings,
    Trainer,
    TrainingError,
    densify_and_prune,
    position_lr,
    progressive_k,
    rng_stream,
    sample_event_window,
    train,
    training_step,
    warm_up,
)

SCHED = Schedule()


@pytest.fixture(scope="module")
def small_data():
    """A 32x32, 40-frame orbit of the demo scene with its events and naive priors."""
    intr = Intrinsics.from_fov(32, 32, 40)
    times, frames, traj = render_orbit(demo_scene(), OrbitSpec(n_frames=40, duration_us=400_000), intr)
    stream = simulate_events(times, frames, SimConfig(), 32, 32)
    priors = naive_integrate(stream, times[::2])
    return TrainInputs(stream, traj, intr, priors)


def small_settings(**kw):
    sched = Schedule(warm_up_iters=60, event_iters=60, k_start=4000, k_end=1500,
                     densify_interval=20, checkpoint_interval=50)
    return replace(TrainSettings(n_init=200, schedule=sched), **kw)


# schedule ------------------------------------------------------------------------

def test_progressive_k_endpoints_and_midpoint():
    assert progressive_k(0, SCHED) == 150_000
    assert progressive_k(SCHED.event_iters - 1, SCHED) == 30_000
    odd = replace(SCHED, event_iters=15_001)
    assert progressive_k(7_500, odd) == 90_000


def test_progressive_k_monotone_and_bounded():
    ks = [progressive_k(i, SCHED) for i in range(SCHED.event_iters)]
    assert all(a >= b for a, b in zip(ks, ks[1:]))
    assert min(ks) == 30_000 and max(ks) == 150_000


def test_progressive_k_geometric_shape():
    geo = replace(SCHED, k_shape="geometric")
    assert progressive_k(0, geo) == 150_000 and progressive_k(geo.event_iters - 1, geo) == 30_000
    mid = progressive_k((geo.event_iters - 1) // 2, geo)
    assert abs(mid - np.sqrt(150_000 * 30_000)) < 20


@pytest.mark.parametrize("it", [-1, SCHED.event_iters])
def test_progressive_k_out_of_range(it):
    with pytest.raises(ValueError):
        progressive_k(it, SCHED)


@pytest.mark.parametrize("kw", [dict(k_start=10, k_end=20), dict(k_end=0), dict(k_shape="cosine"),
                                dict(densify_interval=0), dict(event_iters=-1)])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        Schedule(**kw)


def test_schedule_defaults():
    assert (SCHED.warm_up_iters, SCHED.event_iters) == (3000, 15000)
    assert (SCHED.densify_interval, SCHED.densify_until) == (100, 0.5)
    assert (SCHED.opacity_prune_threshold, SCHED.positional_grad_threshold) == (0.005, 0.0002)
    assert SCHED.checkpoint_interval == 1000


# window sampling -----------------------------------------------------------------

def test_window_of_whole_stream():
    s = random_stream(np.random.default_rng(0), 50)
    t1, t2, frame = sample_event_window(s, 50, np.random.default_rng(1))
    assert (t1, t2) == (s.t[0] - 1, s.t[-1])
    np.testing.assert_array_equal(frame.values, accumulate_frame(s, t1, t2).values)


def test_window_frame_matches_accumulation():
    s = random_stream(np.random.default_rng(2), 3000)
    rng = np.random.default_rng(3)
    for _ in range(20):
        t1, t2, frame = sample_event_window(s, 300, rng)
        assert isinstance(frame, EventFrame)
        np.testing.assert_array_equal(frame.values, accumulate_frame(s, t1, t2).values)


def test_window_too_large():
    with pytest.raises(InsufficientEventsError):
        sample_event_window(random_stream(np.random.default_rng(0), 10), 11, np.random.default_rng(0))


def test_window_starts_uniform():
    # strictly increasing timestamps make t2 identify the start index
    n, k, draws = 10_000, 1_000, 10_000
    s = EventStream(np.arange(n) * 3, np.zeros(n, int), np.zeros(n, int), np.ones(n, int), 4, 4, 0.1)
    rng = np.random.default_rng(5)
    starts = np.array([s.t.searchsorted(sample_event_window(s, k, rng)[1]) - (k - 1) for _ in range(draws)])
    n_starts = n - k + 1
    assert starts.min() >= 0 and starts.max() < n_starts
    hist = np.bincount(starts, minlength=n_starts)
    expected = draws / n_starts
    chi2 = float(np.sum((hist - expected) ** 2 / expected))
    dof = n_starts - 1
    # chi-square statistic within 3 standard deviations of its mean
    assert abs(chi2 - dof) < 3 * np.sqrt(2 * dof)
    assert stats.chi2.sf(chi2, dof) > 1e-3


# optimizer -----------------------------------------------------------------------

def test_adam_first_step_moves_by_learning_rate():
    scene = random_scene(np.random.default_rng(0), n=3)
    before = scene.copy()
    opt = Adam(scene)
    g = ParamGradients.zeros_like(scene)
    g.opacity_logits[:] = [2.0, -0.5, 0.0]
    rates = OptimizerConfig().base_rates()
    opt.step(scene, g, rates)
    # bias-corrected first step is lr * sign(g)
    np.testing.assert_allclose(scene.opacity_logits - before.opacity_logits, [-0.05, 0.05, 0.0],
                               atol=1e-12)


def test_adam_row_bookkeeping():
    scene = random_scene(np.random.default_rng(1), n=4)
    opt = Adam(scene)
    opt.m["positions"][:] = np.arange(4)[:, None]
    opt.append_zeros(2)
    assert opt.m["positions"].shape == (6, 3) and np.all(opt.m["positions"][4:] == 0)
    opt.select(np.array([True, False, True, False, True, False]))
    np.testing.assert_array_equal(opt.m["positions"][:, 0], [0, 2, 0])


def test_position_lr_decay():
    cfg = OptimizerConfig()
    assert position_lr(cfg, 0, 100, 2.0) == pytest.approx(3.2e-4)
    assert position_lr(cfg, 100, 100, 1.0) == pytest.approx(1.6e-6)
    assert position_lr(cfg, 50, 100, 1.0) == pytest.approx(1.6e-5)


def test_rng_streams_independent_and_reproducible():
    a = rng_stream(0, "init").random(5)
    assert np.array_equal(a, rng_stream(0, "init").random(5))
    assert not np.array_equal(a, rng_stream(0, "windows").random(5))
    assert not np.array_equal(a, rng_stream(1, "init").random(5))


# training step -------------------------------------------------------------------

def step_context(inputs, weights=LossWeights()):
    rates = OptimizerConfig().base_rates()
    return StepContext(inputs.trajectory, inputs.intrinsics, weights, rates=rates)


def test_zero_weights_fixed_point(small_data):
    scene = init_random_cloud(100, ((-1, -1, -1), (1, 1, 1)), np.random.default_rng(0))
    before = scene.copy()
    opt = Adam(scene)
    ctx = step_context(small_data, LossWeights(0.0, 0.0))
    rng = np.random.default_rng(1)
    for i in range(5):
        window = sample_event_window(small_data.stream, 2000, rng)
        training_step(scene, opt, window, small_data.priors, ctx, i)
    for name, arr in before.params().items():
        np.testing.assert_allclose(getattr(scene, name), arr, rtol=0, atol=1e-15)


def test_consistent_window_has_no_event_gradient(small_data):
    scene = random_scene(np.random.default_rng(2), n=8)
    ctx = step_context(small_data, LossWeights(lambda_event=1.0, lambda_reg=0.0))
    t1, t2 = 20_000, 60_000
    _, r1 = ctx.view(scene, t1)
    _, r2 = ctx.view(scene, t2)
    eps = 1e-3
    values = np.log(luminance(r2.image) + eps) - np.log(luminance(r1.image) + eps)
    frame = EventFrame(values, t1, t2)

    class Capture(Adam):
        def step(self, scene, grads, rates):
            self.grads = grads

    opt = Capture(scene)
    _, report = training_step(scene, opt, (t1, t2, frame), None, ctx)
    assert report.event_loss < 1e-20
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in opt.grads.params().values()))
    assert norm < 1e-8


def test_report_total_uses_default_weights(small_data):
    scene = init_random_cloud(100, ((-1, -1, -1), (1, 1, 1)), np.random.default_rng(3))
    window = sample_event_window(small_data.stream, 2000, np.random.default_rng(4))
    _, rep = training_step(scene, Adam(scene), window, small_data.priors, step_context(small_data))
    assert rep.reg_loss > 0 and rep.event_loss > 0
    assert rep.total == 0.02 * rep.event_loss + 0.002 * rep.reg_loss


def test_step_keeps_parameter_invariants(small_data):
    scene = init_random_cloud(150, ((-1, -1, -1), (1, 1, 1)), np.random.default_rng(5))
    opt = Adam(scene)
    ctx = step_context(small_data)
    rng = np.random.default_rng(6)
    for i in range(10):
        training_step(scene, opt, sample_event_window(small_data.stream, 1500, rng), small_data.priors, ctx, i)
        assert np.allclose(np.linalg.norm(scene.rotations, axis=1), 1.0, atol=1e-12)
        assert all(np.isfinite(v).all() for v in scene.params().values())


# density control -------------------------------------------------------------------

def tiny_scene(n, scale=0.001, opacity=0.5):
    return GaussianScene(
        positions=np.zeros((n, 3)) + np.arange(n)[:, None], log_scales=np.full((n, 3), np.log(scale)),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)), opacity_logits=np.full(n, float(logit(opacity))),
        sh=np.zeros((n, 1, 3)))


def test_prune_all():
    scene = tiny_scene(5, opacity=0.001)
    out = densify_and_prune(scene, np.zeros(5), SCHED, 1.0, np.random.default_rng(0))
    assert len(out) == 0


def test_densify_noop():
    scene = tiny_scene(5)
    out = densify_and_prune(scene, np.full(5, 1e-5), SCHED, 1.0, np.random.default_rng(0))
    assert out.to_json() == scene.to_json()


def test_single_clone():
    scene = tiny_scene(4)
    grads = np.array([0.0, 0.001, 0.0, 0.0])
    opt = Adam(scene)
    out = densify_and_prune(scene, grads, SCHED, 1.0, np.random.default_rng(0), opt)
    assert len(out) == 5
    np.testing.assert_array_equal(out.positions[4], scene.positions[1])
    assert opt.m["positions"].shape == (5, 3)


def test_single_split():
    scene = tiny_scene(3, scale=0.5)
    scene.rotations[2] = [np.cos(0.3), 0.0, np.sin(0.3), 0.0]
    opt = Adam(scene)
    opt.m["sh"][:] = 1.0
    out = densify_and_prune(scene, np.array([0.0, 0.0, 0.01]), SCHED, 1.0, np.random.default_rng(0), opt)
    assert len(out) == 4  # parent replaced by two children
    np.testing.assert_allclose(out.scales[2:], 0.4, rtol=1e-12)
    np.testing.assert_array_equal(out.rotations[2], scene.rotations[2])
    assert np.all(opt.m["sh"][:2] == 1) and np.all(opt.m["sh"][2:] == 0)


def test_densify_stats_ndc_scaling():
    intr = Intrinsics.from_fov(40, 20, 50)
    scene = tiny_scene(2)
    g = ParamGradients.zeros_like(scene)
    g.mean2d[0] = [1.0, 1.0]
    g.visible[:] = [True, False]
    st_ = DensifyStats.zeros(2)
    st_.add(g, intr)
    st_.add(g, intr)
    np.testing.assert_allclose(st_.mean(), [np.hypot(20, 10), 0.0])


# full training ----------------------------------------------------------------------

def test_warm_up_zero_iters_unchanged(small_data):
    scene = init_random_cloud(50, ((-1, -1, -1), (1, 1, 1)), np.random.default_rng(0))
    before = scene.to_json()
    out = warm_up(scene, small_data.priors, small_data.trajectory, small_data.intrinsics, iters=0)
    assert out.to_json() == before


def test_warm_up_requires_priors(small_data):
    scene = init_random_cloud(50, ((-1, -1, -1), (1, 1, 1)), np.random.default_rng(0))
    with pytest.raises(ValueError):
        warm_up(scene, None, small_data.trajectory, small_data.intrinsics, iters=5)


def test_warm_up_reduces_prior_loss(small_data):
    trainer = Trainer(small_settings(n_init=300), small_data)
    trainer.warm_up(small_data.priors, 400)
    l1 = [r.prior_l1 for r in trainer.history]
    assert np.mean(l1[-100:]) < np.mean(l1[:100])


def test_training_is_deterministic_and_logged(small_data, tmp_path):
    outs = []
    for name in ("a", "b"):
        settings = small_settings(out_dir=str(tmp_path / name))
        scene, report = train(settings, small_data)
        outs.append(((tmp_path / name / "final.json").read_bytes(),
                     (tmp_path / name / "train_log.jsonl").read_bytes()))
        assert report["iterations"] == 120
    assert outs[0] == outs[1]
    lines = outs[0][1].decode().splitlines()
    assert len(lines) == 120
    rec = json.loads(lines[-1])
    assert set(rec) == {"iter", "event", "reg", "prior_l1", "total"}
    assert (tmp_path / "a" / "ckpt_000100.json").exists()
    assert not list((tmp_path / "a").glob("*.tmp"))


def test_stage_order(small_data):
    trainer = Trainer(small_settings(), small_data)
    trainer.run()
    warm, event = trainer.history[:60], trainer.history[60:]
    assert all(r.prior_l1 > 0 and r.event_loss == 0 for r in warm)
    assert all(r.event_loss > 0 and r.prior_l1 == 0 for r in event)


def test_no_prior_variant_skips_warm_up(small_data):
    settings = small_settings(use_warm_up=False, weights=LossWeights(lambda_reg=0.0))
    trainer = Trainer(settings, replace(small_data, priors=None))
    trainer.run()
    assert len(trainer.history) == 60 and all(r.reg_loss == 0 for r in trainer.history)


def test_k_clamped_to_short_stream(small_data):
    sched = replace(small_settings().schedule, k_start=10**7, k_end=10**6, warm_up_iters=0)
    trainer = Trainer(small_settings(schedule=sched, use_warm_up=False), small_data)
    trainer.run()
    assert len(trainer.history) == 60


def test_all_pruned_is_training_error(small_data):
    sched = replace(small_settings().schedule, opacity_prune_threshold=0.99)
    with pytest.raises(TrainingError):
        Trainer(small_settings(schedule=sched), small_data).run()


def test_smoothed_event_phase_loss_decreases(small_data):
    # reduced scale: 32x32 orbit, 600 event iterations, three 200-iteration blocks
    sched = Schedule(warm_up_iters=100, event_iters=600, k_start=4000, k_end=1500,
                     densify_interval=100, checkpoint_interval=10_000)
    good = 0
    for seed in range(10):
        trainer = Trainer(TrainSettings(seed=seed, n_init=300, schedule=sched), small_data)
        trainer.run()
        total = np.array([r.total for r in trainer.history[-sched.event_iters:]])
        blocks = total.reshape(-1, 200).mean(axis=1)
        good += bool(np.all(np.diff(blocks) <= 0))
    assert good >= 9
