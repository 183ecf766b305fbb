import io
from dataclasses import replace

import numpy as np
import pytest

from diffusec.channel import ChannelConfig
from diffusec.ddpm import (Denoiser, DenoiserLoss, PlanBounds, TimestepPlan,
                           build_schedule, diffuse, oracle_denoiser,
                           pipeline_loss_and_grad, predict_clean, predict_noise,
                           purify, read_denoiser, reverse_step, train_denoiser,
                           uniform_plan_sampler, write_denoiser)
from diffusec.errors import ConfigError, DataError, PlanError, TimestepError
from diffusec.metrics import ssim_avg
from diffusec.tensor import make_rng, ssim

from _oracles import alpha_bar_exact
from test_tensor import ZeroRng

BOUNDS = PlanBounds(50, 49)


def test_build_schedule_two_steps_exact():
    s = build_schedule(2, 0.1, 0.2)
    assert np.allclose(s.beta, [0.1, 0.2])
    assert np.allclose(s.alpha, [0.9, 0.8])
    assert np.allclose(s.alpha_bar, [0.9, 0.72])
    assert np.allclose(s.sigma ** 2, s.beta)


def test_alpha_bar_strictly_decreasing():
    rng = make_rng(1)
    for _ in range(10):
        b0 = float(rng.uniform(1e-5, 0.01))
        b1 = float(rng.uniform(b0, 0.3))
        s = build_schedule(int(rng.integers(2, 60)), b0, b1)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[-1] > 0


def test_alpha_bar_matches_exact_rational_product():
    s = build_schedule(100, 1e-4, 0.02)
    assert s.alpha_bar[-1] == pytest.approx(alpha_bar_exact(100, 1e-4, 0.02), abs=1e-5)


def test_build_schedule_validation():
    with pytest.raises(ConfigError):
        build_schedule(1)
    with pytest.raises(ConfigError):
        build_schedule(10, 0.0, 0.1)
    with pytest.raises(ConfigError):
        build_schedule(10, 0.2, 0.1)
    with pytest.raises(ConfigError):
        build_schedule(10, 0.5, 1.0)


def test_diffuse_deterministic_part():
    s = build_schedule(100)
    x0 = make_rng(0).random((3, 8)).astype(np.float32)
    out = diffuse(x0, 20, s, ZeroRng())
    assert np.allclose(out, np.float32(np.sqrt(s.alpha_bar[19])) * x0, atol=1e-7)


def test_diffuse_marginal_moments_at_final_step():
    s = build_schedule(100)
    x0 = make_rng(3).random(8).astype(np.float32)
    rng = make_rng(4)
    draws = np.stack([diffuse(x0, s.T, s, rng) for _ in range(10_000)])
    want_mean = np.sqrt(s.alpha_bar[-1]) * x0
    want_var = 1.0 - s.alpha_bar[-1]
    se_mean = np.sqrt(want_var / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - want_mean) < 3 * se_mean)
    se_var = want_var * np.sqrt(2.0 / (draws.shape[0] - 1))
    assert np.all(np.abs(draws.var(axis=0) - want_var) < 3 * se_var)


def test_diffuse_timestep_bounds():
    s = build_schedule(10)
    x = np.zeros(4, dtype=np.float32)
    with pytest.raises(TimestepError):
        diffuse(x, 0, s, make_rng(0))
    with pytest.raises(TimestepError):
        diffuse(x, 11, s, make_rng(0))


def test_reverse_step_zero_noise_prediction():
    s = build_schedule(100)
    quiet = replace(s, sigma=np.zeros_like(s.sigma))
    d = Denoiser(kind="zero", schedule=quiet)
    x_t = make_rng(5).random(6).astype(np.float32)
    out = reverse_step(x_t, 30, d, quiet, make_rng(1))
    assert np.allclose(out, x_t / np.float32(np.sqrt(quiet.alpha[29])), atol=1e-7)
    assert np.allclose(predict_noise(d, x_t, 30), 0.0)


def test_reverse_step_final_step_is_deterministic():
    s = build_schedule(100)
    d = oracle_denoiser(s)
    x_1 = make_rng(6).random(6).astype(np.float32)
    a = reverse_step(x_1, 1, d, s, make_rng(1))
    b = reverse_step(x_1, 1, d, s, make_rng(2))
    assert np.array_equal(a, b)


def test_oracle_denoiser_matches_closed_form():
    s = build_schedule(100)
    d = oracle_denoiser(s)
    x_t = make_rng(9).standard_normal(16).astype(np.float32)
    t = 25
    abar = s.alpha_bar[t - 1]
    assert np.allclose(predict_noise(d, x_t, t),
                       np.float32(np.sqrt(1 - abar)) * x_t, atol=1e-6)
    assert np.allclose(predict_clean(d, x_t, t),
                       np.float32(np.sqrt(abar)) * x_t, atol=1e-6)


def test_oracle_round_trip_preserves_standard_normal_moments():
    s = build_schedule(100)
    d = oracle_denoiser(s)
    rng = make_rng(12)
    x0 = rng.standard_normal((10_000, 8), dtype=np.float32)
    for t in (10, 30):
        x_t = diffuse(x0, t, s, rng)
        out = purify(x_t, TimestepPlan(t, 0, BOUNDS), d, s, rng, clamp=False)
        assert abs(float(out.mean())) < 0.05
        assert abs(float(out.var()) - 1.0) < 0.05


def test_plan_validation():
    assert TimestepPlan(20, 15, BOUNDS).t_p == 35
    with pytest.raises(PlanError):
        TimestepPlan(0, 0, BOUNDS)
    with pytest.raises(PlanError):
        TimestepPlan(50, 0, BOUNDS)  # sum must stay under the budget
    with pytest.raises(PlanError):
        TimestepPlan(30, 30, BOUNDS)
    with pytest.raises(PlanError):
        TimestepPlan(1, -1, BOUNDS)


def test_plan_sampler_respects_budget():
    sampler = uniform_plan_sampler((5, 30), (0, 10), BOUNDS)
    rng = make_rng(17)
    for _ in range(500):
        plan = sampler(rng)
        assert 1 <= plan.t_d <= BOUNDS.t_d_max
        assert 0 <= plan.t_plus <= BOUNDS.t_plus_max
        assert plan.t_d + plan.t_plus < BOUNDS.t_d_max


def test_bounds_against_schedule_length():
    PlanBounds(50, 49).check_schedule(100)
    with pytest.raises(ConfigError):
        PlanBounds(50, 50).check_schedule(100)


def test_purify_with_no_plus_steps_equals_symmetric_chain():
    s = build_schedule(100)
    d = oracle_denoiser(s)
    x = make_rng(3).standard_normal((4, 8), dtype=np.float32)
    plan = TimestepPlan(12, 0, BOUNDS)
    got = purify(x, plan, d, s, make_rng(42), clamp=False)
    rng = make_rng(42)
    manual = x
    for t in range(12, 0, -1):
        manual = reverse_step(manual, t, d, s, rng)
    assert np.array_equal(got, manual)


def test_purify_rejects_plans_beyond_schedule():
    s = build_schedule(30)
    d = oracle_denoiser(s)
    with pytest.raises(TimestepError):
        purify(np.zeros(4, dtype=np.float32), TimestepPlan(20, 15, BOUNDS), d, s, make_rng(0))


def test_injected_noise_dominates_attack_at_default_schedule():
    s = build_schedule(100)
    abar = s.alpha_bar[19]  # t_d = 20
    assert np.sqrt(abar) * (8.0 / 256.0) < 0.2 * np.sqrt(1.0 - abar)


def test_iterated_kernel_matches_closed_form_marginals():
    s = build_schedule(100)
    x0 = make_rng(8).random(8).astype(np.float32)
    rng = make_rng(9)
    n = 10_000
    for t in (1, 5, 20):
        x = np.broadcast_to(x0, (n, 8)).astype(np.float32).copy()
        for step in range(1, t + 1):
            noise = rng.standard_normal((n, 8), dtype=np.float32)
            x = np.float32(np.sqrt(1.0 - s.beta[step - 1])) * x \
                + np.float32(np.sqrt(s.beta[step - 1])) * noise
        abar = s.alpha_bar[t - 1]
        want_mean = np.sqrt(abar) * x0
        want_var = 1.0 - abar
        se_mean = np.sqrt(want_var / n)
        se_var = want_var * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(x.mean(axis=0) - want_mean) < 3 * se_mean + 1e-9)
        assert np.all(np.abs(x.var(axis=0) - want_var) < 3 * se_var + 1e-9)


def test_pipeline_loss_boundaries():
    rng = make_rng(2)
    y = rng.random((6, 16)).astype(np.float32)
    out = (y + rng.normal(0, 0.05, size=y.shape)).astype(np.float32)
    mse = float(np.mean((out.astype(np.float64) - y) ** 2))
    loss0, grad0 = pipeline_loss_and_grad(y, out, DenoiserLoss(zeta=0.0, iota_prime=0.5))
    assert loss0 == pytest.approx(mse, rel=1e-6)
    assert np.allclose(grad0, (2.0 / out.size) * (out - y), atol=1e-7)
    loss1, _ = pipeline_loss_and_grad(y, out, DenoiserLoss(zeta=1.0, iota_prime=0.5))
    assert loss1 == pytest.approx(0.5 * (1.0 - ssim_avg(y, out)), abs=1e-6)
    with pytest.raises(ConfigError):
        DenoiserLoss(zeta=1.5)


def test_trained_denoiser_halves_the_pipeline_loss(stack):
    losses = stack.denoiser_losses
    assert len(losses) == stack.cfg.epochs_denoiser
    assert losses[-1] < 0.5 * losses[0]


def test_purification_beats_raw_diffusion_similarity(stack):
    cfg = stack.cfg
    batch = stack.eval_data.images[:64]
    rng = make_rng(31)
    noisy = diffuse(batch, 20, stack.schedule, rng)
    cleaned = purify(noisy, TimestepPlan(20, 0, cfg.bounds()), stack.denoiser,
                     stack.schedule, rng)
    wins = [ssim(a, c) >= ssim(a, n) for a, c, n in zip(batch, cleaned, noisy)]
    assert np.mean(wins) >= 0.9


def test_train_denoiser_rejects_empty_dataset(stack):
    with pytest.raises(DataError):
        train_denoiser(np.zeros((0, 4), dtype=np.float32), stack.codec,
                       ChannelConfig(9.0), uniform_plan_sampler(), DenoiserLoss(),
                       1, make_rng(0), stack.schedule)


def test_denoiser_checkpoint_round_trip(stack):
    buf = io.BytesIO()
    write_denoiser(buf, stack.denoiser)
    buf.seek(0)
    back = read_denoiser(buf)
    assert back.schedule.T == stack.schedule.T
    assert np.allclose(back.schedule.beta, stack.schedule.beta)
    for a, b in zip(stack.denoiser.net.layers, back.net.layers):
        assert np.array_equal(a.weight, b.weight)
    with pytest.raises(ConfigError):
        write_denoiser(io.BytesIO(), oracle_denoiser(stack.schedule))


def test_denoiser_kind_validation():
    s = build_schedule(10)
    with pytest.raises(ConfigError):
        Denoiser(kind="learned", schedule=s)
    with pytest.raises(ConfigError):
        Denoiser(kind="warp", schedule=s)
