"""Forward diffusing, asymmetric reverse denoising, and denoiser training.

The sender drowns perturbations by running the image t_D steps up the
noise schedule; the receiver runs the reverse chain for t_P = t_D + t_plus
steps, where the extra plus steps absorb whatever the channel added on
top. A learned noise-prediction net drives the reverse chain for images;
an exact analytic denoiser for standard-normal sources is provided as an
oracle for verification.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np

from .channel import ChannelConfig, transmit
from .codec import Codec, decode, encode
from .errors import ConfigError, DataError, PlanError, ShapeError, TimestepError
from .nn import (DenseNet, GradientSet, apply_update, backprop, build_net,
                 forward, make_optimizer, read_net, write_net, zero_grads)
from .tensor import Rng, clamp01, ssim_value_and_grad, SsimParams


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha sequences of length T, with sigma_t^2 = beta_t for the
    reverse-step noise."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar is the running product of (1 - beta)."""
    if T < 2:
        raise ConfigError("schedule needs T >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha,
                         alpha_bar=np.cumprod(alpha), sigma=np.sqrt(beta))


@dataclass(frozen=True)
class PlanBounds:
    """Step budgets: both step counts stay well below the schedule length."""

    t_d_max: int = 50
    t_plus_max: int = 50

    def check_schedule(self, T: int) -> None:
        if not self.t_d_max + self.t_plus_max < T:
            raise ConfigError(
                f"bounds {self.t_d_max}+{self.t_plus_max} must stay below T={T}")


@dataclass(frozen=True)
class TimestepPlan:
    """The (t_d, t_plus) pair the two ends agree on; validated on construction."""

    t_d: int
    t_plus: int
    bounds: PlanBounds = PlanBounds()

    def __post_init__(self):
        if not 1 <= self.t_d <= self.bounds.t_d_max:
            raise PlanError(f"t_d={self.t_d} outside [1, {self.bounds.t_d_max}]")
        if not 0 <= self.t_plus <= self.bounds.t_plus_max:
            raise PlanError(f"t_plus={self.t_plus} outside [0, {self.bounds.t_plus_max}]")
        if not self.t_d + self.t_plus < self.bounds.t_d_max:
            raise PlanError(
                f"t_d + t_plus = {self.t_d + self.t_plus} must stay below {self.bounds.t_d_max}")

    @property
    def t_p(self) -> int:
        return self.t_d + self.t_plus


@dataclass
class Denoiser:
    """Noise predictor for the reverse chain.

    "learned" wraps a net that estimates the clean image from (x_t, t); the
    residual noise is derived from that estimate, which keeps the net's
    outputs bounded instead of forcing it to realize the 1/sqrt(1-abar_t)
    gain a direct noise regression would need at small t. "gaussian_oracle"
    is the exact closed form for a standard-normal source, and "zero" is
    the degenerate predict-nothing baseline."""

    kind: str  # "learned" | "gaussian_oracle" | "zero"
    schedule: NoiseSchedule
    net: DenseNet | None = None

    def __post_init__(self):
        if self.kind == "learned":
            if self.net is None:
                raise ConfigError("learned denoiser needs a net")
            if self.net.in_dim != self.net.out_dim + 1:
                raise ConfigError("denoiser net must take image dim + 1 timestep feature")
        elif self.kind not in ("gaussian_oracle", "zero"):
            raise ConfigError(f"unknown denoiser kind {self.kind!r}")


def oracle_denoiser(schedule: NoiseSchedule) -> Denoiser:
    return Denoiser(kind="gaussian_oracle", schedule=schedule)


def _with_time_feature(x: np.ndarray, t: int, T: int) -> np.ndarray:
    feat = np.full((*x.shape[:-1], 1), t / T, dtype=np.float32)
    return np.concatenate([x, feat], axis=-1)


def predict_clean(d: Denoiser, x_t: np.ndarray, t: int) -> np.ndarray:
    """The denoiser's clean-image estimate at level t.

    The learned variant adds a trained correction to the zero-noise
    inversion x_t / sqrt(abar_t); the skip keeps per-image structure in the
    estimate, so the net only has to remove noise rather than reproduce the
    whole image."""
    i = t - 1
    if d.kind == "gaussian_oracle":
        # for x0 ~ N(0, I) the posterior mean is sqrt(abar_t) x_t
        return np.float32(np.sqrt(d.schedule.alpha_bar[i])) * x_t
    if d.kind == "zero":
        return x_t / np.float32(np.sqrt(d.schedule.alpha_bar[i]))
    return forward(d.net, _with_time_feature(x_t, t, d.schedule.T))


def predict_noise(d: Denoiser, x_t: np.ndarray, t: int) -> np.ndarray:
    """Residual standard noise implied by the clean-image estimate."""
    i = t - 1
    if d.kind == "zero":
        return np.zeros_like(x_t)
    abar = d.schedule.alpha_bar[i]
    x0_hat = predict_clean(d, x_t, t)
    return (x_t - np.float32(np.sqrt(abar)) * x0_hat) / np.float32(np.sqrt(1.0 - abar))


def _check_t(t: int, schedule: NoiseSchedule) -> None:
    if not 1 <= t <= schedule.T:
        raise TimestepError(f"t={t} outside [1, {schedule.T}]")


def diffuse(x0: np.ndarray, t: int, schedule: NoiseSchedule, rng: Rng) -> np.ndarray:
    """Jump straight to noise level t: sqrt(abar_t) x0 + sqrt(1 - abar_t) n."""
    _check_t(t, schedule)
    x0 = np.asarray(x0, dtype=np.float32)
    abar = schedule.alpha_bar[t - 1]
    noise = rng.standard_normal(x0.shape, dtype=np.float32)
    return np.float32(np.sqrt(abar)) * x0 + np.float32(np.sqrt(1.0 - abar)) * noise


def _reverse_mean(x_t: np.ndarray, eps_hat: np.ndarray, t: int,
                  schedule: NoiseSchedule) -> np.ndarray:
    i = t - 1
    coef = schedule.beta[i] / np.sqrt(1.0 - schedule.alpha_bar[i])
    return (x_t - np.float32(coef) * eps_hat) / np.float32(np.sqrt(schedule.alpha[i]))


def reverse_step(x_t: np.ndarray, t: int, d: Denoiser, schedule: NoiseSchedule,
                 rng: Rng) -> np.ndarray:
    """One reverse-chain draw; the final step (t = 1) is noise-free."""
    _check_t(t, schedule)
    x_t = np.asarray(x_t, dtype=np.float32)
    mean = _reverse_mean(x_t, predict_noise(d, x_t, t), t, schedule)
    if t == 1:
        return mean
    noise = rng.standard_normal(x_t.shape, dtype=np.float32)
    return mean + np.float32(schedule.sigma[t - 1]) * noise


def purify(x_received: np.ndarray, plan: TimestepPlan, d: Denoiser,
           schedule: NoiseSchedule, rng: Rng, clamp: bool = True) -> np.ndarray:
    """Treat the received batch as sitting at level t_P = t_d + t_plus and
    run the reverse chain down to a clean image. Images should keep the
    default clamp; pass clamp=False for unbounded (e.g. Gaussian) sources."""
    if plan.t_p > schedule.T:
        raise TimestepError(f"plan reaches t={plan.t_p} beyond T={schedule.T}")
    x = np.asarray(x_received, dtype=np.float32)
    for t in range(plan.t_p, 0, -1):
        x = reverse_step(x, t, d, schedule, rng)
    return clamp01(x) if clamp else x


# ---------------------------------------------------------------------------
# Denoiser training: backprop through the whole reverse chain against the
# clean images, with the frozen codec and channel in the loop.


@dataclass(frozen=True)
class DenoiserLoss:
    """Blend of a similarity term and squared error on the pipeline output."""

    zeta: float = 0.8
    iota_prime: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.zeta <= 1.0:
            raise ConfigError("zeta must lie in [0, 1]")


def uniform_plan_sampler(t_d_range: tuple[int, int] = (5, 30),
                         t_plus_range: tuple[int, int] = (0, 10),
                         bounds: PlanBounds = PlanBounds()) -> Callable[[Rng], TimestepPlan]:
    """Plans with both step counts drawn uniformly, trimmed to the budget."""

    def sample(rng: Rng) -> TimestepPlan:
        t_d = int(rng.integers(t_d_range[0], t_d_range[1] + 1))
        hi = min(t_plus_range[1], bounds.t_d_max - 1 - t_d)
        t_plus = int(rng.integers(t_plus_range[0], hi + 1)) if hi >= t_plus_range[0] else 0
        return TimestepPlan(t_d, t_plus, bounds)

    return sample


def pipeline_loss_and_grad(targets: np.ndarray, outputs: np.ndarray,
                           loss_cfg: DenoiserLoss,
                           ssim_params: SsimParams | None = None) -> tuple[float, np.ndarray]:
    """zeta*iota'*(1 - mean ssim) + (1-zeta)*mse, with the gradient at outputs."""
    p = ssim_params or SsimParams()
    b = targets.shape[0]
    grad = np.zeros_like(outputs)
    loss = 0.0
    if loss_cfg.zeta > 0.0:
        total = 0.0
        for k in range(b):
            value, g = ssim_value_and_grad(targets[k], outputs[k], p)
            total += value
            grad[k] -= (loss_cfg.zeta * loss_cfg.iota_prime / b) * g
        loss += loss_cfg.zeta * loss_cfg.iota_prime * (1.0 - total / b)
    if loss_cfg.zeta < 1.0:
        diff = outputs - targets
        loss += (1.0 - loss_cfg.zeta) * float(np.mean(diff.astype(np.float64) ** 2))
        grad += (1.0 - loss_cfg.zeta) * (2.0 / diff.size) * diff
    return loss, grad


def _posterior_coefficients(t: int, schedule: NoiseSchedule) -> tuple[float, float]:
    """Reverse-mean weights on (x_t, clean estimate); algebraically the same
    mean as _reverse_mean with the derived residual plugged in."""
    i = t - 1
    abar_prev = schedule.alpha_bar[i - 1] if i > 0 else 1.0
    denom = 1.0 - schedule.alpha_bar[i]
    on_x = np.sqrt(schedule.alpha[i]) * (1.0 - abar_prev) / denom
    on_clean = schedule.beta[i] * np.sqrt(abar_prev) / denom
    return float(on_x), float(on_clean)


def _purify_recorded(x: np.ndarray, t_p: int, net: DenseNet,
                     schedule: NoiseSchedule, rng: Rng):
    """Reverse chain that keeps each step input for the backward pass."""
    trail = []
    for t in range(t_p, 0, -1):
        trail.append((x, t))
        x0_hat = forward(net, _with_time_feature(x, t, schedule.T))
        on_x, on_clean = _posterior_coefficients(t, schedule)
        x = np.float32(on_x) * x + np.float32(on_clean) * x0_hat
        if t > 1:
            x = x + np.float32(schedule.sigma[t - 1]) * rng.standard_normal(x.shape, dtype=np.float32)
    return x, trail


def _backprop_chain(net: DenseNet, trail, grad_x0: np.ndarray,
                    schedule: NoiseSchedule) -> GradientSet:
    total = zero_grads(net)
    g = grad_x0
    n_pixels = net.out_dim
    for x_t, t in reversed(trail):
        on_x, on_clean = _posterior_coefficients(t, schedule)
        step = backprop(net, _with_time_feature(x_t, t, schedule.T),
                        np.float32(on_clean) * g)
        total.add_(step)
        g = np.float32(on_x) * g + step.wrt_input[..., :n_pixels]
    return total


def train_denoiser(images: np.ndarray, codec: Codec, channel: ChannelConfig,
                   plan_sampler: Callable[[Rng], TimestepPlan],
                   loss_cfg: DenoiserLoss, epochs: int, rng: Rng,
                   schedule: NoiseSchedule, hidden=(192, 192),
                   batch_size: int = 128, learning_rate: float = 1e-3,
                   fine_tune_fraction: float = 0.1,
                   ssim_params: SsimParams | None = None) -> tuple[Denoiser, list[float]]:
    """Train the noise predictor on full pipeline output vs the clean images.

    Each batch runs diffuse -> encode -> channel -> decode -> purify with a
    freshly sampled plan; the codec stays frozen. Optimization is staged:
    most epochs regress every visited chain state onto the residual pointing
    at the clean target (stable, no gradient through the chain), and the
    final fraction backpropagates the blended similarity/squared-error loss
    through the whole reverse chain. The reported per-epoch trace is always
    that blended pipeline loss. Returns the denoiser and the trace.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.shape[0] == 0:
        raise DataError("empty training set")
    n_pixels = images.shape[1]
    net = build_net([n_pixels + 1, *hidden, n_pixels],
                    ["relu"] * len(hidden) + ["linear"], rng)
    opt = make_optimizer(net, "adam", learning_rate)
    # the exact chain gradient is stiff; the closing phase takes small steps
    opt_chain = make_optimizer(net, "adam", learning_rate / 20.0)
    losses = []
    n = images.shape[0]
    fine_tune_start = epochs - max(0, int(round(epochs * fine_tune_fraction)))
    prior_end = (fine_tune_start * 2) // 3
    for epoch in range(epochs):
        epoch_loss = 0.0
        n_batches = 0
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            xb = images[order[start:start + batch_size]]
            plan = plan_sampler(rng)
            x_dif = diffuse(xb, plan.t_d, schedule, rng)
            x_rx = decode(codec, transmit(encode(codec, x_dif), channel, rng))
            x0_raw, trail = _purify_recorded(x_rx, plan.t_p, net, schedule, rng)
            loss, grad_out = pipeline_loss_and_grad(xb, clamp01(x0_raw), loss_cfg,
                                                    ssim_params)
            if epoch < prior_end:
                # learn the data prior on forward-diffused states first; the
                # rolled chain is garbage while the net is random
                grads = _prior_grads(net, xb, plan.t_p, schedule, rng)
                apply_update(net, grads, opt)
            elif epoch < fine_tune_start:
                grads = _regression_grads(net, trail, xb, schedule)
                apply_update(net, grads, opt)
            else:
                in_range = ((x0_raw > 0.0) & (x0_raw < 1.0)).astype(np.float32)
                grads = _backprop_chain(net, trail, grad_out * in_range, schedule)
                apply_update(net, grads, opt_chain)
            epoch_loss += loss
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return Denoiser(kind="learned", schedule=schedule, net=net), losses


def _prior_grads(net: DenseNet, targets: np.ndarray, t_top: int,
                 schedule: NoiseSchedule, rng: Rng) -> GradientSet:
    """Squared-error gradients for the clean-image estimate on synthetic
    forward-diffused states at a few levels up to t_top."""
    feats = []
    for t in {1, max(1, t_top // 2), t_top}:
        feats.append(_with_time_feature(diffuse(targets, t, schedule, rng), t,
                                        schedule.T))
    features = np.concatenate(feats, axis=0)
    wanted = np.concatenate([targets] * len(feats), axis=0)
    predicted = forward(net, features)
    grad_out = (2.0 / predicted.size) * (predicted - wanted)
    return backprop(net, features, grad_out)


def _regression_grads(net: DenseNet, trail, targets: np.ndarray,
                      schedule: NoiseSchedule) -> GradientSet:
    """Squared-error gradients pulling the clean-image estimate at every
    visited chain state toward the clean targets."""
    feats = [_with_time_feature(x_t, t, schedule.T) for x_t, t in trail]
    features = np.concatenate(feats, axis=0)
    wanted = np.concatenate([targets] * len(trail), axis=0)
    predicted = forward(net, features)
    grad_out = (2.0 / predicted.size) * (predicted - wanted)
    return backprop(net, features, grad_out)


# ---------------------------------------------------------------------------
# Checkpoints: schedule header (T, beta_start, beta_end) followed by a DNET
# block for the net.


def write_denoiser(stream: BinaryIO, d: Denoiser) -> None:
    if d.kind != "learned":
        raise ConfigError("only learned denoisers are saved")
    stream.write(struct.pack("<Idd", d.schedule.T,
                             float(d.schedule.beta[0]), float(d.schedule.beta[-1])))
    write_net(stream, d.net)


def read_denoiser(stream: BinaryIO) -> Denoiser:
    raw = stream.read(20)
    if len(raw) != 20:
        raise ShapeError("truncated denoiser checkpoint")
    T, beta_start, beta_end = struct.unpack("<Idd", raw)
    schedule = build_schedule(T, beta_start, beta_end)
    return Denoiser(kind="learned", schedule=schedule, net=read_net(stream))


def save_denoiser(path, d: Denoiser) -> None:
    with open(path, "wb") as f:
        write_denoiser(f, d)


def load_denoiser(path) -> Denoiser:
    with open(path, "rb") as f:
        return read_denoiser(f)
