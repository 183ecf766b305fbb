"""AWGN channel, channel-level semantic attacks, the toy classifier, and PGD.

The channel adds natural noise calibrated to a target SNR plus an optional
malicious noise term whose power is expressed relative to the signal power.
PGD crafts data-source attacks against the classifier under an l-infinity
budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .nn import DenseNet, backprop, build_net, forward, make_optimizer, apply_update
from .tensor import Rng, clamp01

NOISELESS = float("inf")  # snr_db sentinel for a perfect channel


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = 9.0
    attack_noise_power: float = 0.0  # linear power of the malicious term, relative to signal power

    def __post_init__(self):
        if self.attack_noise_power < 0:
            raise ConfigError("attack noise power must be >= 0")


def snr_to_sigma(snr_db: float, signal_power: float) -> float:
    """Noise standard deviation for a target SNR: sigma = sqrt(P / 10^(snr/10))."""
    if not signal_power > 0:
        raise ConfigError("signal power must be positive")
    if snr_db == NOISELESS:
        return 0.0
    return float(np.sqrt(signal_power / 10.0 ** (snr_db / 10.0)))


def transmit(z: np.ndarray, cfg: ChannelConfig, rng: Rng) -> np.ndarray:
    """Pass a symbol batch through the AWGN channel (identity channel matrix).

    Natural noise is calibrated against the measured mean-square power of
    this batch; the malicious term is extra white noise with
    attack_noise_power times the signal power.
    """
    z = np.asarray(z, dtype=np.float32)
    signal_power = float(np.mean(z.astype(np.float64) ** 2))
    if signal_power == 0.0:
        return z.copy()
    out = z.copy()
    sigma_c = snr_to_sigma(cfg.snr_db, signal_power)
    if sigma_c > 0:
        out = out + sigma_c * rng.standard_normal(z.shape, dtype=np.float32)
    if cfg.attack_noise_power > 0:
        sigma_a = float(np.sqrt(cfg.attack_noise_power * signal_power))
        out = out + sigma_a * rng.standard_normal(z.shape, dtype=np.float32)
    return out


# ---------------------------------------------------------------------------
# Classifier


@dataclass
class Classifier:
    """Dense classifier over per-pixel standardized inputs.

    mean/scale are the training-set pixel statistics; standardizing is the
    usual preprocessing and is treated as part of the model for gradients.
    """

    net: DenseNet
    n_classes: int
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        if self.net.out_dim != self.n_classes:
            raise ConfigError("classifier output dim must equal the class count")

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if self.mean is None:
            return x
        return (x - self.mean) / self.scale


def logits(clf: Classifier, x: np.ndarray) -> np.ndarray:
    return forward(clf.net, clf.standardize(x))


def classify(clf: Classifier, x: np.ndarray):
    """Argmax class of one image [N] or a batch [B, N]; ties go to the lowest index."""
    out = logits(clf, x)
    if out.ndim == 1:
        return int(np.argmax(out))
    return np.argmax(out, axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_grad(raw_logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    probs = _softmax(raw_logits.astype(np.float64))
    b = raw_logits.shape[0]
    idx = np.arange(b)
    loss = float(-np.log(np.maximum(probs[idx, labels], 1e-12)).mean())
    grad = probs.copy()
    grad[idx, labels] -= 1.0
    return loss, (grad / b).astype(np.float32)


def train_classifier(images: np.ndarray, labels: np.ndarray, n_classes: int,
                     epochs: int, rng: Rng, hidden=(64, 64), batch_size: int = 128,
                     learning_rate: float = 1e-3) -> tuple[Classifier, float]:
    """Cross-entropy training of a dense classifier; returns it with train accuracy."""
    if n_classes < 2:
        raise ConfigError("need at least two classes")
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise DataError("empty training set")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError("label out of range")
    dims = [images.shape[1], *hidden, n_classes]
    acts = ["relu"] * len(hidden) + ["linear"]
    net = build_net(dims, acts, rng)
    mean = images.mean(axis=0)
    scale = images.std(axis=0) + np.float32(1e-3)
    clf = Classifier(net, n_classes, mean=mean, scale=scale)
    opt = make_optimizer(net, "adam", learning_rate)
    standardized = clf.standardize(images)
    n = images.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            take = order[start:start + batch_size]
            xb, yb = standardized[take], labels[take]
            _, grad_logits = cross_entropy_grad(forward(net, xb), yb)
            apply_update(net, backprop(net, xb, grad_logits), opt)
    accuracy = float(np.mean(classify(clf, images) == labels))
    return clf, accuracy


# ---------------------------------------------------------------------------
# PGD data-source attack


@dataclass(frozen=True)
class AttackConfig:
    gamma: float = 8.0 / 256.0  # l-infinity radius in pixel units
    iterations: int = 10
    step_size: float = (8.0 / 256.0) / 4.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("need at least one attack iteration")
        if self.gamma > 0 and not (0 < self.step_size <= self.gamma):
            raise ConfigError("step size must lie in (0, gamma]")


def pgd_attack(x: np.ndarray, labels, clf: Classifier, cfg: AttackConfig,
               rng: Rng) -> np.ndarray:
    """Iterative l-infinity ascent on cross-entropy, projected into the
    gamma-ball around x and into [0, 1]; starts at a random point in the ball."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 1
    x0 = x.reshape(1, -1) if single else x
    y = np.atleast_1d(np.asarray(labels))
    if cfg.gamma == 0.0:
        return x.copy()
    adv = x0 + rng.uniform(-cfg.gamma, cfg.gamma, size=x0.shape).astype(np.float32)
    adv = clamp01(np.clip(adv, x0 - cfg.gamma, x0 + cfg.gamma))
    for _ in range(cfg.iterations):
        std_in = clf.standardize(adv)
        _, grad_logits = cross_entropy_grad(forward(clf.net, std_in), y)
        grad_x = backprop(clf.net, std_in, grad_logits).wrt_input
        if clf.scale is not None:
            grad_x = grad_x / clf.scale
        adv = adv + np.float32(cfg.step_size) * np.sign(grad_x)
        adv = clamp01(np.clip(adv, x0 - cfg.gamma, x0 + cfg.gamma))
    return adv[0] if single else adv
