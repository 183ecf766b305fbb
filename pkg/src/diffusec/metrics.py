"""Batch evaluation metrics and the reward that drives step selection.

Three quantities are read off a purified batch: average structural
similarity to the originals, the root-fraction of images whose adversarial
class survived purification, and the root-fraction purified into a class
that is new but still wrong. The reward combines them with signed weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import Classifier, classify
from .errors import ConfigError, ShapeError
from .tensor import SsimParams, ssim


@dataclass(frozen=True)
class RewardConfig:
    eta: float = 1.0     # overall scale
    eta1: float = -0.8   # weight on (1 - ssim)
    eta2: float = -0.7   # weight on the surviving-attack rate
    eta3: float = -0.5   # weight on the new-but-wrong rate

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.eta, self.eta1, self.eta2, self.eta3)):
            raise ConfigError("reward weights must be finite")


@dataclass
class BatchOutcome:
    """Original, attacked, and final images for one evaluation round."""

    x: np.ndarray
    x_adv: np.ndarray
    x_final: np.ndarray
    classifier: Classifier

    def __post_init__(self):
        if not (self.x.shape == self.x_adv.shape == self.x_final.shape):
            raise ShapeError("outcome batches must share one shape")

    def classes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.atleast_1d(classify(self.classifier, self.x)),
                np.atleast_1d(classify(self.classifier, self.x_adv)),
                np.atleast_1d(classify(self.classifier, self.x_final)))


def ssim_avg(x: np.ndarray, x_final: np.ndarray,
             params: SsimParams | None = None) -> float:
    """Mean per-image ssim across the batch."""
    if x.shape != x_final.shape:
        raise ShapeError("batch shapes differ")
    a = np.atleast_2d(x)
    b = np.atleast_2d(x_final)
    return float(np.mean([ssim(ai, bi, params) for ai, bi in zip(a, b)]))


def adv_rate(outcome: BatchOutcome) -> float:
    """Root of the fraction of images where the attack changed the class and
    the purified image still lands in the adversarial class."""
    c, c_adv, c_fin = outcome.classes()
    hits = (c != c_adv) & (c_adv == c_fin)
    return float(np.sqrt(hits.mean()))


def err_rate(outcome: BatchOutcome) -> float:
    """Root of the fraction of images purified into a new but wrong class:
    the attack changed the class, and the final class matches neither the
    original nor the adversarial one."""
    c, c_adv, c_fin = outcome.classes()
    hits = (c != c_adv) & (c_adv != c_fin) & (c != c_fin)
    return float(np.sqrt(hits.mean()))


def reward(outcome: BatchOutcome, cfg: RewardConfig,
           ssim_params: SsimParams | None = None) -> float:
    """Scalar reward for one round: eta * (eta1*(1-ssim) + eta2*adv + eta3*err)."""
    s = ssim_avg(outcome.x, outcome.x_final, ssim_params)
    return cfg.eta * (cfg.eta1 * (1.0 - s)
                      + cfg.eta2 * adv_rate(outcome)
                      + cfg.eta3 * err_rate(outcome))
