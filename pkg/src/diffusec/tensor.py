"""Seeded randomness, Gaussian sampling, SSIM, and the DTNS tensor file format.

Arrays are plain numpy ndarrays in float32; shape checks and file IO live
here so the rest of the package can stay free of byte-level concerns.
Every stochastic operation takes an explicit generator, so a fixed seed
reproduces a run bit for bit.
"""

from __future__ import annotations

import io
import re
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    return np.random.default_rng(seed)


def split_rng(rng: Rng, n: int) -> list[Rng]:
    """Derive n independent child generators (for parallel-safe streams)."""
    return rng.spawn(n)


def gaussian_sample(shape: Sequence[int], rng: Rng) -> np.ndarray:
    """Draw i.i.d. standard-normal float32 values of the given shape."""
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid sample shape {shape!r}: need at least one dim, all >= 1")
    return rng.standard_normal(shape, dtype=np.float32)


def clamp01(x: np.ndarray) -> np.ndarray:
    """Clamp every element into [0, 1]; dtype is preserved."""
    return np.clip(x, 0.0, 1.0)


_SLIDING_RE = re.compile(r"^sliding\((\d+)\)$")


@dataclass(frozen=True)
class SsimParams:
    """Stabilizers and windowing for the structural similarity score.

    Defaults follow the common (0.01*R)^2 / (0.03*R)^2 convention with a
    dynamic range R of 1. ``window`` is either "global" (one mean/variance
    per image) or "sliding(k)" with odd k for local k-by-k statistics.
    """

    c1: float = 1e-4
    c2: float = 9e-4
    window: str = "global"

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ConfigError("ssim stabilizers c1, c2 must be strictly positive")
        if self.window != "global":
            m = _SLIDING_RE.match(self.window)
            if m is None:
                raise ConfigError(f"unknown ssim window {self.window!r}")
            k = int(m.group(1))
            if k < 1 or k % 2 == 0:
                raise ConfigError("sliding window size must be odd and >= 1")

    def window_size(self) -> int | None:
        """Side length of the sliding window, or None for global statistics."""
        m = _SLIDING_RE.match(self.window)
        return int(m.group(1)) if m else None


def _ssim_formula(mu_a, mu_b, var_a, var_b, cov_ab, p: SsimParams):
    num = (2.0 * mu_a * mu_b + p.c1) * (2.0 * cov_ab + p.c2)
    den = (mu_a * mu_a + mu_b * mu_b + p.c1) * (var_a + var_b + p.c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, params: SsimParams | None = None) -> float:
    """Structural similarity of two equal-shape images, clamped to [0, 1].

    With the default global window, means, variances, and the
    cross-correlation are taken over the whole image; the sliding variant
    averages the same formula over every k-by-k patch of a 2-D image.
    1 means b is identical to a; values near 0 mean no shared structure.
    """
    p = params or SsimParams()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    k = p.window_size()
    if k is None:
        raw = _ssim_formula(a.mean(), b.mean(), a.var(), b.var(),
                            ((a - a.mean()) * (b - b.mean())).mean(), p)
    else:
        if a.ndim != 2:
            raise ShapeError("sliding-window ssim needs a 2-D image")
        if k > min(a.shape):
            raise ShapeError(f"window {k} exceeds image sides {a.shape}")
        wa = np.lib.stride_tricks.sliding_window_view(a, (k, k))
        wb = np.lib.stride_tricks.sliding_window_view(b, (k, k))
        mu_a = wa.mean(axis=(-1, -2))
        mu_b = wb.mean(axis=(-1, -2))
        var_a = wa.var(axis=(-1, -2))
        var_b = wb.var(axis=(-1, -2))
        cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
        raw = _ssim_formula(mu_a, mu_b, var_a, var_b, cov, p).mean()
    return float(min(max(raw, 0.0), 1.0))


def ssim_value_and_grad(a: np.ndarray, b: np.ndarray,
                        params: SsimParams | None = None) -> tuple[float, np.ndarray]:
    """Raw (unclamped) global-window ssim of (a, b) and its gradient in b.

    Used by the trainers; only the global window is differentiated.
    """
    p = params or SsimParams()
    if p.window_size() is not None:
        raise ConfigError("gradients are only available for the global window")
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if a64.shape != b64.shape:
        raise ShapeError(f"ssim shape mismatch: {a64.shape} vs {b64.shape}")
    n = a64.size
    mu_a, mu_b = a64.mean(), b64.mean()
    da, db = a64 - mu_a, b64 - mu_b
    var_a, var_b = (da * da).mean(), (db * db).mean()
    cov = (da * db).mean()
    a1 = 2.0 * mu_a * mu_b + p.c1
    a2 = 2.0 * cov + p.c2
    b1 = mu_a * mu_a + mu_b * mu_b + p.c1
    b2 = var_a + var_b + p.c2
    value = (a1 * a2) / (b1 * b2)
    # d mu_b / d b_i = 1/n, d var_b = 2 db_i / n, d cov = da_i / n
    grad = ((2.0 * mu_a / n) * a2 + a1 * (2.0 / n) * da) / (b1 * b2) \
        - value * ((2.0 * mu_b / n) * b2 + b1 * (2.0 / n) * db) / (b1 * b2)
    return float(value), grad.astype(b.dtype if hasattr(b, "dtype") else np.float64)


# ---------------------------------------------------------------------------
# DTNS tensor files: magic "DTNS", version byte, rank byte, rank x u32 dims,
# then product(dims) float32 values, everything little-endian.

_DTNS_MAGIC = b"DTNS"
_DTNS_VERSION = 1


def write_tensor(stream: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 0 or arr.ndim > 255:
        raise ShapeError(f"DTNS rank must be in [1, 255], got {arr.ndim}")
    stream.write(_DTNS_MAGIC)
    stream.write(struct.pack("<BB", _DTNS_VERSION, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(stream: BinaryIO) -> np.ndarray:
    head = stream.read(6)
    if len(head) < 6 or head[:4] != _DTNS_MAGIC:
        raise ShapeError("not a DTNS tensor stream")
    version, rank = head[4], head[5]
    if version != _DTNS_VERSION:
        raise ShapeError(f"unsupported DTNS version {version}")
    dims = struct.unpack(f"<{rank}I", stream.read(4 * rank))
    count = int(np.prod(dims))
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise ShapeError("truncated DTNS payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()
