"""Joint semantic-channel codec: two encoder/decoder pairs and their training.

The semantic pair maps images to a compact embedding and back; the channel
pair maps embeddings to the transmitted symbol vector and back. Training
runs in three phases: the semantic pair alone on a similarity loss, the
channel pair alone through the noisy channel on squared error, then the
whole stack end to end on the similarity loss again.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .channel import ChannelConfig, transmit
from .errors import ConfigError, DataError, MeasurementError
from .nn import (DenseNet, apply_update, backprop, build_net, forward,
                 make_optimizer, read_net, write_net)
from .tensor import Rng, SsimParams, clamp01, ssim, ssim_value_and_grad


@dataclass
class Codec:
    semantic_encoder: DenseNet   # image dim -> embed dim
    channel_encoder: DenseNet    # embed dim -> symbol dim
    channel_decoder: DenseNet    # symbol dim -> embed dim
    semantic_decoder: DenseNet   # embed dim -> image dim

    @property
    def image_dim(self) -> int:
        return self.semantic_encoder.in_dim

    @property
    def embed_dim(self) -> int:
        return self.semantic_encoder.out_dim

    @property
    def symbol_dim(self) -> int:
        return self.channel_encoder.out_dim


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    holdout_ssim: float = 0.0
    gain: float = 0.0


def init_codec(image_dim: int, embed_dim: int, symbol_dim: int, rng: Rng,
               semantic_hidden: int = 128, channel_hidden: int = 56) -> Codec:
    """Fresh compressive codec; the symbol dim must be below the image dim."""
    if not symbol_dim < image_dim:
        raise ConfigError("codec must compress: symbol dim < image dim")
    if embed_dim < symbol_dim:
        raise ConfigError("embed dim below symbol dim would starve the channel pair")
    return Codec(
        semantic_encoder=build_net([image_dim, semantic_hidden, embed_dim],
                                   ["relu", "linear"], rng),
        channel_encoder=build_net([embed_dim, channel_hidden, symbol_dim],
                                  ["relu", "linear"], rng),
        channel_decoder=build_net([symbol_dim, channel_hidden, embed_dim],
                                  ["relu", "linear"], rng),
        semantic_decoder=build_net([embed_dim, semantic_hidden, image_dim],
                                   ["relu", "linear"], rng),
    )


def encode(codec: Codec, x: np.ndarray) -> np.ndarray:
    """Images [B, image_dim] to transmitted symbols [B, symbol_dim]."""
    return forward(codec.channel_encoder, forward(codec.semantic_encoder, x))


def decode(codec: Codec, z_hat: np.ndarray) -> np.ndarray:
    """Received symbols back to images, clamped to [0, 1]."""
    return clamp01(decode_raw(codec, z_hat))


def decode_raw(codec: Codec, z_hat: np.ndarray) -> np.ndarray:
    return forward(codec.semantic_decoder, forward(codec.channel_decoder, z_hat))


def _batches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _ssim_batch_loss(targets: np.ndarray, outputs: np.ndarray, iota: float,
                     params: SsimParams) -> tuple[float, np.ndarray]:
    """iota * (1 - mean ssim) over the batch and its gradient at the outputs."""
    b = targets.shape[0]
    grads = np.empty_like(outputs)
    total = 0.0
    for k in range(b):
        value, g = ssim_value_and_grad(targets[k], outputs[k], params)
        total += value
        grads[k] = -(iota / b) * g
    loss = iota * (1.0 - total / b)
    return loss, grads


def train_semantic(images: np.ndarray, codec: Codec, iota: float, epochs: int,
                   rng: Rng, batch_size: int = 128, learning_rate: float = 1e-3,
                   ssim_params: SsimParams | None = None) -> list[float]:
    """Phase one: semantic encoder + decoder alone over an identity channel,
    minimizing iota * (1 - batch-average ssim). Returns per-epoch losses."""
    if not iota > 0:
        raise ConfigError("iota must be positive")
    images = np.asarray(images, dtype=np.float32)
    if images.shape[0] == 0:
        raise DataError("empty training set")
    p = ssim_params or SsimParams()
    enc, dec = codec.semantic_encoder, codec.semantic_decoder
    opt_e = make_optimizer(enc, "adam", learning_rate)
    opt_d = make_optimizer(dec, "adam", learning_rate)
    losses = []
    for _ in range(epochs):
        epoch_loss = 0.0
        n_batches = 0
        for take in _batches(images.shape[0], batch_size, rng):
            xb = images[take]
            emb = forward(enc, xb)
            out = forward(dec, emb)
            loss, grad_out = _ssim_batch_loss(xb, out, iota, p)
            g_dec = backprop(dec, emb, grad_out)
            g_enc = backprop(enc, xb, g_dec.wrt_input)
            apply_update(dec, g_dec, opt_d)
            apply_update(enc, g_enc, opt_e)
            epoch_loss += loss
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return losses


def train_jsc(embeddings: np.ndarray, codec: Codec, channel: ChannelConfig,
              epochs: int, rng: Rng, batch_size: int = 64,
              learning_rate: float = 1e-3,
              snr_range: tuple[float, float] | None = (-3.0, 12.0)) -> list[float]:
    """Phase two: channel encoder + decoder through the simulated channel,
    minimizing mean squared error on the embeddings. When snr_range is set,
    the channel SNR is redrawn uniformly from it for every batch."""
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.shape[0] == 0:
        raise DataError("empty embedding set")
    enc, dec = codec.channel_encoder, codec.channel_decoder
    opt_e = make_optimizer(enc, "adam", learning_rate)
    opt_d = make_optimizer(dec, "adam", learning_rate)
    losses = []
    for _ in range(epochs):
        epoch_loss = 0.0
        n_batches = 0
        for take in _batches(embeddings.shape[0], batch_size, rng):
            eb = embeddings[take]
            cfg = channel
            if snr_range is not None:
                cfg = ChannelConfig(float(rng.uniform(*snr_range)), channel.attack_noise_power)
            z = forward(enc, eb)
            z_hat = transmit(z, cfg, rng)
            out = forward(dec, z_hat)
            diff = out - eb
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            grad_out = (2.0 / diff.size) * diff
            g_dec = backprop(dec, z_hat, grad_out)
            # additive noise: gradient passes through the channel unchanged
            g_enc = backprop(enc, eb, g_dec.wrt_input)
            apply_update(dec, g_dec, opt_d)
            apply_update(enc, g_enc, opt_e)
            epoch_loss += loss
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return losses


def train_joint(images: np.ndarray, holdout: np.ndarray, codec: Codec,
                channel: ChannelConfig, iota: float, epochs: int, rng: Rng,
                batch_size: int = 128, learning_rate: float = 3e-4,
                snr_range: tuple[float, float] | None = (-3.0, 12.0),
                ssim_params: SsimParams | None = None) -> TrainReport:
    """Phase three: fine-tune all four nets end to end through the channel
    with the similarity loss of phase one. Returns losses, holdout ssim at
    a clean channel, and the least-squares codec gain."""
    images = np.asarray(images, dtype=np.float32)
    if images.shape[0] == 0:
        raise DataError("empty training set")
    p = ssim_params or SsimParams()
    nets = (codec.semantic_encoder, codec.channel_encoder,
            codec.channel_decoder, codec.semantic_decoder)
    opts = [make_optimizer(net, "adam", learning_rate) for net in nets]
    report = TrainReport()
    for _ in range(epochs):
        epoch_loss = 0.0
        n_batches = 0
        for take in _batches(images.shape[0], batch_size, rng):
            xb = images[take]
            cfg = channel
            if snr_range is not None:
                cfg = ChannelConfig(float(rng.uniform(*snr_range)), channel.attack_noise_power)
            emb = forward(codec.semantic_encoder, xb)
            z = forward(codec.channel_encoder, emb)
            z_hat = transmit(z, cfg, rng)
            emb_hat = forward(codec.channel_decoder, z_hat)
            out = forward(codec.semantic_decoder, emb_hat)
            loss, grad_out = _ssim_batch_loss(xb, out, iota, p)
            g_sd = backprop(codec.semantic_decoder, emb_hat, grad_out)
            g_cd = backprop(codec.channel_decoder, z_hat, g_sd.wrt_input)
            g_ce = backprop(codec.channel_encoder, emb, g_cd.wrt_input)
            g_se = backprop(codec.semantic_encoder, xb, g_ce.wrt_input)
            for net, grads, opt in zip(nets, (g_se, g_ce, g_cd, g_sd), opts):
                apply_update(net, grads, opt)
            epoch_loss += loss
            n_batches += 1
        report.losses.append(epoch_loss / n_batches)
    clean = ChannelConfig(float("inf"), 0.0)
    restored = decode(codec, transmit(encode(codec, holdout), clean, rng))
    report.holdout_ssim = float(np.mean([ssim(a, b, p) for a, b in zip(holdout, restored)]))
    report.gain = measure_codec_gain(codec, holdout, clean, rng)
    return report


def measure_codec_gain(codec: Codec, probe: np.ndarray, channel: ChannelConfig,
                       rng: Rng) -> float:
    """Least-squares scalar fit of the round-tripped probe against the probe.

    A value near 1 means the codec neither amplifies nor shrinks images on
    the way through; measure at high SNR so noise does not bias the fit.
    """
    probe = np.asarray(probe, dtype=np.float32)
    denom = float(np.sum(probe.astype(np.float64) ** 2))
    if denom == 0.0:
        raise MeasurementError("all-zero probe batch has no defined gain")
    restored = decode(codec, transmit(encode(codec, probe), channel, rng))
    num = float(np.sum(restored.astype(np.float64) * probe.astype(np.float64)))
    return num / denom


# ---------------------------------------------------------------------------
# Checkpoints: manifest header then the four nets as DNET blocks.

_CODEC_MAGIC = b"DCDC"
_CODEC_VERSION = 1


def write_codec(stream: BinaryIO, codec: Codec) -> None:
    stream.write(_CODEC_MAGIC)
    stream.write(struct.pack("<BIII", _CODEC_VERSION, codec.image_dim,
                             codec.embed_dim, codec.symbol_dim))
    for net in (codec.semantic_encoder, codec.channel_encoder,
                codec.channel_decoder, codec.semantic_decoder):
        write_net(stream, net)


def read_codec(stream: BinaryIO) -> Codec:
    head = stream.read(4)
    if head != _CODEC_MAGIC:
        raise ConfigError("not a codec checkpoint")
    version, image_dim, embed_dim, symbol_dim = struct.unpack("<BIII", stream.read(13))
    if version != _CODEC_VERSION:
        raise ConfigError(f"unsupported codec checkpoint version {version}")
    codec = Codec(read_net(stream), read_net(stream), read_net(stream), read_net(stream))
    if (codec.image_dim, codec.embed_dim, codec.symbol_dim) != (image_dim, embed_dim, symbol_dim):
        raise ConfigError("codec checkpoint dims do not match its nets")
    return codec


def save_codec(path, codec: Codec) -> None:
    with open(path, "wb") as f:
        write_codec(f, codec)


def load_codec(path) -> Codec:
    with open(path, "rb") as f:
        return read_codec(f)
