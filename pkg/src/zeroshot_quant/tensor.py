"""Tensor substrate: seeded Gaussian sampling and channel-wise statistics.

Tensors are plain ``numpy`` arrays. Activations are NCHW, weights OIHW.
Public constructors return ``float32``; reductions accumulate in ``float64``.

Random streams come from ``numpy.random.Generator`` over PCG64, seeded
explicitly. PCG64 and the ziggurat normal sampler are specified bit-for-bit
by numpy, so a seed reproduces the same stream on every platform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

RNG_ALGORITHM = "numpy-pcg64"


def make_rng(seed: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise InvalidArgument(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and (population) standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise InvalidArgument(
                f"mean/std length mismatch: {mean.size} vs {std.size}")
        if np.any(std < 0):
            raise InvalidArgument("std entries must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def __len__(self):
        return self.mean.size

    def __eq__(self, other):
        if not isinstance(other, ChannelStats):
            return NotImplemented
        return (np.array_equal(self.mean, other.mean)
                and np.array_equal(self.std, other.std))

    @classmethod
    def constant(cls, mean: float, std: float, channels: int) -> "ChannelStats":
        return cls(np.full(channels, mean, dtype=np.float64),
                   np.full(channels, std, dtype=np.float64))


def gaussian_tensor(shape, mean: float, std: float,
                    rng: np.random.Generator | int) -> np.ndarray:
    """Draw i.i.d. N(mean, std^2) samples as a float32 array."""
    if std < 0:
        raise InvalidArgument(f"std must be >= 0, got {std}")
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise InvalidArgument(f"invalid shape {shape}")
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    z = rng.standard_normal(shape)
    return (z * std + mean).astype(np.float32)


def activation_channel_stats(t: np.ndarray) -> ChannelStats:
    """Mean/std of an NCHW tensor per channel, reduced over (n, h, w)."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise InvalidArgument(f"expected a 4-D NCHW tensor, got shape {t.shape}")
    if t.size == 0:
        raise InvalidArgument("cannot take statistics of an empty tensor")
    x = t.astype(np.float64, copy=False)
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    std = np.sqrt((centered * centered).mean(axis=(0, 2, 3)))
    return ChannelStats(mean, std)


def weight_channel_stats(w: np.ndarray) -> ChannelStats:
    """Mean/std per output channel of an OIHW weight, over (i, kh, kw).

    Sums are exactly rounded (``math.fsum``) so the result does not depend
    on summation order.
    """
    w = np.asarray(w)
    if w.ndim != 4:
        raise InvalidArgument(f"expected a 4-D OIHW weight, got shape {w.shape}")
    if w.size == 0:
        raise InvalidArgument("cannot take statistics of empty weights")
    rows = w.astype(np.float64).reshape(w.shape[0], -1)
    means = np.empty(rows.shape[0])
    stds = np.empty(rows.shape[0])
    for k, row in enumerate(rows.tolist()):
        mu = math.fsum(row) / len(row)
        means[k] = mu
        stds[k] = math.sqrt(math.fsum((v - mu) * (v - mu) for v in row) / len(row))
    return ChannelStats(means, stds)
