"""Learned per-level summarization of key/value (and query) streams.

Each coarse level owns a strided grouped 1D convolution: p kernels of the
level's group size per channel, so every group of ``m_l`` rows is reduced
to p summary rows. Kernels are separate per stream and per level (and per
head, managed by the caller); they are shared across positions within a
level because the operator is a convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hierarchy import HierarchyConfig
from .tensor_core import grouped_conv1d, grouped_conv1d_backward

__all__ = ["STRATEGIES", "DownsampleWeights", "init_weights", "downsample", "downsample_backward"]

STRATEGIES = ("average", "average_plus_noise", "random")

#: Streams a weight set may carry; "q" only exists for the linear variant.
KNOWN_STREAMS = ("k", "v", "q")


@dataclass
class DownsampleWeights:
    """Per (stream, level) kernel tensors of shape (d, p, m_l)."""

    kernels: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    @property
    def streams(self) -> tuple[str, ...]:
        return tuple(sorted({s for s, _ in self.kernels}))

    def kernel(self, stream: str, level: int) -> np.ndarray:
        try:
            return self.kernels[(stream, level)]
        except KeyError:
            raise KeyError(f"no downsample kernel for stream {stream!r}, level {level}") from None


def init_weights(
    config: HierarchyConfig,
    d: int,
    streams: tuple[str, ...] = ("k", "v"),
    strategy: str = "average_plus_noise",
    seed: int = 0,
    dtype: np.dtype | type = np.float64,
) -> DownsampleWeights:
    """Initialize kernels for every (stream, coarse level).

    ``average`` sets every entry to 1/m_l (each summary is the group mean);
    ``average_plus_noise`` (default) adds uniform(-eps, eps) noise with
    eps = 0.1/m_l, keeping the untrained operator near uniform summarization
    while breaking symmetry among the p summaries; ``random`` draws uniform
    entries in (-1/sqrt(m_l), 1/sqrt(m_l)). Deterministic given the seed:
    streams are filled in sorted order, levels ascending.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown init strategy {strategy!r}, expected one of {STRATEGIES}")
    for s in streams:
        if s not in KNOWN_STREAMS:
            raise ValueError(f"unknown stream {s!r}, expected one of {KNOWN_STREAMS}")
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = DownsampleWeights()
    for stream in sorted(streams):
        for level in config.levels:
            w = config.group_size(level)
            shape = (d, config.p, w)
            if strategy == "average":
                kern = np.full(shape, 1.0 / w)
            elif strategy == "average_plus_noise":
                eps = 0.1 / w
                kern = 1.0 / w + rng.uniform(-eps, eps, size=shape)
            else:
                bound = 1.0 / np.sqrt(w)
                kern = rng.uniform(-bound, bound, size=shape)
            weights.kernels[(stream, level)] = kern.astype(dtype)
    return weights


def downsample(
    x: np.ndarray, level: int, weights: DownsampleWeights, stream: str
) -> np.ndarray:
    """Summarize (n, d) rows into (n*p/m_l, d); row g*p+s is summary s of group g."""
    kern = weights.kernel(stream, level)
    return grouped_conv1d(x, kern)


def downsample_backward(
    upstream: np.ndarray,
    x: np.ndarray,
    level: int,
    weights: DownsampleWeights,
    stream: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact adjoint of :func:`downsample`: (input gradient, kernel gradient)."""
    kern = weights.kernel(stream, level)
    return grouped_conv1d_backward(upstream, x, kern)
