"""Seeded random streams and weight initializers with prescribed moments.

Dense matrices and vectors are plain float64 numpy arrays throughout the
package; this module owns how randomness enters them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

GAUSSIAN = "gaussian"
UNIFORM = "uniform"
RADEMACHER = "rademacher"

DISTRIBUTION_KINDS = (GAUSSIAN, UNIFORM, RADEMACHER)

# Stream index reserved for auxiliary draws (e.g. a fixed probe input shared
# by all Monte Carlo trials); trial i always uses stream index i.
AUX_STREAM = 0xFFFF_FFFF


@dataclass(frozen=True)
class RngStream:
    """Deterministic, independently seeded random stream.

    The same (master_seed, stream_index) pair always reproduces the same
    sample sequence, and distinct stream indices are statistically
    independent, so work items keyed by index may run in any order or in
    parallel without changing results.
    """

    master_seed: int
    stream_index: int = 0

    def __post_init__(self):
        if not 0 <= self.stream_index <= AUX_STREAM:
            raise DimensionError(f"stream_index out of range: {self.stream_index}")

    def generator(self) -> np.random.Generator:
        """Return a fresh generator positioned at the start of the stream."""
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index,))
        return np.random.default_rng(seq)


def as_generator(rng: "RngStream | np.random.Generator") -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


@dataclass(frozen=True)
class InitDistribution:
    """Symmetric zero-mean weight distribution with second moment 1/fan_in.

    kind is one of "gaussian" (variance 1/fan_in), "uniform" (symmetric
    interval scaled to variance 1/fan_in), or "rademacher" (two-point
    +-1/sqrt(fan_in), which realizes the second moment exactly).
    """

    kind: str = GAUSSIAN
    fan_in: int = 1

    def __post_init__(self):
        if self.kind not in DISTRIBUTION_KINDS:
            raise DimensionError(f"unknown distribution kind: {self.kind!r}")
        if self.fan_in < 1:
            raise DimensionError(f"fan_in must be >= 1, got {self.fan_in}")

    @property
    def second_moment(self) -> float:
        return 1.0 / self.fan_in

    def sample(self, shape, rng: "RngStream | np.random.Generator") -> np.ndarray:
        gen = as_generator(rng)
        scale = 1.0 / np.sqrt(self.fan_in)
        if self.kind == GAUSSIAN:
            return gen.normal(0.0, scale, size=shape)
        if self.kind == UNIFORM:
            half_width = np.sqrt(3.0) * scale
            return gen.uniform(-half_width, half_width, size=shape)
        signs = gen.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
        return signs * scale


def sample_weight_matrix(
    rows: int,
    cols: int,
    dist: InitDistribution,
    rng: "RngStream | np.random.Generator",
) -> np.ndarray:
    """Draw a rows x cols matrix of iid weights.

    rows is the input dimension of the layer, so the distribution's fan_in
    must equal it.
    """
    if rows < 1 or cols < 1:
        raise DimensionError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if dist.fan_in != rows:
        raise DimensionError(
            f"distribution fan_in {dist.fan_in} does not match row count {rows}"
        )
    out = dist.sample((rows, cols), rng)
    if not np.all(np.isfinite(out)):
        raise DimensionError("sampled weights contain non-finite values")
    return out


def empirical_moment(
    dist: InitDistribution,
    order: int,
    n_samples: int,
    rng: "RngStream | np.random.Generator",
) -> float:
    """Sample mean of w**order over n_samples fresh draws."""
    if order < 1:
        raise DimensionError(f"moment order must be >= 1, got {order}")
    if n_samples < 1:
        raise DimensionError(f"n_samples must be >= 1, got {n_samples}")
    gen = as_generator(rng)
    total = 0.0
    remaining = n_samples
    chunk = 1 << 20
    while remaining > 0:
        take = min(chunk, remaining)
        draws = dist.sample(take, gen)
        total += float(np.sum(draws**order))
        remaining -= take
    return total / n_samples
