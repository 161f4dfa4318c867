"""Deterministic randomness and small statistics helpers.

Random numbers come from SplitMix64, a counter-based generator (Steele,
Lea & Flood 2014; the mixer behind Java's ``SplittableRandom``).  The k-th
64-bit word of a stream is a pure function of ``(seed, k)``::

    out_k = mix64(seed + (k + 1) * GOLDEN_GAMMA)   (mod 2**64)

so draws vectorise over the counter and any language port that implements
the same mixer reproduces the sequence bit for bit.  Draw accounting is
fixed: a uniform or Rademacher value consumes one counter tick, a normal
value consumes two (Box-Muller, cosine branch).  Drawing a block of n
values is therefore identical to n scalar draws.

Quantiles use a single order-statistic convention throughout the package:
the level-q quantile of n samples is the ascending-sorted value at index
``ceil(q * n) - 1`` (0-based).  ``q * n`` is nudged by -1e-9 before the
ceiling so that binary-float artefacts such as ``0.05 * 100 ==
5.000000000000001`` do not shift the index.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)

_MIX_MULT_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_MULT_2 = np.uint64(0x94D049BB133111EB)
_U53 = 2.0 ** -53


def _mix64(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """SplitMix64 finaliser; operates elementwise on uint64 input."""
    z = (z ^ (z >> np.uint64(30))) * _MIX_MULT_1
    z = (z ^ (z >> np.uint64(27))) * _MIX_MULT_2
    return z ^ (z >> np.uint64(31))


def _words_to_unit(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles in [0, 1) using the top 53 bits."""
    return (words >> np.uint64(11)).astype(np.float64) * _U53


class Rng:
    """Seeded stream of uniform, standard-normal and Rademacher draws.

    Instances are single-owner: drawing advances the counter.  Equal seeds
    give bit-identical sequences.  ``substream`` derives statistically
    independent child streams without disturbing the parent.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self._seed = np.uint64(seed)
        self._counter = np.uint64(0)

    @property
    def seed(self) -> int:
        return int(self._seed)

    def _next_words(self, count: int) -> np.ndarray:
        ticks = self._counter + np.uint64(1) + np.arange(count, dtype=np.uint64)
        self._counter = self._counter + np.uint64(count)
        return _mix64(self._seed + ticks * GOLDEN_GAMMA)

    def uniform(self, size: int | tuple[int, ...] | None = None) -> float | np.ndarray:
        """Draws in [0, 1).  One counter tick per value."""
        if size is None:
            return float(_words_to_unit(self._next_words(1))[0])
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        return _words_to_unit(self._next_words(n)).reshape(shape)

    def normal(self, size: int | tuple[int, ...] | None = None) -> float | np.ndarray:
        """Standard-normal draws.  Two counter ticks per value."""
        if size is None:
            return float(self.normal(1)[0])
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        words = self._next_words(2 * n).reshape(n, 2)
        # u1 in (0, 1] keeps log(u1) finite; u2 in [0, 1).
        u1 = ((words[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53
        u2 = _words_to_unit(words[:, 1])
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)

    def rademacher(self, size: int | tuple[int, ...] | None = None) -> float | np.ndarray:
        """Draws of +/-1 with equal probability.  One tick per value."""
        if size is None:
            return float(self.rademacher(1)[0])
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        bits = self._next_words(n) >> np.uint64(63)
        return (1.0 - 2.0 * bits.astype(np.float64)).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of range(n), from the ranks of n uniforms."""
        return np.argsort(self.uniform(n), kind="stable")

    def substream(self, key: int) -> "Rng":
        """Independent child stream derived from (seed, key)."""
        return Rng(int(substream_seeds(self._seed, np.asarray([key]))[0]))


def substream_seeds(seed: int | np.uint64, keys: np.ndarray) -> np.ndarray:
    """Vectorised child-stream seeds: mix64(seed ^ mix64((key + 1) * gamma)).

    Row i of ``rademacher_block(substream_seeds(seed, keys), m)`` equals the
    first m Rademacher draws of ``Rng(seed).substream(keys[i])``.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    return _mix64(np.uint64(seed) ^ _mix64((keys + np.uint64(1)) * GOLDEN_GAMMA))


def rademacher_block(seeds: np.ndarray, count: int) -> np.ndarray:
    """(len(seeds), count) matrix of +/-1; row i is stream seeds[i]."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    ticks = np.uint64(1) + np.arange(count, dtype=np.uint64)
    words = _mix64(seeds[:, None] + ticks[None, :] * GOLDEN_GAMMA)
    return 1.0 - 2.0 * (words >> np.uint64(63)).astype(np.float64)


def as_vector(x, dim: int | None = None) -> np.ndarray:
    """Validate and return a finite 1-d float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite input")
    return v


def as_points(x, dim: int | None = None) -> np.ndarray:
    """Validate an (n, d) array of points; a single vector is promoted."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected points of shape (n, d), got {a.shape}")
    if dim is not None and a.shape[1] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite input")
    return a


def mean_and_stderr(samples) -> tuple[float, float]:
    """Arithmetic mean and standard error (sample std / sqrt(n)).

    Requires at least two finite samples.
    """
    a = np.asarray(samples, dtype=np.float64).ravel()
    if a.size < 2:
        raise ValueError("insufficient samples")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite input")
    mean = float(np.mean(a))
    stderr = float(np.std(a, ddof=1) / math.sqrt(a.size))
    return mean, stderr


def covariance(a, b) -> float:
    """Unbiased sample covariance (divisor n - 1)."""
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("mismatched lengths")
    if x.size < 2:
        raise ValueError("insufficient samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    return float(np.sum((x - x.mean()) * (y - y.mean())) / (x.size - 1))


def empirical_quantile(samples, level: float) -> float:
    """Order-statistic quantile: sorted value at index ceil(level * n) - 1.

    ``level`` must lie strictly inside (0, 1).  See the module docstring for
    the float-rounding guard.
    """
    a = np.asarray(samples, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("empty samples")
    if not 0.0 < level < 1.0:
        raise ValueError("quantile level must be in (0, 1)")
    idx = max(0, math.ceil(level * a.size - 1e-9) - 1)
    return float(np.sort(a)[idx])
