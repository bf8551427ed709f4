"""Dense vector helpers and reproducible random streams.

Parameter vectors are plain 1-D ``float64`` numpy arrays. Randomness comes
from :class:`RngStream`, a thin wrapper over numpy's counter-based Philox
generator keyed by ``(seed, stream_id)`` so every draw is reconstructible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Raised when two vectors (or a vector and a model) disagree in length."""


def as_param_vector(values) -> np.ndarray:
    out = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise ValueError("parameter vector contains non-finite entries")
    return out


def _check_same_len(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")


def axpy(a: float, x, y) -> np.ndarray:
    """Return ``a * x + y`` as a new vector."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_len(x, y)
    if not np.isfinite(a):
        raise ValueError(f"scalar must be finite, got {a}")
    return a * x + y


def dot(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_len(x, y)
    return float(np.dot(x, y))


def ordered_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of vectors summed left to right, in the order given."""
    if len(vectors) == 0:
        raise ValueError("cannot average an empty collection")
    acc = np.array(vectors[0], dtype=np.float64, copy=True)
    for v in vectors[1:]:
        _check_same_len(acc, v)
        acc += v
    return acc / len(vectors)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    """A named, independent random stream.

    Two streams with the same ``(seed, stream_id)`` produce identical draws;
    the Philox key is exactly that pair, so streams with distinct ids do not
    overlap. ``child`` derives sub-streams deterministically.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *path: int) -> "RngStream":
        sid = self.stream_id
        for p in path:
            sid = splitmix64(sid ^ splitmix64(p & _MASK64))
        return RngStream(self.seed, sid)


def gaussian_vector(rng, length: int, mean=0.0, stddev: float = 1.0) -> np.ndarray:
    """Draw ``length`` i.i.d. normals; ``stddev == 0`` returns ``mean`` exactly.

    ``rng`` is either a live ``Generator`` (draws continue from its current
    position) or an :class:`RngStream` (draws start at index 0).
    """
    if stddev < 0:
        raise ValueError(f"stddev must be non-negative, got {stddev}")
    if isinstance(rng, RngStream):
        rng = rng.generator()
    mean_arr = np.broadcast_to(np.asarray(mean, dtype=np.float64), (length,))
    if stddev == 0:
        return np.array(mean_arr, dtype=np.float64, copy=True)
    return mean_arr + stddev * rng.standard_normal(length)
