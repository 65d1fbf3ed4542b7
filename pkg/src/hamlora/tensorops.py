"""Dense linear-algebra kernels and deterministic randomness.

Matrices are plain 2-D numpy arrays of float64 in row-major order. Pruned
matrices stay dense with explicit zeros. Everything here is a pure function
except RngState, which owns its stream and must have a single consumer.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError

Matrix = np.ndarray
Vector = np.ndarray


def as_matrix(data) -> Matrix:
    """Coerce to a 2-D float64 array, rejecting other ranks."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def require_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{what} contains non-finite entries")
    return arr


def matmul(lhs: Matrix, rhs: Matrix) -> Matrix:
    """Matrix product with an explicit conformance check."""
    lhs = as_matrix(lhs)
    rhs = as_matrix(rhs)
    if lhs.shape[1] != rhs.shape[0]:
        raise ShapeError(f"cannot multiply {lhs.shape} by {rhs.shape}")
    return require_finite(lhs @ rhs, "matmul result")


def vectorize(m: Matrix) -> Vector:
    """Row-major flattening of a matrix into a vector."""
    return as_matrix(m).reshape(-1).copy()


def abs_cosine(u: Vector, v: Vector) -> float:
    """Absolute cosine similarity |<u,v>| / (||u|| ||v||), in [0, 1].

    Raises DegenerateInputError when either vector has zero norm: a zero
    vector here means an adapter that never trained, which the caller must
    surface rather than silently score as dissimilar.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"vector lengths differ: {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("abs_cosine of a zero-norm vector")
    return min(abs(float(u @ v)) / (nu * nv), 1.0)


def retained_count(numel: int, keep_fraction: float) -> int:
    """Number of entries kept when pruning to a fraction: ceil(k * n)."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    return math.ceil(keep_fraction * numel)


def magnitude_threshold(m: Matrix, keep_fraction: float) -> float:
    """Magnitude of the ceil(k*n)-th largest absolute entry.

    Exactly ceil(k*n) entries satisfy |entry| >= threshold once ties at the
    threshold are broken toward smaller row-major index (see magnitude_mask).
    """
    m = as_matrix(m)
    count = retained_count(m.size, keep_fraction)
    flat = np.abs(m).reshape(-1)
    # count-th largest == element at index (n - count) of the ascending order
    return float(np.partition(flat, m.size - count)[m.size - count])


def magnitude_mask(m: Matrix, keep_fraction: float) -> np.ndarray:
    """Boolean mask over the top-ceil(k*n) entries by absolute value.

    Ties at the threshold keep the smaller row-major index, so the retained
    set is deterministic for any input.
    """
    m = as_matrix(m)
    count = retained_count(m.size, keep_fraction)
    flat = np.abs(m).reshape(-1)
    # stable sort on negated magnitudes: ties stay in row-major order
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(m.size, dtype=bool)
    mask[order[:count]] = True
    return mask.reshape(m.shape)


_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _splitmix64(x: int) -> int:
    x = (x + _SPLITMIX_GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngState:
    """Counter-based generator (Philox) with derivable child streams.

    An identical seed yields an identical stream of draws; child streams are
    derived from the seed with a splitmix64 hash so unrelated consumers never
    share state. Single-owner: one consumer advances a given instance.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(key=seed))

    def child(self, tag: int) -> "RngState":
        """Derive an independent stream for a named purpose."""
        return RngState(_splitmix64(self.seed ^ ((int(tag) + 1) * _SPLITMIX_GAMMA & _MASK64)))

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
