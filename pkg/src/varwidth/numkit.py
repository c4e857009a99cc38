"""Dense linear algebra, reproducible random streams, and finite differences.

Vectors and matrices are plain float64 numpy arrays (1-D and 2-D, row-major).
Randomness comes from counter-based Philox streams: every draw is a pure
function of (master_seed, stream_id, counter), so any computation can be
replayed bit-exactly and independent streams can fan out without
schedule-dependent results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NonFiniteError

_U64 = (1 << 64) - 1


@dataclass
class RngStream:
    """A splittable random stream addressed by (master_seed, stream_id, counter).

    Each draw call runs a fresh Philox generator keyed by (master_seed,
    stream_id) and positioned at the current counter; the counter then
    advances by the number of values drawn.  Counter positions of distinct
    calls are separated by 2**64 Philox blocks, so successive calls never
    overlap, and replaying from a recorded counter reproduces the exact
    bytes.
    """

    master_seed: int
    stream_id: int = 0
    counter: int = 0

    def spawn(self, stream_id: int) -> "RngStream":
        """A fresh stream under the same master seed, starting at counter 0."""
        return RngStream(self.master_seed, stream_id, 0)

    def state(self) -> tuple[int, int, int]:
        return (self.master_seed, self.stream_id, self.counter)

    def _generator(self) -> np.random.Generator:
        key = [self.master_seed & _U64, self.stream_id & _U64]
        return np.random.Generator(np.random.Philox(key=key, counter=[0, self.counter & _U64, 0, 0]))

    def normal(self, n: int) -> np.ndarray:
        """n independent standard-normal draws; advances the counter by n."""
        if n < 1:
            raise ConfigurationError(f"draw size must be >= 1, got {n}")
        out = self._generator().standard_normal(n)
        self.counter += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n independent U[0,1) draws; advances the counter by n."""
        if n < 1:
            raise ConfigurationError(f"draw size must be >= 1, got {n}")
        out = self._generator().random(n)
        self.counter += n
        return out

    def dropout_mask(self, n: int, p: float) -> np.ndarray:
        """n draws of the mean-one dropout mask: 1/p with probability p, else 0."""
        if not 0.0 < p < 1.0:
            raise ConfigurationError(f"dropout keep-probability must lie in (0, 1), got {p}")
        u = self.uniform(n)
        return np.where(u < p, 1.0 / p, 0.0)


def draw_gaussian(rng: RngStream, n: int) -> np.ndarray:
    """n independent standard-normal draws from the stream."""
    return rng.normal(n)


def draw_dropout_mask(rng: RngStream, n: int, p: float) -> np.ndarray:
    """n independent dropout-mask draws (values 1/p or 0, mean 1, variance (1-p)/p)."""
    return rng.dropout_mask(n, p)


def as_vector(v) -> np.ndarray:
    out = np.asarray(v, dtype=np.float64)
    if out.ndim != 1:
        raise ConfigurationError(f"expected a 1-D vector, got shape {out.shape}")
    return out


def as_matrix(m) -> np.ndarray:
    out = np.asarray(m, dtype=np.float64)
    if out.ndim != 2:
        raise ConfigurationError(f"expected a 2-D matrix, got shape {out.shape}")
    return out


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Standard matrix-vector product with an explicit dimension check."""
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ConfigurationError(
            f"matvec dimension mismatch: matrix is {m.shape[0]}x{m.shape[1]}, vector has {v.shape[0]}"
        )
    return m @ v


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Second-order accurate: (f(x + h e_i) - f(x - h e_i)) / 2h.
    """
    if h <= 0.0:
        raise ConfigurationError(f"finite-difference step must be positive, got {h}")
    x = as_vector(x)
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value while differencing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
