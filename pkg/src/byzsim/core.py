"""Dense vector primitives, counter-based random streams, and test oracles.

Every quantity exchanged between workers and server is a dense float64
numpy array.  Randomness is counter-based: a stream is identified by
(seed, stream_id) and every draw event re-keys a Philox generator at a
fresh counter block, so results depend only on (seed, stream_id, draw
index) and never on execution order or on how many values another
stream consumed.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Raised when vector dimensions do not line up."""


def as_vector(x) -> np.ndarray:
    """Coerce input to a 1-d float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def ensure_finite(v: np.ndarray, what: str = "vector") -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"{what} contains NaN/Inf entries")
    return v


def dot(a, b) -> float:
    """Inner product of two equal-length vectors."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionError(f"dot: lengths {a.shape[0]} and {b.shape[0]} differ")
    return float(a @ b)


def norm_sq(a) -> float:
    """Squared Euclidean norm."""
    a = as_vector(a)
    return float(a @ a)


@dataclass
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Each draw method is a single draw event: it instantiates Philox at
    counter block ``draws << 64`` and advances ``draws`` by one, so draw
    events never overlap and the k-th draw of a stream is reproducible
    in isolation.
    """

    seed: int
    stream_id: int = 0
    draws: int = field(default=0, compare=False)

    def _generator(self) -> np.random.Generator:
        # Equivalent to Philox(key=(seed, stream_id), counter=draws << 64);
        # resetting the cached bit generator skips reconstruction cost.
        cache = self.__dict__.get("_cache")
        if cache is None:
            key = np.array([self.seed & _MASK64, self.stream_id & _MASK64],
                           dtype=np.uint64)
            philox = np.random.Philox(key=key)
            cache = (philox, np.random.Generator(philox), philox.state)
            self.__dict__["_cache"] = cache
        philox, gen, state = cache
        counter = state["state"]["counter"]
        counter[:] = 0
        counter[1] = self.draws & _MASK64
        state["buffer_pos"] = 4
        state["has_uint32"] = 0
        state["uinteger"] = 0
        philox.state = state
        self.draws += 1
        return gen

    def substream(self, offset: int) -> "RngStream":
        """Derive an independent stream; offsets must be unique per parent."""
        return RngStream(self.seed, (self.stream_id * 0x1_0000_0000 + offset) & _MASK64)

    def uniform(self, size=None):
        return self._generator().uniform(size=size)

    def standard_normal(self, size=None):
        return self._generator().standard_normal(size=size)

    def bernoulli(self, p: float) -> int:
        return int(self._generator().uniform() < p)

    def integers(self, low: int, high: int, size=None):
        return self._generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def choice_without_replacement(self, m: int, b: int) -> np.ndarray:
        gen = self._generator()
        if 4 * b >= m:
            # Leading block of a uniform permutation is a uniform b-subset;
            # cheaper than choice() when b is a sizable fraction of m.
            return gen.permutation(m)[:b]
        return gen.choice(m, size=b, replace=False)


def sample_without_replacement(rng: RngStream, m: int, b: int) -> np.ndarray:
    """Draw b distinct indices from range(m), uniform over b-subsets.

    Returned sorted; sorting is a canonical form and does not affect
    subset-level uniformity.
    """
    if not 1 <= b <= m:
        raise ValueError(f"need 1 <= b <= m, got b={b}, m={m}")
    return np.sort(rng.choice_without_replacement(m, b))


def finite_diff_grad(f, x, h: float) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_j) - f(x-h e_j)) / 2h."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = as_vector(x)
    g = np.empty_like(x)
    for j in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def worker_thread_count() -> int:
    """Worker fan-out cap from BYZSIM_THREADS; absent means single-threaded."""
    raw = os.environ.get("BYZSIM_THREADS", "")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Apply fn over items, fanning out to threads when BYZSIM_THREADS > 1.

    Results are assembled in input order, so the outcome is independent
    of scheduling.
    """
    threads = worker_thread_count()
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
