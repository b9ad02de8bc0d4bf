"""Compression operators with exact bit accounting.

Unbiased class: Identity, RandK, Natural.  Contractive class: Identity,
TopK, and ScaledUnbiased (an unbiased compressor scaled by 1/(omega+1)).

Bit-cost model (part of the public contract; the CSV "bits" column
depends on it):
  * sparse payloads cost K * (64 + ceil(log2 d)) bits,
  * dense payloads cost 64 * d bits,
  * natural-compression payloads cost 9 * d bits (sign + 8-bit exponent).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import RngStream, as_vector

# Exponents are clamped to the single-precision normal range; at the
# range edge the rounding is deterministic.
_EXP_MIN = -126
_EXP_MAX = 127


class CompressorClassError(TypeError):
    """Raised when a compressor is used outside its class (unbiased vs contractive)."""


@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class RandK:
    k: int


@dataclass(frozen=True)
class TopK:
    k: int


@dataclass(frozen=True)
class Natural:
    pass


@dataclass(frozen=True)
class ScaledUnbiased:
    """Contractive adapter: decompressed inner output scaled by 1/(omega+1)."""

    inner: "CompressorKind"

    def __post_init__(self):
        if not is_unbiased(self.inner):
            raise CompressorClassError("ScaledUnbiased requires an unbiased inner compressor")


CompressorKind = Identity | RandK | TopK | Natural | ScaledUnbiased


def is_unbiased(kind: CompressorKind) -> bool:
    return isinstance(kind, (Identity, RandK, Natural))


def is_contractive(kind: CompressorKind) -> bool:
    return isinstance(kind, (Identity, TopK, ScaledUnbiased))


@dataclass
class CompressedMsg:
    """Wire message: sparse pairs, natural codes, or a dense vector.

    Exactly one payload family is populated.  ``scale`` is a protocol
    constant applied at decompression (used by ScaledUnbiased); it is
    not transmitted and carries no bit cost.
    """

    dim: int
    bit_cost: int
    indices: np.ndarray | None = None
    values: np.ndarray | None = None
    dense: np.ndarray | None = None
    signs: np.ndarray | None = None
    exponents: np.ndarray | None = None
    scale: float = 1.0

    def __post_init__(self):
        sparse = self.indices is not None or self.values is not None
        natural = self.signs is not None or self.exponents is not None
        if sparse and (self.indices is None or self.values is None):
            raise ValueError("sparse payload needs both indices and values")
        if natural and (self.signs is None or self.exponents is None):
            raise ValueError("natural payload needs both signs and exponents")
        populated = sum([sparse, natural, self.dense is not None])
        if populated != 1:
            raise ValueError("exactly one payload family must be populated")


def sparse_bit_cost(k: int, d: int) -> int:
    index_bits = math.ceil(math.log2(d)) if d > 1 else 0
    return k * (64 + index_bits)


def dense_bit_cost(d: int) -> int:
    return 64 * d


def natural_bit_cost(d: int) -> int:
    return 9 * d


def _check_k(k: int, d: int):
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= K <= d, got K={k}, d={d}")


def compress(kind: CompressorKind, x, rng: RngStream) -> CompressedMsg:
    """Apply the compressor to x, returning a payload with its exact bit cost."""
    x = as_vector(x)
    d = x.shape[0]
    if isinstance(kind, Identity):
        return CompressedMsg(dim=d, bit_cost=dense_bit_cost(d), dense=x.copy())
    if isinstance(kind, RandK):
        _check_k(kind.k, d)
        idx = np.sort(rng.choice_without_replacement(d, kind.k))
        vals = (d / kind.k) * x[idx]
        return CompressedMsg(dim=d, bit_cost=sparse_bit_cost(kind.k, d),
                             indices=idx, values=vals)
    if isinstance(kind, TopK):
        _check_k(kind.k, d)
        # Stable sort on -|x| breaks magnitude ties by lower index.
        order = np.argsort(-np.abs(x), kind="stable")[:kind.k]
        idx = np.sort(order)
        return CompressedMsg(dim=d, bit_cost=sparse_bit_cost(kind.k, d),
                             indices=idx, values=x[idx])
    if isinstance(kind, Natural):
        return _compress_natural(x, rng)
    if isinstance(kind, ScaledUnbiased):
        omega_inner = omega(kind.inner, d)
        msg = compress(kind.inner, x, rng)
        msg.scale *= 1.0 / (omega_inner + 1.0)
        return msg
    raise TypeError(f"unknown compressor kind {kind!r}")


def _compress_natural(x: np.ndarray, rng: RngStream) -> CompressedMsg:
    d = x.shape[0]
    signs = np.sign(x).astype(np.int8)
    exponents = np.zeros(d, dtype=np.int16)
    nz = np.flatnonzero(signs)
    if nz.size:
        mag = np.abs(x[nz])
        mant, e = np.frexp(mag)  # mag = mant * 2^e with mant in [0.5, 1)
        lo = e - 1               # floor(log2 mag)
        hi = np.where(mant == 0.5, lo, e)
        lo = np.clip(lo, _EXP_MIN, _EXP_MAX)
        hi = np.clip(hi, _EXP_MIN, _EXP_MAX)
        chosen = lo.copy()
        randomized = hi > lo  # clamping or an exact power of two removes choice
        if randomized.any():
            p_lo = (np.ldexp(1.0, hi[randomized]) - mag[randomized]) \
                / np.ldexp(1.0, lo[randomized])
            u = np.atleast_1d(rng.uniform(size=int(randomized.sum())))
            chosen[randomized] = np.where(u < p_lo, lo[randomized], hi[randomized])
        exponents[nz] = chosen.astype(np.int16)
    return CompressedMsg(dim=d, bit_cost=natural_bit_cost(d),
                         signs=signs, exponents=exponents)


def decompress(msg: CompressedMsg) -> np.ndarray:
    """Reconstruct the dense d-vector a message encodes."""
    if msg.dense is not None:
        out = msg.dense.astype(np.float64, copy=True)
    elif msg.signs is not None:
        out = msg.signs.astype(np.float64) * np.exp2(msg.exponents.astype(np.float64))
    else:
        if msg.indices.shape != msg.values.shape:
            raise ValueError("corrupt sparse payload: index/value length mismatch")
        if msg.indices.size and (msg.indices.min() < 0 or msg.indices.max() >= msg.dim):
            raise ValueError("corrupt sparse payload: index out of range")
        out = np.zeros(msg.dim)
        out[msg.indices] = msg.values
    if msg.scale != 1.0:
        out *= msg.scale
    return out


def omega(kind: CompressorKind, d: int) -> float:
    """Relative variance bound of an unbiased compressor."""
    if isinstance(kind, Identity):
        return 0.0
    if isinstance(kind, RandK):
        _check_k(kind.k, d)
        return d / kind.k - 1.0
    if isinstance(kind, Natural):
        return 1.0 / 8.0
    raise CompressorClassError(f"{kind!r} is not in the unbiased class")


def alpha(kind: CompressorKind, d: int) -> float:
    """Contraction parameter of a contractive compressor."""
    if isinstance(kind, Identity):
        return 1.0
    if isinstance(kind, TopK):
        _check_k(kind.k, d)
        return kind.k / d
    if isinstance(kind, ScaledUnbiased):
        return 1.0 / (omega(kind.inner, d) + 1.0)
    raise CompressorClassError(f"{kind!r} is not in the contractive class")
