"""Robust aggregation rules and an empirical robustness certificate.

Implements Mean, coordinate-wise median (CM), geometric median via the
smoothed Weiszfeld iteration (GM), Krum, and a bucketing wrapper that
averages randomly permuted inputs in groups before applying an inner
rule.  The certificate estimates how tightly an aggregator tracks the
honest mean under a configurable contamination, for validating or
replacing the per-aggregator robustness constant ``c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import RngStream, as_vector

# Placeholder robustness constants used by the theoretical stepsizes;
# validate or override them with robustness_certificate / config.
DEFAULT_AGG_C = 1.0


@dataclass(frozen=True)
class Mean:
    pass


@dataclass(frozen=True)
class CM:
    pass


@dataclass(frozen=True)
class GM:
    """Geometric median through smoothed Weiszfeld iterations."""

    smoothing: float = 1e-8
    max_iters: int = 100
    tol: float = 1e-10

    def __post_init__(self):
        if not self.smoothing > 0:
            raise ValueError("smoothing must be positive")


@dataclass(frozen=True)
class Krum:
    num_byz: int = 0

    def __post_init__(self):
        if self.num_byz < 0:
            raise ValueError("num_byz must be >= 0")


@dataclass(frozen=True)
class Bucketed:
    inner: "AggregatorKind"
    s: int = 1

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("bucket size s must be >= 1")


AggregatorKind = Mean | CM | GM | Krum | Bucketed


def default_bucket_size(delta: float, delta_max: float = 0.5) -> int:
    """floor(delta_max / delta), capped below at 1."""
    if delta <= 0:
        return 1
    return max(1, int(math.floor(delta_max / delta)))


def aggregate(kind: AggregatorKind, vectors: Sequence[np.ndarray],
              rng: RngStream | None = None) -> np.ndarray:
    """Aggregate equal-dimension vectors with the chosen rule.

    Bucketing consumes one permutation draw from rng; the other rules
    are deterministic in their inputs.
    """
    if len(vectors) == 0:
        raise ValueError("cannot aggregate an empty list")
    stack = np.stack([as_vector(v) for v in vectors])
    return _dispatch(kind, stack, rng)


def _dispatch(kind: AggregatorKind, stack: np.ndarray,
              rng: RngStream | None) -> np.ndarray:
    if isinstance(kind, Mean):
        return stack.mean(axis=0)
    if isinstance(kind, CM):
        return np.median(stack, axis=0)
    if isinstance(kind, GM):
        return _weiszfeld(stack, kind)
    if isinstance(kind, Krum):
        return _krum(stack, kind.num_byz)
    if isinstance(kind, Bucketed):
        if kind.s == 1:
            # Singleton buckets leave the multiset unchanged; skip the
            # permutation so Bucketed(inner, 1) coincides with inner exactly.
            return _dispatch(kind.inner, stack, rng)
        if rng is None:
            raise ValueError("bucketing requires an RngStream for the permutation")
        return _dispatch(kind.inner, _bucket_means(stack, kind.s, rng), rng)
    raise TypeError(f"unknown aggregator kind {kind!r}")


def _weiszfeld(stack: np.ndarray, kind: GM) -> np.ndarray:
    x = stack.mean(axis=0)
    for _ in range(kind.max_iters):
        dist = np.linalg.norm(stack - x, axis=1)
        w = 1.0 / np.maximum(kind.smoothing, dist)
        x_new = (w[:, None] * stack).sum(axis=0) / w.sum()
        step = float(np.linalg.norm(x_new - x))
        x = x_new
        if step < kind.tol:
            break
    return x


def _krum(stack: np.ndarray, num_byz: int) -> np.ndarray:
    n = stack.shape[0]
    n_neighbors = n - num_byz - 2
    if n_neighbors < 1:
        raise ValueError(f"Krum needs n - num_byz - 2 >= 1, got n={n}, num_byz={num_byz}")
    sq = np.sum((stack[:, None, :] - stack[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(sq, np.inf)
    scores = np.sort(sq, axis=1)[:, :n_neighbors].sum(axis=1)
    return stack[int(np.argmin(scores))].copy()  # ties: argmin takes the lower index


def _bucket_means(stack: np.ndarray, s: int, rng: RngStream) -> np.ndarray:
    n = stack.shape[0]
    perm = rng.permutation(n)
    n_buckets = math.ceil(n / s)
    means = np.empty((n_buckets, stack.shape[1]))
    for i in range(n_buckets):
        chunk = perm[i * s:min((i + 1) * s, n)]
        means[i] = stack[chunk].mean(axis=0)  # last bucket may be smaller
    return means


@dataclass(frozen=True)
class CertificateResult:
    """Monte-Carlo estimate of the robust-aggregation inequality terms."""

    empirical_lhs: float
    sigma_sq: float
    c_hat: float
    delta: float
    trials: int


def robustness_certificate(kind: AggregatorKind,
                           good_sampler: Callable[[RngStream], np.ndarray],
                           num_good: int,
                           byz_vectors: Sequence[np.ndarray],
                           delta: float,
                           trials: int,
                           rng: RngStream) -> CertificateResult:
    """Estimate E||agg - mean_good||^2, the honest pairwise variance, and c_hat.

    good_sampler draws one honest vector per call.  c_hat is
    lhs / (delta * sigma_sq); it is 0 when lhs is exactly 0, and inf
    when the denominator vanishes while lhs does not.
    """
    if not 0 <= delta < 0.5:
        raise ValueError("delta must lie in [0, 0.5)")
    if trials < 1:
        raise ValueError("need at least one trial")
    byz = [as_vector(v) for v in byz_vectors]
    n_total = num_good + len(byz)
    if num_good < (1 - delta) * n_total:
        raise ValueError("good fraction below 1 - delta")

    lhs_acc = 0.0
    pairvar_acc = 0.0
    for trial in range(trials):
        trial_rng = rng.substream(trial)
        goods = np.stack([good_sampler(trial_rng) for _ in range(num_good)])
        mean_good = goods.mean(axis=0)
        agg = aggregate(kind, list(goods) + byz, trial_rng)
        lhs_acc += float(np.sum((agg - mean_good) ** 2))
        if num_good > 1:
            sq_norms = np.sum(goods ** 2, axis=1)
            gram = goods @ goods.T
            pair_sum = float(np.sum(sq_norms[:, None] + sq_norms[None, :] - 2 * gram))
            pairvar_acc += pair_sum / (num_good * (num_good - 1))

    lhs = lhs_acc / trials
    sigma_sq = pairvar_acc / trials
    denom = delta * sigma_sq
    if lhs == 0.0:
        c_hat = 0.0
    elif denom == 0.0:
        c_hat = math.inf
    else:
        c_hat = lhs / denom
    return CertificateResult(empirical_lhs=lhs, sigma_sq=sigma_sq, c_hat=c_hat,
                             delta=delta, trials=trials)
