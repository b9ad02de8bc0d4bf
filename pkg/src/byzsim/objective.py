"""Local objectives: regularized logistic regression and shifted quadratics.

A worker owns a LocalObjective, which is either a logistic loss over a
shard of labeled data plus a regularizer, or a shifted quadratic
``0.5*||x||^2 + <shift, x>`` used by the neighborhood study.  The module
also estimates the smoothness constants that feed the theoretical
stepsize formulas, and the reference optimum used for optimality-gap
reporting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .core import DimensionError, RngStream, as_vector, sample_without_replacement

NONCONVEX = "nonconvex"
RIDGE = "ridge"


@dataclass(frozen=True)
class Regularizer:
    """Regularization term (lam/2) * r(x).

    kind "nonconvex": r(x) = sum_j x_j^2 / (1 + x_j^2);
    kind "ridge":     r(x) = ||x||^2.
    Both have per-coordinate curvature bounded by lam.
    """

    kind: str
    lam: float

    def __post_init__(self):
        if self.kind not in (NONCONVEX, RIDGE):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    def value(self, x: np.ndarray) -> float:
        if self.lam == 0.0:
            return 0.0
        if self.kind == RIDGE:
            return 0.5 * self.lam * float(x @ x)
        sq = x * x
        return 0.5 * self.lam * float(np.sum(sq / (1.0 + sq)))

    def grad(self, x: np.ndarray) -> np.ndarray:
        if self.lam == 0.0:
            return np.zeros_like(x)
        if self.kind == RIDGE:
            return self.lam * x
        denom = 1.0 + x * x
        return self.lam * x / (denom * denom)

    @property
    def curvature(self) -> float:
        """Upper bound on the spectral norm of the regularizer Hessian."""
        return self.lam

    @property
    def strong_convexity(self) -> float:
        """Lower curvature bound: lam for ridge, 0 for the non-convex term."""
        return self.lam if self.kind == RIDGE else 0.0


class LabeledDataset:
    """Sparse design matrix with +-1 labels.

    Rows are stored as a CSR matrix of shape (N, d); instances are
    treated as immutable after construction.
    """

    def __init__(self, matrix: sp.csr_matrix, labels: np.ndarray):
        matrix = sp.csr_matrix(matrix, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64).ravel()
        if matrix.shape[0] != labels.shape[0]:
            raise ValueError("row/label count mismatch")
        if matrix.shape[0] == 0:
            raise ValueError("dataset must contain at least one sample")
        bad = ~np.isin(labels, (-1.0, 1.0))
        if np.any(bad):
            raise ValueError(f"labels must be -1 or +1, offending sample {int(np.argmax(bad))}")
        self.matrix = matrix
        self.labels = labels

    @property
    def n_samples(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_features(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_dense(cls, rows, labels) -> "LabeledDataset":
        return cls(sp.csr_matrix(np.asarray(rows, dtype=np.float64)), labels)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.matrix[idx], self.labels[idx])

    def label_flipped(self) -> "LabeledDataset":
        return LabeledDataset(self.matrix, -self.labels)

    def row_norms_sq(self) -> np.ndarray:
        sq = self.matrix.multiply(self.matrix)
        return np.asarray(sq.sum(axis=1)).ravel()


class LogisticObjective:
    """f_i(x) = (1/m) sum_j log(1 + exp(-y_j a_j^T x)) + (lam/2) r(x).

    Each per-sample term carries the full regularizer, so mini-batch
    gradient differences stay unbiased for the regularized objective.
    """

    _DENSE_CACHE_LIMIT = 2_000_000  # entries; small shards batch faster dense

    def __init__(self, shard: LabeledDataset, reg: Regularizer):
        self.shard = shard
        self.reg = reg
        self._dense = (shard.matrix.toarray()
                       if shard.n_samples * shard.n_features <= self._DENSE_CACHE_LIMIT
                       else None)

    @property
    def dim(self) -> int:
        return self.shard.n_features

    @property
    def n_samples(self) -> int:
        return self.shard.n_samples

    def _check(self, x) -> np.ndarray:
        x = as_vector(x)
        if x.shape[0] != self.dim:
            raise DimensionError(f"point has dim {x.shape[0]}, objective expects {self.dim}")
        return x

    def _margins(self, x: np.ndarray) -> np.ndarray:
        mat = self._dense if self._dense is not None else self.shard.matrix
        return self.shard.labels * (mat @ x)

    def loss(self, x) -> float:
        x = self._check(x)
        margins = self._margins(x)
        return float(np.mean(np.logaddexp(0.0, -margins))) + self.reg.value(x)

    def grad(self, x) -> np.ndarray:
        x = self._check(x)
        margins = self._margins(x)
        # d/dm log(1+e^{-m}) = -sigmoid(-m)
        coef = -self.shard.labels * _sigmoid(-margins)
        mat = self._dense if self._dense is not None else self.shard.matrix
        data_part = mat.T @ coef / self.shard.n_samples
        return np.asarray(data_part).ravel() + self.reg.grad(x)

    def _batch_rows(self, idx: np.ndarray):
        if self._dense is not None:
            return self._dense[idx]
        return self.shard.matrix[idx]

    def _batch_mean_grad(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        rows = self._batch_rows(idx)
        labels = self.shard.labels[idx]
        margins = labels * (rows @ x)
        coef = -labels * _sigmoid(-margins)
        return np.asarray(rows.T @ coef).ravel() / idx.shape[0]

    def grad_diff_estimator(self, x, y, b: int, rng: RngStream) -> np.ndarray:
        """Mini-batch estimate of grad(x) - grad(y), same batch at both points."""
        x = self._check(x)
        y = self._check(y)
        m = self.n_samples
        if not 1 <= b <= m:
            raise ValueError(f"batch size must satisfy 1 <= b <= {m}, got {b}")
        idx = sample_without_replacement(rng, m, b)
        rows = self._batch_rows(idx)
        labels = self.shard.labels[idx]
        coef_x = -labels * _sigmoid(-labels * (rows @ x))
        coef_y = -labels * _sigmoid(-labels * (rows @ y))
        data_diff = np.asarray(rows.T @ (coef_x - coef_y)).ravel() / b
        return data_diff + self.reg.grad(x) - self.reg.grad(y)


class QuadraticObjective:
    """f_i(x) = 0.5 * ||x||^2 + <shift, x>; gradient x + shift."""

    def __init__(self, shift):
        self.shift = as_vector(shift)

    @property
    def dim(self) -> int:
        return self.shift.shape[0]

    @property
    def n_samples(self) -> int:
        return 1

    def _check(self, x) -> np.ndarray:
        x = as_vector(x)
        if x.shape[0] != self.dim:
            raise DimensionError(f"point has dim {x.shape[0]}, objective expects {self.dim}")
        return x

    def loss(self, x) -> float:
        x = self._check(x)
        return 0.5 * float(x @ x) + float(self.shift @ x)

    def grad(self, x) -> np.ndarray:
        x = self._check(x)
        return x + self.shift

    def grad_diff_estimator(self, x, y, b: int, rng: RngStream) -> np.ndarray:
        # The quadratic is a single deterministic term; the difference is exact.
        x = self._check(x)
        y = self._check(y)
        if b < 1:
            raise ValueError("batch size must be >= 1")
        return x - y


def _sigmoid(u: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


@dataclass(frozen=True)
class SmoothnessConstants:
    """Conservative upper bounds feeding the theoretical stepsizes."""

    L: float
    L_pm: float
    calL_pm: float
    mu: float

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("L must be positive")
        if self.L_pm < 0 or self.calL_pm < 0 or self.mu < 0:
            raise ValueError("constants must be non-negative")


def power_iteration_sigma_max_sq(matvec, dim: int, rel_tol: float = 1e-6,
                                 max_iters: int = 10_000) -> float:
    """Largest eigenvalue of a PSD operator given through matvec."""
    v = np.full(dim, 1.0 / np.sqrt(dim))
    lam = 0.0
    for _ in range(max_iters):
        w = matvec(v)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam_new = float(v @ matvec(v))
        if abs(lam_new - lam) <= rel_tol * max(lam_new, 1e-300):
            return lam_new
        lam = lam_new
    return lam


def _logistic_smoothness(shards: Sequence[LabeledDataset], weights: Sequence[float],
                         curvature: float) -> float:
    """L of sum_i w_i * (logistic mean on shard i) + regularizer curvature."""
    dim = shards[0].n_features

    def matvec(v):
        acc = np.zeros(dim)
        for shard, w in zip(shards, weights):
            acc += (w / (4.0 * shard.n_samples)) * np.asarray(
                shard.matrix.T @ (shard.matrix @ v)).ravel()
        return acc

    return power_iteration_sigma_max_sq(matvec, dim) + curvature


def estimate_constants(objectives: Sequence, reg: Regularizer | None = None) -> SmoothnessConstants:
    """Estimate (L, L_pm, calL_pm, mu) for a family of local objectives.

    All bounds are valid upper bounds rather than tight values: L comes
    from power iteration on the averaged curvature operator, L_pm uses
    the L_avg bound, and calL_pm is the worst per-sample smoothness
    across shards.
    """
    if not objectives:
        raise ValueError("need at least one local objective")
    if all(isinstance(o, QuadraticObjective) for o in objectives):
        # Identical identity Hessians: no global or local Hessian variance.
        return SmoothnessConstants(L=1.0, L_pm=0.0, calL_pm=0.0, mu=0.0)
    if not all(isinstance(o, LogisticObjective) for o in objectives):
        raise ValueError("objectives must be all logistic or all quadratic")
    if reg is None:
        reg = objectives[0].reg

    unique: dict[int, LabeledDataset] = {}
    counts: dict[int, int] = {}
    for o in objectives:
        key = id(o.shard)
        unique.setdefault(key, o.shard)
        counts[key] = counts.get(key, 0) + 1
    G = len(objectives)

    shards = list(unique.values())
    weights = [counts[k] / G for k in unique]
    L = _logistic_smoothness(shards, weights, reg.curvature)

    per_worker_L_sq = {}
    for key, shard in unique.items():
        per_worker_L_sq[key] = _logistic_smoothness([shard], [1.0], reg.curvature) ** 2
    L_avg_sq = sum(counts[k] * per_worker_L_sq[k] for k in unique) / G
    L_pm = float(np.sqrt(L_avg_sq))

    calL = max(float(np.max(shard.row_norms_sq())) / 4.0 + reg.curvature
               for shard in unique.values())
    return SmoothnessConstants(L=L, L_pm=L_pm, calL_pm=calL,
                               mu=reg.strong_convexity)


def global_loss(objectives: Sequence, x: np.ndarray) -> float:
    """f(x) = (1/G) sum_i f_i(x); shared shard objects are evaluated once."""
    cache: dict[int, float] = {}
    total = 0.0
    for o in objectives:
        key = id(o)
        if key not in cache:
            cache[key] = o.loss(x)
        total += cache[key]
    return total / len(objectives)


def global_grad(objectives: Sequence, x: np.ndarray) -> np.ndarray:
    cache: dict[int, np.ndarray] = {}
    acc = np.zeros_like(np.asarray(x, dtype=np.float64))
    for o in objectives:
        key = id(o)
        if key not in cache:
            cache[key] = o.grad(x)
        acc += cache[key]
    return acc / len(objectives)


@dataclass(frozen=True)
class FStarEstimate:
    value: float
    converged: bool
    iterations: int


def estimate_f_star(objectives: Sequence, tol: float,
                    max_iters: int = 200_000, x0=None) -> FStarEstimate:
    """Gradient descent with stepsize 1/L until ||grad f||^2 <= tol.

    Returns the best achieved value with converged=False when the
    iteration cap is hit first.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    consts = estimate_constants(objectives)
    dim = objectives[0].dim
    x = np.zeros(dim) if x0 is None else as_vector(x0).copy()
    step = 1.0 / consts.L
    best = global_loss(objectives, x)
    for it in range(max_iters):
        g = global_grad(objectives, x)
        if float(g @ g) <= tol:
            return FStarEstimate(value=global_loss(objectives, x), converged=True,
                                 iterations=it)
        x = x - step * g
        best = min(best, global_loss(objectives, x))
    return FStarEstimate(value=best, converged=False, iterations=max_iters)
