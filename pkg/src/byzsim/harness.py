"""Experiment orchestration: data, partitioning, run loop, CSV output.

A run is fully determined by (config, seed): data synthesis, worker
partitioning, stepsize resolution, and every round of the selected
optimizer draw from streams derived from the one seed.  Metrics are
evaluated on the average objective of the good workers only.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import algorithms, attacks
from .aggregators import (CM, GM, AggregatorKind, Bucketed, Krum, Mean,
                          DEFAULT_AGG_C, default_bucket_size)
from .algorithms import (ALGORITHMS, HyperParams, StepsizeInputs, StreamBundle,
                         init_states, stepsize_nonconvex, stepsize_pl)
from .attacks import AttackKind
from .compressors import (CompressorKind, Identity, Natural, RandK, ScaledUnbiased,
                          TopK, alpha, is_contractive, is_unbiased, omega)
from .core import RngStream
from .objective import (LabeledDataset, LogisticObjective, QuadraticObjective,
                        Regularizer, SmoothnessConstants, estimate_constants,
                        estimate_f_star, global_grad, global_loss)

# Stream ids for data synthesis; disjoint from the per-run purpose tags.
_STREAM_DATA = 7 << 32
_STREAM_SHIFT = 8 << 32


class ParseError(ValueError):
    """Malformed dataset or config file."""


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def load_libsvm(path, n_features: int | None = None) -> LabeledDataset:
    """Parse a libsvm-format text file ("label idx:val idx:val ...").

    Indices are 1-based.  Labels 0 and -1 map to -1; labels 1 and +1 map
    to +1.  The feature dimension is the largest index seen unless
    overridden.
    """
    data, indices, indptr, labels = [], [], [0], []
    max_idx = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            try:
                label = float(parts[0])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: bad label {parts[0]!r}") from exc
            if label in (1.0,):
                labels.append(1.0)
            elif label in (0.0, -1.0):
                labels.append(-1.0)
            else:
                raise ParseError(f"line {lineno}: unknown label {parts[0]!r}")
            for tok in parts[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError as exc:
                    raise ParseError(f"line {lineno}: bad pair {tok!r}") from exc
                if idx < 1:
                    raise ParseError(f"line {lineno}: index {idx} is not 1-based")
                indices.append(idx - 1)
                data.append(val)
                max_idx = max(max_idx, idx)
            indptr.append(len(data))
    if not labels:
        raise ParseError("empty dataset file")
    d = n_features if n_features is not None else max_idx
    if max_idx > d:
        raise ParseError(f"feature index {max_idx} exceeds configured dimension {d}")
    matrix = sp.csr_matrix((np.array(data), np.array(indices, dtype=np.int64),
                            np.array(indptr, dtype=np.int64)),
                           shape=(len(labels), d))
    return LabeledDataset(matrix, np.array(labels))


HOMOGENEOUS = "homogeneous"
HETEROGENEOUS = "heterogeneous"


def partition(ds: LabeledDataset, n_good: int, scheme: str) -> list[LabeledDataset]:
    """Split a dataset across good workers.

    Homogeneous: every shard is the full dataset (shared reference).
    Heterogeneous: contiguous blocks in file order, sizes differing by
    at most one, no overlap.
    """
    if n_good < 1:
        raise ValueError("need at least one good worker")
    if scheme == HOMOGENEOUS:
        return [ds] * n_good
    if scheme == HETEROGENEOUS:
        if n_good > ds.n_samples:
            raise ValueError("more good workers than samples")
        blocks = np.array_split(np.arange(ds.n_samples), n_good)
        return [ds.subset(b) for b in blocks]
    raise ValueError(f"unknown partition scheme {scheme!r}")


def synthetic_logistic_dataset(n_samples: int, n_features: int,
                               seed: int = 7) -> LabeledDataset:
    """Binary-encoded synthetic classification data.

    Feature columns have random prevalence and a mild label-dependent
    shift; active entries take value 0.5 or 1.0, mimicking categorical
    survey-style encodings.
    """
    rng = RngStream(seed, _STREAM_DATA)
    labels = np.where(rng.uniform(size=n_samples) < 0.5, -1.0, 1.0)
    prevalence = 0.17 + 0.50 * rng.uniform(size=n_features)
    shift = -0.15 + 0.30 * rng.uniform(size=n_features)
    prob = np.clip(prevalence[None, :] + labels[:, None] * shift[None, :],
                   0.05, 0.95)
    active = rng.uniform(size=(n_samples, n_features)) < prob
    halves = rng.uniform(size=(n_samples, n_features)) < 0.55
    dense = np.where(active, np.where(halves, 0.5, 1.0), 0.0)
    return LabeledDataset(sp.csr_matrix(dense), labels)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

SYNTHETIC = "synthetic"
QUADRATIC = "quadratic"

ATTACK_NAMES = ("none", "bf", "lf", "ipm", "alie", "mimic")
AGGREGATOR_NAMES = ("mean", "cm", "gm", "krum")
COMPRESSOR_NAMES = ("identity", "randk", "topk", "natural")


@dataclass
class ExperimentConfig:
    """Flat description of one experiment; every field has a config-file key."""

    dataset: str = SYNTHETIC          # libsvm path, "synthetic", or "quadratic"
    synthetic_samples: int = 2000
    synthetic_features: int = 68
    data_seed: int = 7
    quad_group_size: int = 10
    quad_dim: int = 100
    zeta1_seed: int = 101
    zeta2_seed: int = 202

    n: int = 16
    n_byz: int = 3
    partition: str = HOMOGENEOUS

    regularizer: str = "nonconvex"    # nonconvex | ridge
    lam: float = 0.1

    algo: str = "marina2"
    rounds: int = 200
    batch: int = 0                    # 0: round(0.01 * local sample count)
    p: float = 0.0                    # 0: algorithm-specific default
    momentum: float = 0.0             # 0: 1/(2*omega+1) for dasha
    compressor: str = "randk"
    k: int = 0                        # 0: round(0.1 * d)
    downlink_compressor: str = "identity"
    downlink_k: int = 0
    aggregator: str = "cm"
    bucket_s: int = 0                 # 0: floor(0.5 / delta), at least 1
    agg_c: float = DEFAULT_AGG_C

    stepsize_mode: str = "theoretical"  # theoretical | multiplier | explicit
    gamma_mult: float = 1.0
    gamma: float = 0.0
    pl_stepsize: bool = False

    attack: str = "none"
    attack_z: float = 0.0             # 0: per-attack default

    seed: int = 0
    metrics_every: int = 1
    f_star_mode: str = "none"         # none | auto | value
    f_star: float = 0.0
    f_star_tol: float = 1e-12

    def validate(self) -> None:
        if self.attack not in ATTACK_NAMES:
            raise ValueError(f"unknown attack {self.attack!r}")
        if self.aggregator not in AGGREGATOR_NAMES:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.compressor not in COMPRESSOR_NAMES:
            raise ValueError(f"unknown compressor {self.compressor!r}")
        if self.downlink_compressor not in COMPRESSOR_NAMES:
            raise ValueError(f"unknown compressor {self.downlink_compressor!r}")
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.partition not in (HOMOGENEOUS, HETEROGENEOUS):
            raise ValueError(f"unknown partition {self.partition!r}")
        if self.stepsize_mode not in ("theoretical", "multiplier", "explicit"):
            raise ValueError(f"unknown stepsize mode {self.stepsize_mode!r}")
        if self.metrics_every < 1:
            raise ValueError("metrics_every must be >= 1")
        n = self.effective_n()
        if not self.n_byz < n / 2:
            raise ValueError(f"need n_byz < n/2, got {self.n_byz} of {n}")

    def effective_n(self) -> int:
        if self.dataset == QUADRATIC:
            return 2 * self.quad_group_size + self.n_byz
        return self.n


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def parse_config_file(path) -> ExperimentConfig:
    """Read the flat "key = value" config grammar (one pair per line,
    '#' starts a comment)."""
    values = {}
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"config line {lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in fields:
                raise ParseError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(fields[key].type, val, lineno)
    return ExperimentConfig(**values)


def _coerce(type_name, val: str, lineno: int):
    base = str(type_name)
    try:
        if "bool" in base:
            low = val.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(val)
        if "int" in base:
            return int(val)
        if "float" in base:
            return float(val)
        return val
    except ValueError as exc:
        raise ParseError(f"config line {lineno}: bad value {val!r}") from exc


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------


@dataclass
class Problem:
    """Everything run() needs once the config is resolved."""

    objectives: list
    good_idx: list[int]
    byz_idx: list[int]
    good_objectives: list
    constants: SmoothnessConstants
    delta: float
    dim: int
    local_m: int
    hp: HyperParams
    stepsize_inputs: StepsizeInputs
    gamma_theoretical: float
    attack: AttackKind | None
    n: int


def _build_compressor(name: str, k: int, d: int) -> CompressorKind:
    if name == "identity":
        return Identity()
    if name == "natural":
        return Natural()
    kk = k if k > 0 else max(1, round(0.1 * d))
    if name == "randk":
        return RandK(kk)
    if name == "topk":
        return TopK(kk)
    raise ValueError(f"unknown compressor {name!r}")


def _build_aggregator(cfg: ExperimentConfig, delta: float) -> AggregatorKind:
    inner = {"mean": Mean(), "cm": CM(), "gm": GM(),
             "krum": Krum(num_byz=cfg.n_byz)}[cfg.aggregator]
    s = cfg.bucket_s if cfg.bucket_s > 0 else default_bucket_size(delta)
    if s == 1 and isinstance(inner, Mean):
        return inner
    return Bucketed(inner, s=s)


def _build_attack(cfg: ExperimentConfig) -> AttackKind | None:
    name = cfg.attack
    if name == "none":
        return None
    if name == "bf":
        return attacks.BitFlipping()
    if name == "lf":
        return attacks.LabelFlipping()
    if name == "mimic":
        return attacks.Mimic()
    if name == "ipm":
        return attacks.InnerProductManipulation(
            z=cfg.attack_z if cfg.attack_z > 0 else attacks.DEFAULT_IPM_Z)
    if name == "alie":
        return attacks.ALittleIsEnough(
            z=cfg.attack_z if cfg.attack_z != 0 else attacks.DEFAULT_ALIE_Z)
    raise ValueError(f"unknown attack {name!r}")


def build_problem(cfg: ExperimentConfig) -> Problem:
    cfg.validate()
    if cfg.dataset == QUADRATIC:
        return _build_quadratic_problem(cfg)

    if cfg.dataset == SYNTHETIC:
        ds = synthetic_logistic_dataset(cfg.synthetic_samples,
                                        cfg.synthetic_features, cfg.data_seed)
    else:
        ds = load_libsvm(cfg.dataset)
    if cfg.attack == "mimic":
        raise ValueError("the mimic attack is defined for the quadratic task only")
    reg = Regularizer(cfg.regularizer, cfg.lam)

    n = cfg.n
    n_good = n - cfg.n_byz
    shards = partition(ds, n_good, cfg.partition)
    # One objective instance per distinct shard, so workers sharing data
    # (homogeneous mode) also share gradient evaluations.
    wrappers: dict[int, LogisticObjective] = {}
    good_objectives = [
        wrappers.setdefault(id(s), LogisticObjective(s, reg)) for s in shards]

    # Malicious workers have access to the full dataset; under label
    # flipping their shadow protocol runs on the label-negated copy.
    byz_shard = ds.label_flipped() if cfg.attack == "lf" else ds
    byz_objective = LogisticObjective(byz_shard, reg)

    objectives = list(good_objectives) + [byz_objective] * cfg.n_byz
    good_idx = list(range(n_good))
    byz_idx = list(range(n_good, n))

    local_m = min(s.n_samples for s in shards)
    return _finish_problem(cfg, objectives, good_objectives, good_idx, byz_idx,
                           ds.n_features, local_m)


def _build_quadratic_problem(cfg: ExperimentConfig) -> Problem:
    if cfg.attack == "lf":
        raise ValueError("label flipping is defined for dataset objectives only")
    d = cfg.quad_dim
    zeta1 = RngStream(cfg.zeta1_seed, _STREAM_SHIFT).standard_normal(d)
    zeta2 = RngStream(cfg.zeta2_seed, _STREAM_SHIFT).standard_normal(d)
    obj1 = QuadraticObjective(zeta1)
    obj2 = QuadraticObjective(zeta2)
    good_objectives = [obj1] * cfg.quad_group_size + [obj2] * cfg.quad_group_size
    # Mimic adversaries replay group-1 behavior; other attacks forge from
    # an honest shadow that also follows group 1.
    objectives = good_objectives + [obj1] * cfg.n_byz
    n = len(objectives)
    good_idx = list(range(len(good_objectives)))
    byz_idx = list(range(len(good_objectives), n))
    return _finish_problem(cfg, objectives, good_objectives, good_idx, byz_idx,
                           d, local_m=1)


def _finish_problem(cfg: ExperimentConfig, objectives, good_objectives,
                    good_idx, byz_idx, dim: int, local_m: int) -> Problem:
    n = len(objectives)
    delta = len(byz_idx) / n
    constants = estimate_constants(good_objectives)

    b = cfg.batch if cfg.batch > 0 else max(1, round(0.01 * local_m))
    b = min(b, local_m)
    uplink = _build_compressor(cfg.compressor, cfg.k, dim)
    downlink = _build_compressor(cfg.downlink_compressor, cfg.downlink_k, dim)

    algo = cfg.algo
    if algorithms.uses_unbiased_compression(algo):
        if not is_unbiased(uplink):
            raise ValueError(f"{algo} needs an unbiased uplink compressor, "
                             f"got {cfg.compressor}")
        omega_val = omega(uplink, dim)
        alpha_d = 1.0
    else:
        if not is_contractive(uplink):
            uplink = ScaledUnbiased(uplink)  # standard scaling adapter
        omega_val = 0.0
        alpha_d = alpha(uplink, dim)
    if algo == "ef21bc" and not is_contractive(downlink):
        downlink = ScaledUnbiased(downlink)
    alpha_p = alpha(downlink, dim) if algo == "ef21bc" else 1.0

    p = cfg.p if cfg.p > 0 else algorithms.default_p(algo, omega_val, b, local_m)
    a = cfg.momentum if cfg.momentum > 0 else (
        algorithms.default_momentum(omega_val) if algo == "dasha" else 1.0)

    si = StepsizeInputs(consts=constants, omega=omega_val, alpha_D=alpha_d,
                        alpha_P=alpha_p, c=cfg.agg_c, delta=delta,
                        G=len(good_idx), b=b, m=local_m, p=p, a=a, B=0.0)
    if cfg.pl_stepsize and constants.mu > 0:
        gamma_th = stepsize_pl(algo, si)
    else:
        gamma_th = stepsize_nonconvex(algo, si)

    if cfg.stepsize_mode == "explicit":
        if not cfg.gamma > 0:
            raise ValueError("explicit stepsize mode needs gamma > 0")
        gamma = cfg.gamma
    elif cfg.stepsize_mode == "multiplier":
        gamma = cfg.gamma_mult * gamma_th
    else:
        gamma = gamma_th

    hp = HyperParams(gamma=gamma, p=p, a=a, b=b, T=cfg.rounds, uplink=uplink,
                     downlink=downlink,
                     aggregator=_build_aggregator(cfg, delta), seed=cfg.seed)
    return Problem(objectives=objectives, good_idx=good_idx, byz_idx=byz_idx,
                   good_objectives=good_objectives, constants=constants,
                   delta=delta, dim=dim, local_m=local_m, hp=hp,
                   stepsize_inputs=si, gamma_theoretical=gamma_th,
                   attack=_build_attack(cfg), n=n)


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------


@dataclass
class RunRow:
    t: int
    bits: int
    f: float
    grad_norm_sq: float
    gap: float | None = None


@dataclass
class RunResult:
    rows: list[RunRow]
    config: dict
    gamma: float
    gamma_theoretical: float
    diverged: bool
    f_star: float | None
    wall_time: float


def run(cfg: ExperimentConfig) -> RunResult:
    """Execute one experiment; deterministic given (config, seed)."""
    start = time.perf_counter()
    prob = build_problem(cfg)
    streams = StreamBundle.create(cfg.seed, prob.n)
    x0 = np.zeros(prob.dim)
    server, workers = init_states(cfg.algo, x0, prob.objectives, prob.good_idx,
                                  prob.attack, prob.hp, streams)

    f_star = None
    if cfg.f_star_mode == "value":
        f_star = cfg.f_star
    elif cfg.f_star_mode == "auto":
        f_star = estimate_f_star(prob.good_objectives, cfg.f_star_tol).value

    rows: list[RunRow] = []

    def record(t: int, bits: int, x: np.ndarray) -> bool:
        f_val = global_loss(prob.good_objectives, x)
        g = global_grad(prob.good_objectives, x)
        g_sq = float(g @ g)
        if not (np.isfinite(f_val) and np.isfinite(g_sq)):
            return False
        gap = (f_val - f_star) if f_star is not None else None
        rows.append(RunRow(t=t, bits=bits, f=f_val, grad_norm_sq=g_sq, gap=gap))
        return True

    record(0, 0, server.x)
    step_fn = algorithms.STEP_FUNCTIONS[cfg.algo]
    cumulative_bits = 0
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, cfg.rounds + 1):
            server, workers, stats = step_fn(server, workers, prob.objectives,
                                             prob.good_idx, prob.attack,
                                             prob.hp, streams)
            cumulative_bits += stats.bits_uplink + stats.bits_downlink
            if not np.all(np.isfinite(server.x)):
                diverged = True
                break
            if t % cfg.metrics_every == 0 or t == cfg.rounds:
                if not record(t, cumulative_bits, server.x):
                    diverged = True
                    break

    return RunResult(rows=rows, config=dataclasses.asdict(cfg),
                     gamma=prob.hp.gamma,
                     gamma_theoretical=prob.gamma_theoretical,
                     diverged=diverged, f_star=f_star,
                     wall_time=time.perf_counter() - start)


CSV_HEADER = "t,bits,f,grad_norm_sq,gap"


def emit_csv(result: RunResult, path) -> None:
    """Write rows as CSV with >= 12 significant digits; gap empty when unknown."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in result.rows:
            gap = "" if row.gap is None else f"{row.gap:.17g}"
            fh.write(f"{row.t},{row.bits},{row.f:.17g},"
                     f"{row.grad_norm_sq:.17g},{gap}\n")
