"""Command-line interface.

Subcommands: run (single experiment -> CSV + figure), sweep (stepsize
multipliers), certify-aggregator (empirical robustness certificate),
check-compressor (compressor property report), constants (estimated
smoothness constants and theoretical stepsizes).

Exit codes: 0 success, 2 divergence flag, 1 error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import algorithms, reporting
from .aggregators import (CM, GM, Bucketed, Krum, Mean,
                          default_bucket_size, robustness_certificate)
from .compressors import alpha, compress, decompress, is_contractive, is_unbiased, omega
from .core import RngStream, norm_sq
from .harness import (ATTACK_NAMES, AGGREGATOR_NAMES, COMPRESSOR_NAMES,
                      ExperimentConfig, build_problem, emit_csv,
                      parse_config_file, run)


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--seed", type=int, help="base RNG seed (64-bit)")
    p.add_argument("--algo", choices=algorithms.ALGORITHMS)
    p.add_argument("--attack", choices=ATTACK_NAMES)
    p.add_argument("--attack-z", type=float, dest="attack_z")
    p.add_argument("--agg", choices=AGGREGATOR_NAMES, dest="aggregator")
    p.add_argument("--bucket-s", type=int, dest="bucket_s")
    p.add_argument("--compressor", choices=COMPRESSOR_NAMES)
    p.add_argument("--k", type=int)
    p.add_argument("--gamma-mult", type=float, dest="gamma_mult")
    p.add_argument("--gamma", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--dataset")
    p.add_argument("--partition", choices=("homogeneous", "heterogeneous"))
    p.add_argument("--reg", choices=("nonconvex", "ridge"), dest="regularizer")
    p.add_argument("--lam", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--n-byz", type=int, dest="n_byz")
    p.add_argument("--batch", type=int)
    p.add_argument("--metrics-every", type=int, dest="metrics_every")
    p.add_argument("--pl", action="store_true", dest="pl_stepsize", default=None)
    p.add_argument("--f-star", dest="f_star_mode", choices=("none", "auto"))


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = parse_config_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for f in dataclasses.fields(ExperimentConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            overrides[f.name] = val
    if getattr(args, "gamma", None) is not None:
        overrides["stepsize_mode"] = "explicit"
    elif getattr(args, "gamma_mult", None) is not None:
        overrides["stepsize_mode"] = "multiplier"
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    result = run(cfg)
    out = args.out or Path("run.csv")
    emit_csv(result, out)
    if not args.no_figure:
        reporting.render_run_figure(result, Path(out).with_suffix(".png"),
                                    title=f"{cfg.algo} / {cfg.attack}")
    last = result.rows[-1]
    print(f"algo={cfg.algo} gamma={result.gamma:.6g} "
          f"(theoretical {result.gamma_theoretical:.6g})")
    print(f"rows={len(result.rows)} final t={last.t} bits={last.bits} "
          f"f={last.f:.6g} grad_norm_sq={last.grad_norm_sq:.6g}")
    print(f"csv written to {out}")
    if result.diverged:
        print("run diverged (NaN in iterate); partial rows kept", file=sys.stderr)
        return 2
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    mults = [float(t) for t in args.mults.split(",") if t.strip()]
    if not mults:
        raise ValueError("no multipliers given")
    out = Path(args.out or "sweep.csv")
    results = {}
    for mult in mults:
        cfg_m = dataclasses.replace(cfg, stepsize_mode="multiplier",
                                    gamma_mult=mult)
        res = run(cfg_m)
        results[mult] = res
        path = out.with_name(f"{out.stem}-x{mult:g}{out.suffix}")
        emit_csv(res, path)
        status = "diverged" if res.diverged else "ok"
        best = min(r.grad_norm_sq for r in res.rows)
        print(f"mult={mult:g} gamma={res.gamma:.6g} best_grad_norm_sq={best:.6g} "
              f"[{status}] -> {path}")
    if not args.no_figure:
        reporting.render_sweep_figure(results, out.with_suffix(".png"),
                                      title=f"{cfg.algo} / {cfg.attack}")
    return 2 if all(r.diverged for r in results.values()) else 0


def _cmd_certify(args) -> int:
    cfg = _config_from_args(args)
    n = cfg.n
    num_good = n - cfg.n_byz
    delta = cfg.n_byz / n
    s = cfg.bucket_s if cfg.bucket_s > 0 else default_bucket_size(delta)
    inner = {"mean": Mean(), "cm": CM(), "gm": GM(),
             "krum": Krum(num_byz=cfg.n_byz)}[cfg.aggregator]
    kind = inner if (s == 1 and isinstance(inner, Mean)) else Bucketed(inner, s=s)
    outlier = np.zeros(args.dim)
    outlier[0] = args.outlier_scale
    byz = [outlier] * cfg.n_byz

    def sampler(rng: RngStream) -> np.ndarray:
        return rng.standard_normal(args.dim)

    cert = robustness_certificate(kind, sampler, num_good, byz, delta,
                                  args.trials, RngStream(cfg.seed, 99))
    print(f"aggregator={cfg.aggregator} bucket_s={s} "
          f"goods={num_good} byz={cfg.n_byz} delta={delta:.4g}")
    print(f"empirical_lhs={cert.empirical_lhs:.6g} sigma_sq={cert.sigma_sq:.6g} "
          f"c_hat={cert.c_hat:.6g}")
    return 0


def _cmd_check_compressor(args) -> int:
    cfg = _config_from_args(args)
    from .harness import _build_compressor  # shared construction rules

    kind = _build_compressor(cfg.compressor, cfg.k, args.dim)
    rng = RngStream(cfg.seed, 123)
    x = rng.standard_normal(args.dim)
    ok = True
    if is_unbiased(kind):
        w = omega(kind, args.dim)
        acc = np.zeros(args.dim)
        var_acc = 0.0
        for _ in range(args.draws):
            y = decompress(compress(kind, x, rng))
            acc += y
            var_acc += norm_sq(y - x)
        mean_err = np.max(np.abs(acc / args.draws - x))
        ratio = (var_acc / args.draws) / norm_sq(x)
        print(f"unbiased class: omega={w:.6g}")
        print(f"max |empirical mean - x| = {mean_err:.4g}")
        print(f"empirical E||Q(x)-x||^2 / ||x||^2 = {ratio:.6g} (bound {w:.6g})")
        ok &= ratio <= w * 1.05 + 1e-12
    if is_contractive(kind):
        a = alpha(kind, args.dim)
        worst = 0.0
        for _ in range(args.draws):
            z = rng.standard_normal(args.dim)
            y = decompress(compress(kind, z, rng))
            worst = max(worst, norm_sq(y - z) / norm_sq(z))
        print(f"contractive class: alpha={a:.6g}")
        print(f"max ||C(x)-x||^2 / ||x||^2 = {worst:.6g} (bound {1 - a:.6g})")
        ok &= worst <= (1 - a) * (1 + 1e-6) + 1e-12
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_constants(args) -> int:
    cfg = _config_from_args(args)
    prob = build_problem(cfg)
    c = prob.constants
    print(f"L={c.L:.6g} L_pm={c.L_pm:.6g} calL_pm={c.calL_pm:.6g} mu={c.mu:.6g}")
    print(f"delta={prob.delta:.4g} G={len(prob.good_idx)} b={prob.hp.b} "
          f"m={prob.local_m}")
    for algo in algorithms.ALGORITHMS:
        try:
            sub = dataclasses.replace(cfg, algo=algo)
            p = build_problem(sub)
            line = f"{algo:8s} gamma_nc={p.gamma_theoretical:.6g}"
            if c.mu > 0:
                gamma_pl = algorithms.stepsize_pl(algo, p.stepsize_inputs)
                line += f" gamma_pl={gamma_pl:.6g}"
            print(line)
        except ValueError as exc:
            print(f"{algo:8s} n/a ({exc})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="byzsim",
        description="Byzantine-robust compressed optimization simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment and write a CSV")
    _add_common_flags(p_run)
    p_run.add_argument("--out", type=Path)
    p_run.add_argument("--no-figure", action="store_true")
    p_run.set_defaults(fn=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep stepsize multipliers")
    _add_common_flags(p_sweep)
    p_sweep.add_argument("--out", type=Path)
    p_sweep.add_argument("--mults", default="1,2,4,8")
    p_sweep.add_argument("--no-figure", action="store_true")
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_cert = sub.add_parser("certify-aggregator",
                            help="Monte-Carlo robustness certificate")
    _add_common_flags(p_cert)
    p_cert.add_argument("--trials", type=int, default=10_000)
    p_cert.add_argument("--dim", type=int, default=5)
    p_cert.add_argument("--outlier-scale", type=float, default=100.0)
    p_cert.set_defaults(fn=_cmd_certify)

    p_chk = sub.add_parser("check-compressor",
                           help="empirical compressor property report")
    _add_common_flags(p_chk)
    p_chk.add_argument("--dim", type=int, default=20)
    p_chk.add_argument("--draws", type=int, default=20_000)
    p_chk.set_defaults(fn=_cmd_check_compressor)

    p_const = sub.add_parser("constants",
                             help="print smoothness constants and stepsizes")
    _add_common_flags(p_const)
    p_const.set_defaults(fn=_cmd_constants)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
