"""Figure rendering for run and sweep reports.

Every CSV the CLI writes gets a companion PNG next to it (unless
disabled): objective value and squared gradient norm against rounds and
against cumulative bits sent.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .harness import RunResult


def _series(result: RunResult):
    ts = [r.t for r in result.rows]
    bits = [r.bits for r in result.rows]
    fs = [r.f for r in result.rows]
    gs = [r.grad_norm_sq for r in result.rows]
    return ts, bits, fs, gs


def render_run_figure(result: RunResult, path, title: str = "") -> Path:
    """Two-panel convergence figure for a single run."""
    ts, bits, fs, gs = _series(result)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(ts, fs, color="tab:blue")
    axes[0].set_xlabel("round")
    axes[0].set_ylabel("f(x)")
    axes[1].plot(bits, gs, color="tab:red")
    axes[1].set_xlabel("bits sent")
    axes[1].set_ylabel(r"$\|\nabla f\|^2$")
    axes[1].set_yscale("log")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_sweep_figure(results: dict[float, RunResult], path,
                        title: str = "") -> Path:
    """Overlay gradient-norm curves for several stepsize multipliers."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for mult in sorted(results):
        _, bits, _, gs = _series(results[mult])
        label = f"{mult:g}x"
        if results[mult].diverged:
            label += " (diverged)"
        ax.plot(bits, gs, label=label)
    ax.set_xlabel("bits sent")
    ax.set_ylabel(r"$\|\nabla f\|^2$")
    ax.set_yscale("log")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
