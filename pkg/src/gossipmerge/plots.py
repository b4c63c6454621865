"""Figure rendering for run reports.

Everything here is additive: callers always write the delimited outputs
first, then invoke one of these helpers when plotting is enabled.  The
Agg backend keeps rendering headless-safe.
"""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  # backend must be pinned first

from .sim import MetricsRecord
from .topology import SpectralReport

__all__ = [
    "render_run_figure",
    "render_spectral_figure",
    "render_sweep_figure",
    "render_align_figure",
]


def _finish(fig, out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_run_figure(records: Sequence[MetricsRecord], out_dir: str) -> str:
    """Render loss / accuracy / consensus / gradient panels to metrics.png."""
    iters = [r.iteration for r in records]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))

    ax = axes[0, 0]
    losses = [r.agent_loss for r in records]
    for agent in range(len(losses[0]) if losses else 0):
        ax.plot(iters, [row[agent] for row in losses], alpha=0.5, lw=0.8)
    ax.plot(iters, [sum(row) / len(row) for row in losses], color="black", lw=1.6,
            label="mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.legend()

    ax = axes[0, 1]
    ax.plot(iters, [r.accuracy_avg for r in records], label="averaged model")
    ax.plot(iters, [r.accuracy_aligned for r in records], label="aligned average")
    ax.plot(iters, [r.accuracy_agents for r in records], label="agent mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend()

    ax = axes[1, 0]
    ax.semilogy(iters, [max(r.consensus, 1e-300) for r in records])
    ax.set_xlabel("iteration")
    ax.set_ylabel("consensus distance")

    ax = axes[1, 1]
    ax.semilogy(iters, [max(r.grad_norm, 1e-300) for r in records])
    ax.set_xlabel("iteration")
    ax.set_ylabel("squared gradient norm at mean")

    return _finish(fig, out_dir, "metrics.png")


def render_spectral_figure(report: SpectralReport, out_dir: str) -> str:
    """Histogram of permuted-round factors against the baseline factor."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    samples = report.permuted_factor_samples
    if samples:
        lo, hi = min(samples), max(samples)
        pad = max((hi - lo) * 0.05, 1e-6)  # identical samples still need a range
        ax.hist(samples, bins=min(30, max(5, len(samples) // 4)),
                range=(lo - pad, hi + pad), color="tab:blue",
                alpha=0.75, label="permuted rounds")
    ax.axvline(report.slem, color="tab:red", lw=1.6,
               label=f"baseline factor {report.slem:.6f}")
    if samples:
        ax.axvline(report.permuted_factor_max, color="tab:orange", lw=1.2,
                   linestyle="--", label=f"max sampled {report.permuted_factor_max:.6f}")
    ax.set_xlabel("disagreement contraction factor")
    ax.set_ylabel("trials")
    ax.legend()
    return _finish(fig, out_dir, "spectral.png")


def render_sweep_figure(agent_counts: Sequence[int],
                        medians: Sequence[float],
                        out_dir: str) -> str:
    """Median final gradient norm against the number of agents."""
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    ax.plot(agent_counts, medians, marker="o")
    ax.set_xlabel("agents")
    ax.set_ylabel("median final squared gradient norm")
    ax.set_xticks(list(agent_counts))
    if all(m > 0 for m in medians):
        ax.set_yscale("log")
    return _finish(fig, out_dir, "sweep.png")


def render_align_figure(mode_losses: dict[str, tuple[float, float]],
                        out_dir: str) -> str:
    """Grouped bars of candidate-vs-merged loss per alignment mode."""
    modes = list(mode_losses)
    before = [mode_losses[m][0] for m in modes]
    after = [mode_losses[m][1] for m in modes]
    xs = range(len(modes))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], before, width, label="plain average")
    ax.bar([x + width / 2 for x in xs], after, width, label="aligned merge")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(modes)
    ax.set_ylabel("probe loss")
    ax.legend()
    return _finish(fig, out_dir, "align.png")
