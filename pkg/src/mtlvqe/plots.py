"""Convergence and rate-distortion figures (PNG, headless)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation.bdrate import RDCurve  # noqa: E402
from .training import TrainedRun  # noqa: E402


def plot_convergence(runs: list[TrainedRun], path: str | Path, title: str = "") -> None:
    """Training loss and validation PSNR per epoch, one line per run."""
    fig, (ax_loss, ax_psnr) = plt.subplots(1, 2, figsize=(10, 4))
    for run in runs:
        epochs = [r.epoch + 1 for r in run.history]
        ax_loss.plot(epochs, [r.loss_mtl for r in run.history], label=run.name)
        for field, style in (("val_psnr_sr", "-"), ("val_psnr_qe", "--")):
            vals = [getattr(r, field) for r in run.history]
            if any(v is not None for v in vals):
                ax_psnr.plot(epochs, [float("nan") if v is None else v for v in vals], style,
                             label=f"{run.name} {field[-2:].upper()}")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.set_yscale("log")
    ax_psnr.set_xlabel("epoch")
    ax_psnr.set_ylabel("validation PSNR (dB)")
    for ax in (ax_loss, ax_psnr):
        if ax.lines:
            ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_rd(curves: dict[str, list[RDCurve]], path: str | Path, title: str = "") -> None:
    """One panel per metric key, one line per curve."""
    keys = list(curves)
    fig, axes = plt.subplots(1, len(keys), figsize=(4.5 * len(keys), 4), squeeze=False)
    for ax, key in zip(axes[0], keys):
        for c in curves[key]:
            ax.plot(c.rates, c.qualities, "o-", label=c.label)
        ax.set_xscale("log")
        ax.set_xlabel("rate")
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
