"""Figures written next to report CSVs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_report(report, path):
    """Accuracy curves and cumulative cost for one experiment."""
    rows = report.rows
    epochs = [r.epoch for r in rows]
    fig, (ax_acc, ax_cost) = plt.subplots(1, 2, figsize=(10, 4))
    ax_acc.plot(epochs, [r.old_top1 for r in rows], label="old classes")
    ax_acc.plot(epochs, [r.new_top1 for r in rows], label="new class")
    ax_acc.plot(epochs, [r.combined_top1 for r in rows], "--", label="combined")
    ax_acc.set_xlabel("continual epoch")
    ax_acc.set_ylabel("top-1 accuracy")
    ax_acc.set_ylim(-0.02, 1.02)
    ax_acc.legend(loc="lower right")
    ax_acc.set_title(f"{report.mode}, T={report.config.t_step}, l_ins={report.config.l_ins}")
    ax_cost.plot(epochs, [r.energy_proxy for r in rows], color="tab:red")
    ax_cost.set_xlabel("continual epoch")
    ax_cost.set_ylabel("cumulative energy proxy")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_sweep(reports, axis, path):
    """Final accuracy, latency, and energy against the swept value."""
    keys = list(reports)
    finals = [reports[k].final for k in keys]
    labels = [str(k) for k in keys]
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    axes[0].plot(labels, [f.old_top1 for f in finals], "o-", label="old classes")
    axes[0].plot(labels, [f.new_top1 for f in finals], "s-", label="new class")
    axes[0].set_ylim(-0.02, 1.02)
    axes[0].set_ylabel("final top-1 accuracy")
    axes[0].legend(loc="lower right")
    axes[1].bar(labels, [f.wall_latency for f in finals])
    axes[1].set_ylabel("continual-phase wall time [s]")
    axes[2].bar(labels, [f.energy_proxy for f in finals], color="tab:red")
    axes[2].set_ylabel("energy proxy")
    for ax in axes:
        ax.set_xlabel(axis)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
