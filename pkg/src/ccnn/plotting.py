"""Figures written next to the CSV reports.  Uses the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_SIZE = (4.8, 3.6)


def _axes():
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_roc(curve, path, fpr_target=0.1):
    fig, ax = _axes()
    ax.plot(curve.fpr, curve.tpr, color="tab:blue", lw=1.5, label=f"AUC = {curve.auc:.4f}")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.axvline(fpr_target, color="tab:red", lw=0.8, ls=":")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", frameon=False)
    _save(fig, path)


def plot_stage_report(report, path):
    """Cumulative accuracy, recall and survivor fractions against stage index."""
    fig, ax = _axes()
    stages = np.arange(1, len(report.accuracy) + 1)
    ax.plot(stages, report.accuracy, "o-", label="accuracy")
    ax.plot(stages, report.recall_at_fpr, "s-", label="recall @ 0.1 FPR")
    ax.plot(stages, report.recall, "d-", label="recall under thresholds")
    ax.plot(stages, report.survivors, "^--", label="survivors")
    ax.plot(stages, report.negative_survivors, "v--", label="negative survivors")
    ax.set_xticks(stages)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("stage")
    ax.legend(loc="lower left", frameon=False, fontsize=8)
    _save(fig, path)


def plot_training_log(rows, path):
    """Per-epoch mean total loss for each training phase.

    ``rows`` are ``(phase, epoch, batch, loss_p, loss_gamma, loss_total)``.
    """
    fig, ax = _axes()
    phases = []
    for r in rows:
        if r[0] not in phases:
            phases.append(r[0])
    offset = 0
    for phase in phases:
        sel = [r for r in rows if r[0] == phase]
        epochs = sorted({r[1] for r in sel})
        means = [np.mean([r[5] for r in sel if r[1] == e]) for e in epochs]
        ax.plot(np.arange(len(epochs)) + offset + 1, means, "o-", label=phase)
        offset += len(epochs)
    ax.set_xlabel("epoch (all phases in order)")
    ax.set_ylabel("mean loss")
    if phases:
        ax.legend(frameon=False, fontsize=8)
    _save(fig, path)
