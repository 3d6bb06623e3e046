"""Figures written next to the CSV/JSON reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _figure(width=4.5, height=3.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(rows, path):
    """rows: sequence of (epoch, wp, score, total)."""
    epochs = [r[0] for r in rows]
    fig, ax = _figure()
    ax.plot(epochs, [r[3] for r in rows], "k-", lw=1.5, label="total")
    ax.plot(epochs, [r[1] for r in rows], "C0--", lw=1.0, label="waypoint")
    ax.plot(epochs, [r[2] for r in rows], "C1:", lw=1.0, label="score")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)


def plot_ablation(modes, totals, censuses, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.0, 3.0))
    with plt.rc_context(STYLE):
        ax1.bar(modes, totals, color="0.4")
        ax1.set_ylabel("final total loss")
        ax2.bar(modes, censuses, color="C0")
        ax2.set_ylabel("predictor ops")
        for ax in (ax1, ax2):
            ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
    return _save(fig, path)


def plot_flops(report, path):
    fig, ax = _figure(5.0, 3.0)
    labels = ["full mixing", "windowed mixing"]
    closed = [report["closed_form"]["existing"], report["closed_form"]["proposed"]]
    counted = [report["empirical"]["existing"], report["empirical"]["proposed"]]
    x = range(len(labels))
    ax.bar([i - 0.2 for i in x], closed, width=0.4, label="dominant term", color="0.6")
    ax.bar([i + 0.2 for i in x], counted, width=0.4, label="counted", color="C0")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_yscale("log")
    ax.set_ylabel("operations")
    ax.legend()
    return _save(fig, path)
