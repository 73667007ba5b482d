"""Figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {"figure.dpi": 110, "axes.spines.top": False, "axes.spines.right": False,
          "font.size": 9}


def plot_training_curves(metrics, path):
    """Loss and held-out top-1 against epoch."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        epochs = [m.epoch for m in metrics]
        ax.plot(epochs, [m.loss for m in metrics], color="tab:blue", lw=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss", color="tab:blue")
        ax2 = ax.twinx()
        ax2.plot(epochs, [m.eval_top1 for m in metrics], color="tab:orange", lw=1.2)
        ax2.set_ylabel("validation top-1", color="tab:orange")
        ax2.set_ylim(0, 1.02)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_category_ap(report, path):
    cats = sorted(report.per_category_ap)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.45 * len(cats) + 1.5), 3.2))
        ax.bar(range(len(cats)), [report.per_category_ap[c] for c in cats], color="tab:green")
        ax.axhline(report.mAP, color="k", lw=0.8, ls="--", label=f"mAP {report.mAP:.3f}")
        ax.set_xticks(range(len(cats)))
        ax.set_xticklabels(cats, rotation=60, ha="right")
        ax.set_ylim(0, 1.02)
        ax.set_ylabel("AP @ IoU 0.5")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_benchmark(result, path):
    summary = result.summary()
    names = [s["row"] for s in summary]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names) + 1.5), 3.4))
        xs = range(len(names))
        ax.bar([x - 0.2 for x in xs], [s["top1"] for s in summary], width=0.4, label="top-1")
        ax.bar([x + 0.2 for x in xs], [s["pipeline_map"] for s in summary], width=0.4,
               label="pipeline mAP")
        for row_i, name in enumerate(names):
            vals = [r.top1 for r in result.runs if r.row == name]
            ax.scatter([row_i - 0.2] * len(vals), vals, s=6, color="k", zorder=3)
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
