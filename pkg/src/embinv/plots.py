"""Matplotlib figures written straight to files (Agg backend, no display)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def histogram_plot(edges, counts, path, xlabel="", title=""):
    edges = np.asarray(edges)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def frequency_plot(report, path):
    labels = [str(b) for b in report.buckets]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(x - 0.2, report.incorrect, width=0.4, label="incorrect", color="tab:blue")
    ax.bar(x + 0.2, report.correct, width=0.4, label="correct", color="tab:orange")
    ax.set_xticks(x, [("unseen" if b == "0" else f"1e{int(b) - 1}+") for b in labels])
    ax.set_xlabel("training-set word frequency")
    ax.set_ylabel("ground-truth words")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def scatter_plot(xs, ys, path, xlabel, ylabel):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.scatter(xs, ys, s=8, alpha=0.6)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def tradeoff_plot(points, path):
    lams = [p.lam for p in points]
    xs = np.arange(len(lams))
    fig, ax1 = plt.subplots(figsize=(5, 3.4))
    ax1.plot(xs, [p.ndcg_at_10 for p in points], "o-", color="tab:blue", label="NDCG@10")
    ax1.set_ylabel("retrieval NDCG@10", color="tab:blue")
    ax1.set_xticks(xs, [f"{lam:g}" for lam in lams])
    ax1.set_xlabel("noise level lambda")
    ax2 = ax1.twinx()
    ax2.plot(xs, [p.reconstruction.bleu for p in points], "s--", color="tab:red", label="BLEU")
    ax2.set_ylabel("reconstruction BLEU", color="tab:red")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
