"""Figure helpers (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LABEL_COLORS = {"source": "blue", "target": "red", "translated": "cyan"}


def _style():
    plt.rcParams.update({
        "font.size": 10,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 150,
    })


def scatter_projection(points, labels, path, title=None):
    """Scatter 2-D points coloured by label; source/target/translated use fixed colours."""
    _style()
    fig, ax = plt.subplots(figsize=(5, 5))
    order = [l for l in LABEL_COLORS if l in set(labels)] + sorted(set(labels) - set(LABEL_COLORS))
    for lab in order:
        idx = [i for i, l in enumerate(labels) if l == lab]
        ax.scatter(points[idx, 0], points[idx, 1], s=12, c=LABEL_COLORS.get(lab, "gray"), label=lab, alpha=0.8)
    ax.legend(frameon=False, loc="best")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_trace(metrics_csv, path, terms=("cyc", "idty", "rec_l1")):
    """Line plot of selected terms from a metrics CSV (stage,step,term,value,wall_time)."""
    import csv

    series = {}
    with open(metrics_csv) as fh:
        for row in csv.DictReader(fh):
            if row["term"] in terms:
                key = f"{row['stage']}:{row['term']}"
                series.setdefault(key, []).append((int(row["step"]), float(row["value"])))
    _style()
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, pts in sorted(series.items()):
        xs, ys = zip(*pts)
        ax.plot(xs, ys, label=key, lw=1)
    ax.set_xlabel("generator step")
    ax.set_ylabel("loss")
    if series:
        ax.set_yscale("log")
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
