"""Figures written next to the CSV/JSON reports.

All figures are rendered off-screen and written atomically; PNG metadata is
stripped so identical inputs give identical files.
"""

from __future__ import annotations

import io
from collections import defaultdict
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import AccuracyMatrix  # noqa: E402
from .store import atomic_write  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def plot_accuracy_matrix(acc: AccuracyMatrix, path, title: str | None = None):
    """Lower-triangular heatmap of ``A[i, j]`` with the values annotated."""
    n = acc.n
    grid = np.full((n, n), np.nan)
    for (i, j), v in acc.entries.items():
        grid[i - 1, j - 1] = v
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.7 * n, 0.8 + 0.6 * n))
        im = ax.imshow(grid, vmin=0, vmax=100, cmap="viridis")
        for (i, j), v in acc.entries.items():
            ax.text(j - 1, i - 1, f"{v:.1f}", ha="center", va="center",
                    color="white" if v < 60 else "black", fontsize=7)
        ax.set_xticks(range(n), [str(j) for j in range(1, n + 1)])
        ax.set_yticks(range(n), [str(i) for i in range(1, n + 1)])
        ax.set_xlabel("evaluated task")
        ax.set_ylabel("after learning task")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="accuracy (%)")
        _save(fig, path)


def plot_sweep(rows: Sequence[Mapping], path):
    """FAA / FFM against the scaling factor and against the energy threshold.

    ``rows`` are sweep records with ``lambda``, ``gamma`` (``"full"`` for the
    uncompressed covariance), ``FAA`` and ``FFM``; values are averaged over seeds.
    """
    by_lambda = defaultdict(list)
    by_gamma = defaultdict(list)
    for r in rows:
        by_lambda[(r["gamma"], float(r["lambda"]))].append(r)
        by_gamma[(float(r["lambda"]), r["gamma"])].append(r)

    def mean(recs, key):
        vals = [float(x[key]) for x in recs if x[key] not in (None, "")]
        return float(np.mean(vals)) if vals else np.nan

    with plt.rc_context(STYLE):
        fig, (ax_l, ax_g) = plt.subplots(1, 2, figsize=(8, 3))
        gammas = sorted({g for g, _ in by_lambda}, key=lambda g: (g != "full", str(g)))
        for g in gammas:
            lams = sorted(l for gg, l in by_lambda if gg == g)
            label = "full" if g == "full" else f"gamma={g}"
            ax_l.plot(lams, [mean(by_lambda[(g, l)], "FAA") for l in lams], marker="o", label=f"FAA {label}")
            ax_l.plot(lams, [mean(by_lambda[(g, l)], "FFM") for l in lams], marker="x", ls="--", label=f"FFM {label}")
        ax_l.set_xlabel("scaling factor lambda")
        ax_l.set_ylabel("%")
        ax_l.legend(frameon=False, ncol=1)

        lams = sorted({l for l, _ in by_gamma})
        for l in lams:
            gs = sorted(g for ll, g in by_gamma if ll == l and g != "full")
            if not gs:
                continue
            ax_g.plot(gs, [mean(by_gamma[(l, g)], "FAA") for g in gs], marker="o", label=f"FAA lambda={l:g}")
            ax_g.plot(gs, [mean(by_gamma[(l, g)], "FFM") for g in gs], marker="x", ls="--", label=f"FFM lambda={l:g}")
        ax_g.set_xlabel("energy threshold gamma")
        ax_g.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)
