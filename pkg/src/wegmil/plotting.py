"""Report figures.  Everything renders off-screen to PNG."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date chunks so reruns are byte-identical
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def _grid_layout(M: int, coords: Mapping[int, tuple[float, float]] | None):
    if coords is not None:
        return {m: coords[m] for m in range(M)}
    side = math.ceil(math.sqrt(M))
    return {m: (m % side, m // side) for m in range(M)}


def _grid_image(values: Sequence[float], layout) -> np.ndarray:
    xs = sorted({p[0] for p in layout.values()})
    ys = sorted({p[1] for p in layout.values()})
    xi, yi = {x: i for i, x in enumerate(xs)}, {y: i for i, y in enumerate(ys)}
    img = np.full((len(ys), len(xs)), np.nan)
    for m, (x, y) in layout.items():
        img[yi[y], xi[x]] = values[m]
    return img, xi, yi


def importance_figure(report, path, class_names: Sequence[str] | None = None,
                      patch_coords: Mapping[int, tuple[float, float]] | None = None) -> Path:
    """One panel per class (fused score, top regions boxed) plus the graph gate weight."""
    K, M = report.K, len(report.rows)
    names = list(class_names) if class_names else [f"class {k}" for k in range(K)]
    layout = _grid_layout(M, patch_coords)
    fused = report.fused_matrix()
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, K + 1, figsize=(2.2 * (K + 1), 2.4))
        vmax = float(fused.max()) if fused.size else 1.0
        for k in range(K):
            ax = axes[k]
            img, xi, yi = _grid_image(fused[:, k], layout)
            im = ax.imshow(img, cmap="magma", vmin=0.0, vmax=max(vmax, 1e-12))
            for m in report.top_regions[k]:
                x, y = layout[m]
                ax.add_patch(Rectangle((xi[x] - 0.5, yi[y] - 0.5), 1, 1, fill=False, ec="cyan", lw=1.2))
            mark = " (pred)" if k == report.predicted_class else ""
            ax.set_title(f"{names[k]}{mark}\np={report.y_hat[k]:.2f}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(im, ax=axes[:K].tolist(), shrink=0.7, label="fused contribution")
        ax = axes[K]
        img, _, _ = _grid_image([r.gate_w_graph for r in report.rows], layout)
        im = ax.imshow(img, cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_title("gate weight\n(graph expert)")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, shrink=0.7)
        fig.suptitle(f"{report.bag_id}", y=1.02)
        return _save(fig, path)


def cell_distribution_figure(summary: dict, path, cell_type_names: Sequence[str]) -> Path:
    top = summary["top_aggregate"]["frequencies"]
    whole = summary["bag_aggregate"]["frequencies"]
    idx = np.arange(len(cell_type_names))
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6.0, 2.4))
        ax1.bar(idx - 0.2, top, width=0.4, label="top regions")
        ax1.bar(idx + 0.2, whole, width=0.4, label="whole bag")
        ax1.set_xticks(idx, cell_type_names)
        ax1.set_ylabel("cell-type frequency")
        ax1.legend(frameon=False)
        nn_top = [v if v is not None else np.nan for v in summary["top_aggregate"]["mean_nn_dist"]]
        nn_all = [v if v is not None else np.nan for v in summary["bag_aggregate"]["mean_nn_dist"]]
        ax2.bar(idx - 0.2, nn_top, width=0.4)
        ax2.bar(idx + 0.2, nn_all, width=0.4)
        ax2.set_xticks(idx, cell_type_names)
        ax2.set_ylabel("same-type NN distance (px)")
        fig.tight_layout()
        return _save(fig, path)


def training_curves_figure(phases: Mapping[str, Sequence], path) -> Path:
    """Loss and accuracy per epoch for every phase that logged epoch rows."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6.5, 2.4))
        for name, rows in phases.items():
            for split, ls in (("train", "-"), ("val", "--")):
                sel = [r for r in rows if r.split == split]
                if not sel:
                    continue
                ep = [r.epoch for r in sel]
                ax1.plot(ep, [r.loss for r in sel], ls, marker=".", label=f"{name} {split}")
                ax2.plot(ep, [r.accuracy for r in sel], ls, marker=".")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("cross-entropy")
        ax1.set_yscale("log")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0, 1.05)
        ax1.legend(frameon=False, fontsize=6)
        fig.tight_layout()
        return _save(fig, path)


def gate_weights_figure(weights: Mapping[str, np.ndarray], path) -> Path:
    """Histogram of per-instance graph-expert weight for each gate variant."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.4))
        bins = np.linspace(0, 1, 21)
        for name, w in weights.items():
            ax.hist(w, bins=bins, histtype="step", lw=1.2, label=f"{name} (mean {np.mean(w):.2f})")
        ax.set_xlabel("gate weight on graph expert")
        ax.set_ylabel("instances")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def confusion_figure(confusions: Mapping[str, Sequence[Sequence[int]]], path,
                     class_names: Sequence[str]) -> Path:
    n = len(confusions)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.3), squeeze=False)
        for ax, (name, cm) in zip(axes[0], confusions.items()):
            cm = np.asarray(cm)
            ax.imshow(cm, cmap="Blues")
            for (i, j), v in np.ndenumerate(cm):
                ax.text(j, i, str(v), ha="center", va="center", fontsize=7)
            ax.set_xticks(range(len(class_names)), class_names, rotation=45)
            ax.set_yticks(range(len(class_names)), class_names)
            ax.set_title(name)
        axes[0][0].set_ylabel("true")
        fig.tight_layout()
        return _save(fig, path)
