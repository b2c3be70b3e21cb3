"""Class-wise patch importance and cell-distribution explanations."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from wegmil.datamodel import CellRecord, dumps_json
from wegmil.errors import ConfigError, IoError
from wegmil.experts import Expert, PreparedBag, prepare
from wegmil.fusion import GateNetwork, moe_predict
from wegmil.graphbuild import PatchCellStats, aggregate_stats, patch_stats
from wegmil.training import predict_class


@dataclass(frozen=True)
class PatchRow:
    patch_id: int
    gate_w_graph: float
    gate_w_image: float
    contrib_graph: tuple[float, ...]
    contrib_image: tuple[float, ...]
    fused: tuple[float, ...]


@dataclass
class ExplanationReport:
    bag_id: str
    predicted_class: int
    y_hat: tuple[float, ...]
    scores: tuple[float, ...]
    rows: list[PatchRow]
    top_regions: dict[int, list[int]]
    q: int
    true_class: int | None = None
    cell_summary: dict | None = field(default=None)

    @property
    def K(self) -> int:
        return len(self.y_hat)

    def fused_matrix(self) -> np.ndarray:
        return np.array([r.fused for r in self.rows])

    def to_json(self) -> dict:
        return {
            "bag_id": self.bag_id,
            "true_class": self.true_class,
            "predicted_class": self.predicted_class,
            "y_hat": list(self.y_hat),
            "scores": list(self.scores),
            "q": self.q,
            "top_regions": {str(k): v for k, v in self.top_regions.items()},
            "patches": [
                {
                    "patch_id": r.patch_id,
                    "gate_w_graph": r.gate_w_graph,
                    "gate_w_image": r.gate_w_image,
                    "contrib_graph": list(r.contrib_graph),
                    "contrib_image": list(r.contrib_image),
                    "fused": list(r.fused),
                }
                for r in self.rows
            ],
            "cell_summary": self.cell_summary,
        }


def default_q(M: int) -> int:
    return max(1, math.ceil(0.1 * M))


def top_patches(rows: Sequence[PatchRow], k: int, q: int) -> list[int]:
    """Patch ids with the ``q`` largest fused scores for class ``k``; ties to the lower id."""
    ranked = sorted(rows, key=lambda r: (-r.fused[k], r.patch_id))
    return [r.patch_id for r in ranked[:q]]


def explain_bag(bag, graph_expert: Expert, image_expert: Expert, gate: GateNetwork,
                q: int | None = None, cells: Mapping[int, Sequence[CellRecord]] | None = None
                ) -> ExplanationReport:
    """Decompose one bag's mixture prediction into per-patch, per-class scores.

    With ``cells`` the report also carries a cell-distribution summary of the
    predicted class's top regions.
    """
    bag = prepare(bag)
    q = default_q(bag.M) if q is None else q
    if not 1 <= q <= bag.M:
        raise ConfigError(f"top-q must be in [1, {bag.M}], got {q}")
    pred = moe_predict(bag, graph_expert, image_expert, gate)
    w = pred.weights.data
    cg, cx, fused = pred.graph.contrib.data, pred.image.contrib.data, pred.fused.data
    rows = [
        PatchRow(m, float(w[m, 0]), float(w[m, 1]), tuple(map(float, cg[m])),
                 tuple(map(float, cx[m])), tuple(map(float, fused[m])))
        for m in range(bag.M)
    ]
    y_hat = pred.y_hat.data[0]
    report = ExplanationReport(
        bag_id=bag.bag_id,
        predicted_class=predict_class(y_hat),
        y_hat=tuple(map(float, y_hat)),
        scores=tuple(map(float, pred.scores.data[0])),
        rows=rows,
        top_regions={k: top_patches(rows, k, q) for k in range(len(y_hat))},
        q=q,
        true_class=int(np.argmax(bag.y)),
    )
    if cells is not None:
        K_c = graph_expert.config["K_c"]
        report.cell_summary = cell_distribution_summary(report, bag, cells, K_c)
    return report


def _stats_for(bag: PreparedBag, cells, patch_ids, K_c) -> list[tuple[int, PatchCellStats]]:
    return [(m, patch_stats(bag.bag.graphs[m], cells.get(m, []), K_c)) for m in patch_ids]


def cell_distribution_summary(report: ExplanationReport, bag, cells: Mapping[int, Sequence[CellRecord]],
                              K_c: int, class_index: int | None = None) -> dict:
    """Cell-type frequency and spacing in the top regions versus the whole bag."""
    bag = prepare(bag)
    k = report.predicted_class if class_index is None else class_index
    top = _stats_for(bag, cells, report.top_regions[k], K_c)
    everything = _stats_for(bag, cells, range(bag.M), K_c)
    top_agg = aggregate_stats([s for _, s in top], K_c)
    bag_agg = aggregate_stats([s for _, s in everything], K_c)
    return {
        "class_index": k,
        "top_patches": [{"patch_id": m, **s.to_json()} for m, s in top],
        "top_aggregate": top_agg.to_json(),
        "bag_aggregate": bag_agg.to_json(),
        "frequency_delta": [a - b for a, b in zip(top_agg.frequencies, bag_agg.frequencies)],
    }


def heatmap_columns(K: int, with_coords: bool) -> list[str]:
    cols = ["patch_id"] + (["x", "y"] if with_coords else [])
    cols += [f"fused_{k}" for k in range(K)]
    cols += [f"graph_{k}" for k in range(K)]
    cols += [f"image_{k}" for k in range(K)]
    return cols + ["gate_w_graph", "gate_w_image"]


def heatmap_csv(report: ExplanationReport, patch_coords: Mapping[int, tuple[float, float]] | None = None) -> str:
    buf = io.StringIO()
    buf.write(",".join(heatmap_columns(report.K, patch_coords is not None)) + "\n")
    for r in report.rows:
        vals = [str(r.patch_id)]
        if patch_coords is not None:
            x, y = patch_coords[r.patch_id]
            vals += [repr(float(x)), repr(float(y))]
        vals += [repr(v) for v in r.fused + r.contrib_graph + r.contrib_image]
        vals += [repr(r.gate_w_graph), repr(r.gate_w_image)]
        buf.write(",".join(vals) + "\n")
    return buf.getvalue()


def export_heatmap_csv(report: ExplanationReport, path,
                       patch_coords: Mapping[int, tuple[float, float]] | None = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(heatmap_csv(report, patch_coords).encode("utf-8"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def write_report_json(report: ExplanationReport, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(dumps_json(report.to_json()))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def localization_precision(report: ExplanationReport, signal_patches: Sequence[int],
                           class_index: int | None = None) -> float:
    """Fraction of the top-|signal| patches for a class that are planted signal patches."""
    k = report.true_class if class_index is None else class_index
    q = len(signal_patches)
    top = top_patches(report.rows, k, q)
    return len(set(top) & set(signal_patches)) / q
