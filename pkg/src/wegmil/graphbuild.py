"""Radius cell graphs and per-patch cell statistics."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from wegmil.datamodel import (
    CellRecord,
    DatasetManifest,
    LabeledCellGraph,
    group_cells_by_patch,
    read_cells,
    read_embeddings,
    write_graphs,
)
from wegmil.errors import ValidationError, WegmilError

DEFAULT_RADIUS = 60.0

# half of the 3x3 neighbourhood; the mirrored offsets are covered from the other bucket
_HALF_NEIGHBOURHOOD = ((0, 0), (1, -1), (1, 0), (1, 1), (0, 1))


class SpatialGrid:
    """Uniform bucket grid with side ``cell_size`` over 2D points."""

    def __init__(self, points: np.ndarray, cell_size: float):
        if not cell_size > 0:
            raise ValidationError(f"cell_size must be positive, got {cell_size}")
        self.cell_size = float(cell_size)
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        keys = np.floor(self.points / self.cell_size).astype(np.int64)
        self.buckets: dict[tuple[int, int], np.ndarray] = {}
        if len(keys):
            order = np.lexsort((keys[:, 1], keys[:, 0]))
            sk = keys[order]
            breaks = np.flatnonzero(np.any(np.diff(sk, axis=0) != 0, axis=1)) + 1
            for chunk in np.split(order, breaks):
                k = keys[chunk[0]]
                self.buckets[(int(k[0]), int(k[1]))] = chunk

    def pairs_within(self, radius: float) -> np.ndarray:
        """All index pairs ``(i, j)``, ``i < j``, with squared distance <= radius**2.

        Exact as long as ``radius <= cell_size``.  Rows come back sorted.
        """
        if radius > self.cell_size:
            raise ValidationError("search radius exceeds grid cell size")
        r2 = float(radius) * float(radius)
        found = []
        for (bx, by), members in self.buckets.items():
            pa = self.points[members]
            for dx, dy in _HALF_NEIGHBOURHOOD:
                other = self.buckets.get((bx + dx, by + dy))
                if other is None:
                    continue
                pb = self.points[other]
                ddx = pa[:, 0][:, None] - pb[:, 0][None, :]
                ddy = pa[:, 1][:, None] - pb[:, 1][None, :]
                close = ddx * ddx + ddy * ddy <= r2
                if dx == 0 and dy == 0:
                    close = np.triu(close, k=1)
                ia, ib = np.nonzero(close)
                if len(ia):
                    a, b = members[ia], other[ib]
                    found.append(np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1))
        if not found:
            return np.empty((0, 2), dtype=np.int64)
        pairs = np.concatenate(found)
        return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def brute_force_pairs(points: np.ndarray, radius: float) -> np.ndarray:
    """O(n^2) reference for :meth:`SpatialGrid.pairs_within`."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    r2 = float(radius) * float(radius)
    dx = points[:, 0][:, None] - points[:, 0][None, :]
    dy = points[:, 1][:, None] - points[:, 1][None, :]
    i, j = np.nonzero(np.triu(dx * dx + dy * dy <= r2, k=1))
    return np.stack([i, j], axis=1).astype(np.int64)


def build_radius_graph(cells: Sequence[CellRecord], radius: float = DEFAULT_RADIUS,
                       patch_id: int | None = None) -> LabeledCellGraph:
    """Connect every pair of cells at Euclidean distance <= radius (inclusive)."""
    if not radius > 0 or not math.isfinite(radius):
        raise ValidationError(f"radius must be positive and finite, got {radius}")
    cells = sorted(cells, key=lambda c: c.cell_id)
    pids = {c.patch_id for c in cells}
    if len(pids) > 1:
        raise ValidationError(f"cells from several patches: {sorted(pids)}")
    if not cells:
        return LabeledCellGraph.empty(0 if patch_id is None else patch_id, radius)
    pid = cells[0].patch_id
    if patch_id is not None and patch_id != pid:
        raise ValidationError(f"expected patch {patch_id}, cells belong to patch {pid}")
    pos = np.array([[c.x, c.y] for c in cells], dtype=np.float64)
    if not np.all(np.isfinite(pos)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(pos), axis=1))[0])
        raise ValidationError(f"patch {pid}: non-finite position for cell {cells[bad].cell_id}")
    ids = [c.cell_id for c in cells]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"patch {pid}: duplicate cell ids")
    pairs = SpatialGrid(pos, radius).pairs_within(radius)
    # positions are in ascending cell_id order, so i < j carries over to ids
    edges = tuple((ids[i], ids[j]) for i, j in pairs.tolist())
    return LabeledCellGraph(
        patch_id=pid,
        nodes=tuple(ids),
        edges=edges,
        labels=tuple(c.label for c in cells),
        radius=float(radius),
    )


def build_patch_graphs(cells: Sequence[CellRecord], M: int, radius: float = DEFAULT_RADIUS
                       ) -> list[LabeledCellGraph]:
    """Graphs for patches ``0 .. M-1`` of one bag; patches without cells are empty."""
    groups = group_cells_by_patch(cells)
    extra = [pid for pid in groups if not 0 <= pid < M]
    if extra:
        raise ValidationError(f"cells reference patch ids {extra[:5]} outside [0, {M})")
    return [build_radius_graph(groups.get(m, []), radius, patch_id=m) for m in range(M)]


def _bag_graphs(manifest: DatasetManifest, entry, radius: float):
    try:
        M = read_embeddings(manifest.resolve(entry.embeddings_path)).M
        cells = read_cells(manifest.resolve(entry.cells_path), manifest.K_c)
        return build_patch_graphs(cells, M, radius)
    except WegmilError as exc:
        raise type(exc)(f"bag {entry.bag_id}: {exc}") from exc


def build_all(manifest: DatasetManifest, radius: float, out_dir, workers: int = 1) -> dict[str, Path]:
    """Write ``<out_dir>/<bag_id>.graph.json`` for every bag in the manifest.

    Output does not depend on ``workers``; files are written in manifest order.
    """
    out_dir = Path(out_dir)
    entries = list(manifest.entries)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda e: _bag_graphs(manifest, e, radius), entries))
    else:
        results = [_bag_graphs(manifest, e, radius) for e in entries]
    paths = {}
    for entry, graphs in zip(entries, results):
        path = out_dir / f"{entry.bag_id}.graph.json"
        write_graphs(radius, graphs, path)
        paths[entry.bag_id] = path
    return paths


@dataclass(frozen=True)
class PatchCellStats:
    counts: tuple[int, ...]
    frequencies: tuple[float, ...]
    mean_degree: float
    # None for types with fewer than two cells
    mean_nn_dist: tuple[float | None, ...]
    num_edges: int = 0
    nn_dist_sums: tuple[float, ...] = ()
    nn_dist_counts: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {
            "counts": list(self.counts),
            "frequencies": list(self.frequencies),
            "mean_degree": self.mean_degree,
            "mean_nn_dist": list(self.mean_nn_dist),
        }


def _nn_distances(pos: np.ndarray) -> np.ndarray:
    dx = pos[:, 0][:, None] - pos[:, 0][None, :]
    dy = pos[:, 1][:, None] - pos[:, 1][None, :]
    d2 = dx * dx + dy * dy
    np.fill_diagonal(d2, np.inf)
    return np.sqrt(d2.min(axis=1))


def patch_stats(graph: LabeledCellGraph, cells: Sequence[CellRecord], K_c: int) -> PatchCellStats:
    """Type counts/frequencies, mean degree and same-type nearest-neighbour distance."""
    by_id = {c.cell_id: c for c in cells}
    counts = [0] * K_c
    for lab in graph.labels:
        counts[lab] += 1
    sums = [0.0] * K_c
    ns = [0] * K_c
    for t in range(K_c):
        ids = [cid for cid, lab in zip(graph.nodes, graph.labels) if lab == t]
        if len(ids) >= 2:
            pos = np.array([[by_id[i].x, by_id[i].y] for i in ids])
            sums[t] = float(_nn_distances(pos).sum())
            ns[t] = len(ids)
    return _finish_stats(counts, len(graph.edges), sums, ns)


def _finish_stats(counts, num_edges, sums, ns) -> PatchCellStats:
    total = sum(counts)
    freqs = tuple(c / total for c in counts) if total else tuple(0.0 for _ in counts)
    return PatchCellStats(
        counts=tuple(counts),
        frequencies=freqs,
        mean_degree=2.0 * num_edges / total if total else 0.0,
        mean_nn_dist=tuple(s / n if n else None for s, n in zip(sums, ns)),
        num_edges=num_edges,
        nn_dist_sums=tuple(sums),
        nn_dist_counts=tuple(ns),
    )


def aggregate_stats(stats: Sequence[PatchCellStats], K_c: int) -> PatchCellStats:
    """Pool patch statistics as if their cells formed one population."""
    counts = [sum(s.counts[t] for s in stats) for t in range(K_c)]
    sums = [sum(s.nn_dist_sums[t] for s in stats) for t in range(K_c)]
    ns = [sum(s.nn_dist_counts[t] for s in stats) for t in range(K_c)]
    return _finish_stats(counts, sum(s.num_edges for s in stats), sums, ns)
