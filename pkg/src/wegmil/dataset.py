"""Load a manifest into aligned bags and split them."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from wegmil.datamodel import (
    Bag,
    CellRecord,
    DatasetManifest,
    group_cells_by_patch,
    make_bag,
    read_cells,
    read_embeddings,
    read_graphs,
)
from wegmil.errors import DataError, ValidationError, WegmilError
from wegmil.experts import PreparedBag, prepare
from wegmil.graphbuild import build_patch_graphs

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class Dataset:
    manifest: DatasetManifest
    bags: list[PreparedBag]
    cells: dict[str, dict[int, list[CellRecord]]]
    radius: float

    def __len__(self):
        return len(self.bags)

    def bag(self, bag_id: str) -> PreparedBag:
        for b in self.bags:
            if b.bag_id == bag_id:
                return b
        raise ValidationError(f"unknown bag_id {bag_id!r}")

    def subset(self, bag_ids: Sequence[str]) -> list[PreparedBag]:
        wanted = set(bag_ids)
        return [b for b in self.bags if b.bag_id in wanted]


def _load_entry(manifest: DatasetManifest, entry, radius: float):
    try:
        emb = read_embeddings(manifest.resolve(entry.embeddings_path))
        cells = read_cells(manifest.resolve(entry.cells_path), manifest.K_c)
        if entry.graphs_path is not None:
            file_radius, graphs = read_graphs(manifest.resolve(entry.graphs_path), manifest.K_c)
            radius = file_radius
        else:
            graphs = build_patch_graphs(cells, emb.M, radius)
        bag = make_bag(entry.bag_id, entry.label_index, manifest.K, emb, graphs, radius)
        return prepare(bag), group_cells_by_patch(cells)
    except WegmilError as exc:
        raise type(exc)(f"bag {entry.bag_id}: {exc}") from exc


def load_dataset(manifest: DatasetManifest, radius: float = 60.0, workers: int = 1) -> Dataset:
    """Read every bag; graphs come from ``graphs_path`` when present, else are built."""
    if not manifest.entries:
        raise DataError("manifest lists no bags")
    load = lambda e: _load_entry(manifest, e, radius)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            loaded = list(pool.map(load, manifest.entries))
    else:
        loaded = [load(e) for e in manifest.entries]
    bags = [b for b, _ in loaded]
    cells = {b.bag_id: c for b, c in loaded}
    return Dataset(manifest, bags, cells, radius)


def stratified_split(bag_ids: Sequence[str], labels: Sequence[int], fractions: Sequence[float],
                     seed: int) -> dict[str, list[str]]:
    """Per-class shuffled split; every class with >= 3 bags lands in all three splits."""
    rng = np.random.default_rng(seed)
    out = {name: [] for name in SPLIT_NAMES}
    labels = np.asarray(labels)
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_val = int(round(fractions[1] * n))
        n_test = int(round(fractions[2] * n))
        if n >= 3:
            n_val, n_test = max(n_val, 1), max(n_test, 1)
        n_train = max(n - n_val - n_test, 0)
        out["train"].extend(bag_ids[i] for i in idx[:n_train])
        out["val"].extend(bag_ids[i] for i in idx[n_train:n_train + n_val])
        out["test"].extend(bag_ids[i] for i in idx[n_train + n_val:])
    order = {b: i for i, b in enumerate(bag_ids)}
    return {name: sorted(ids, key=order.__getitem__) for name, ids in out.items()}


def bag_labels(bags: Sequence[Bag | PreparedBag]) -> list[int]:
    return [int(np.argmax(b.y)) for b in bags]
