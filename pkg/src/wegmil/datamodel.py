"""Domain types and on-disk formats.

Formats
-------
* PEMB embeddings: ``b"PEMB"``, u32 LE version (1), u32 LE M, u32 LE d_in,
  then ``M * d_in`` float32 LE values, row-major, nothing after.
* Cells CSV: header ``patch_id,cell_id,x,y,label``.
* Graph JSON: ``{"radius": r, "patches": [{"patch_id", "nodes", "labels", "edges"}]}``
  where nodes are cell ids in ascending order and each edge ``[i, j]`` holds
  two cell ids with ``i < j``.
* Manifest JSON: ``K``, ``K_c``, ``class_names``, ``cell_type_names`` and
  ``entries`` (``bag_id``, ``label_index``, ``embeddings_path``, ``cells_path``
  and optionally ``graphs_path``), paths relative to the manifest file.

Instance ``m`` of a bag is patch ``m``: embedding row index and patch id agree,
and a bag with ``M`` embedding rows has patches ``0 .. M-1``.  Patches without
any cell rows are empty graphs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from wegmil.errors import IoError, ParseError, ValidationError

PEMB_MAGIC = b"PEMB"
PEMB_VERSION = 1
_PEMB_HEADER = struct.Struct("<4sIII")
CELLS_HEADER = ("patch_id", "cell_id", "x", "y", "label")


@dataclass(frozen=True, slots=True)
class CellRecord:
    patch_id: int
    cell_id: int
    x: float
    y: float
    label: int

    @property
    def pos(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class LabeledCellGraph:
    """Radius graph over the cells of one patch.

    ``edges`` hold cell ids (not positions in ``nodes``), each pair ascending.
    """

    patch_id: int
    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    labels: tuple[int, ...]
    radius: float

    def __post_init__(self):
        if len(self.nodes) != len(self.labels):
            raise ValidationError(
                f"patch {self.patch_id}: {len(self.nodes)} nodes but {len(self.labels)} labels"
            )
        if list(self.nodes) != sorted(set(self.nodes)):
            raise ValidationError(f"patch {self.patch_id}: nodes must be unique and ascending")
        node_set = set(self.nodes)
        seen = set()
        for i, j in self.edges:
            if i >= j:
                raise ValidationError(f"patch {self.patch_id}: edge ({i}, {j}) not ordered i<j")
            if i not in node_set or j not in node_set:
                raise ValidationError(f"patch {self.patch_id}: edge ({i}, {j}) references unknown node")
            if (i, j) in seen:
                raise ValidationError(f"patch {self.patch_id}: duplicate edge ({i}, {j})")
            seen.add((i, j))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @classmethod
    def empty(cls, patch_id: int, radius: float) -> "LabeledCellGraph":
        return cls(patch_id, (), (), (), float(radius))

    def edge_positions(self) -> np.ndarray:
        """Edges as an ``(E, 2)`` array of positions into ``nodes``."""
        index = {cid: k for k, cid in enumerate(self.nodes)}
        out = np.empty((len(self.edges), 2), dtype=np.int64)
        for e, (i, j) in enumerate(self.edges):
            out[e, 0] = index[i]
            out[e, 1] = index[j]
        return out


@dataclass(frozen=True)
class PatchEmbeddingMatrix:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"embedding matrix must be M x d_in with M, d_in >= 1, got {values.shape}")
        bad = np.argwhere(~np.isfinite(values))
        if len(bad):
            r, c = bad[0]
            raise ValidationError(f"non-finite embedding value at row {r}, col {c}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def d_in(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PatchEmbeddingMatrix):
            return NotImplemented
        return self.values.shape == other.values.shape and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class Bag:
    bag_id: str
    embeddings: PatchEmbeddingMatrix
    graphs: tuple[LabeledCellGraph, ...]
    y: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=np.float64)
        if y.ndim != 1 or np.count_nonzero(y == 1.0) != 1 or np.count_nonzero(y) != 1:
            raise ValidationError(f"bag {self.bag_id}: label vector is not one-hot: {y.tolist()}")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        graphs = tuple(self.graphs)
        if len(graphs) != self.embeddings.M:
            raise ValidationError(
                f"bag {self.bag_id}: {len(graphs)} graphs for {self.embeddings.M} embedding rows"
            )
        for m, g in enumerate(graphs):
            if g.patch_id != m:
                raise ValidationError(f"bag {self.bag_id}: graph at row {m} has patch_id {g.patch_id}")
        object.__setattr__(self, "graphs", graphs)

    @property
    def M(self) -> int:
        return self.embeddings.M

    @property
    def K(self) -> int:
        return self.y.shape[0]

    @property
    def label(self) -> int:
        return int(np.argmax(self.y))

    @property
    def patch_ids(self) -> tuple[int, ...]:
        return tuple(range(self.M))


def one_hot(index: int, K: int) -> np.ndarray:
    y = np.zeros(K)
    y[index] = 1.0
    return y


@dataclass(frozen=True)
class ManifestEntry:
    bag_id: str
    label_index: int
    embeddings_path: str
    cells_path: str
    graphs_path: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    K: int
    K_c: int
    class_names: tuple[str, ...]
    cell_type_names: tuple[str, ...]
    entries: tuple[ManifestEntry, ...]
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()

    def entry(self, bag_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.bag_id == bag_id:
                return e
        raise ValidationError(f"unknown bag_id {bag_id!r}")

    def validate(self) -> None:
        if self.K < 2 or self.K_c < 2:
            raise ValidationError(f"need K >= 2 and K_c >= 2, got K={self.K}, K_c={self.K_c}")
        if len(self.class_names) != self.K:
            raise ValidationError(f"{len(self.class_names)} class names for K={self.K}")
        if len(self.cell_type_names) != self.K_c:
            raise ValidationError(f"{len(self.cell_type_names)} cell type names for K_c={self.K_c}")
        seen = set()
        for e in self.entries:
            if e.bag_id in seen:
                raise ValidationError(f"duplicate bag_id {e.bag_id!r}")
            seen.add(e.bag_id)
            if not 0 <= e.label_index < self.K:
                raise ValidationError(f"entry {e.bag_id!r}: label_index {e.label_index} outside [0, {self.K})")

    def to_json(self) -> dict:
        entries = []
        for e in self.entries:
            d = {
                "bag_id": e.bag_id,
                "label_index": e.label_index,
                "embeddings_path": e.embeddings_path,
                "cells_path": e.cells_path,
            }
            if e.graphs_path is not None:
                d["graphs_path"] = e.graphs_path
            entries.append(d)
        return {
            "K": self.K,
            "K_c": self.K_c,
            "class_names": list(self.class_names),
            "cell_type_names": list(self.cell_type_names),
            "entries": entries,
        }


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, data: bytes) -> None:
    try:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def dumps_json(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=False) + "\n").encode("utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: malformed manifest JSON: {exc}") from exc
    try:
        entries = tuple(
            ManifestEntry(
                bag_id=str(e["bag_id"]),
                label_index=_as_int(e["label_index"], "label_index"),
                embeddings_path=str(e["embeddings_path"]),
                cells_path=str(e["cells_path"]),
                graphs_path=None if e.get("graphs_path") is None else str(e["graphs_path"]),
            )
            for e in raw["entries"]
        )
        manifest = DatasetManifest(
            K=_as_int(raw["K"], "K"),
            K_c=_as_int(raw["K_c"], "K_c"),
            class_names=tuple(str(s) for s in raw["class_names"]),
            cell_type_names=tuple(str(s) for s in raw["cell_type_names"]),
            entries=entries,
            root=path.parent.resolve(),
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"{path}: manifest missing or mistyped field: {exc}") from exc
    manifest.validate()
    return manifest


def _as_int(v, name: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"field {name!r} must be an integer, got {v!r}")
    return v


def write_manifest(manifest: DatasetManifest, path) -> None:
    manifest.validate()
    _write_bytes(path, dumps_json(manifest.to_json()))


def read_embeddings(path) -> PatchEmbeddingMatrix:
    data = _read_bytes(path)
    if len(data) < _PEMB_HEADER.size:
        raise ParseError(f"{path}: truncated header: {len(data)} bytes, need {_PEMB_HEADER.size}")
    magic, version, M, d_in = _PEMB_HEADER.unpack_from(data, 0)
    if magic != PEMB_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r} at byte 0")
    if version != PEMB_VERSION:
        raise ParseError(f"{path}: unsupported version {version} at byte 4")
    expected = _PEMB_HEADER.size + 4 * M * d_in
    if len(data) < expected:
        raise ParseError(f"{path}: truncated payload at byte {len(data)}, expected {expected} bytes")
    if len(data) > expected:
        raise ParseError(f"{path}: {len(data) - expected} trailing bytes after byte {expected}")
    if M < 1 or d_in < 1:
        raise ValidationError(f"{path}: empty embedding matrix M={M}, d_in={d_in}")
    values = np.frombuffer(data, dtype="<f4", count=M * d_in, offset=_PEMB_HEADER.size)
    return PatchEmbeddingMatrix(values.reshape(M, d_in).astype(np.float64))


def encode_embeddings(matrix: PatchEmbeddingMatrix | np.ndarray) -> bytes:
    values = matrix.values if isinstance(matrix, PatchEmbeddingMatrix) else np.asarray(matrix)
    M, d_in = values.shape
    return _PEMB_HEADER.pack(PEMB_MAGIC, PEMB_VERSION, M, d_in) + values.astype("<f4").tobytes()


def write_embeddings(matrix: PatchEmbeddingMatrix | np.ndarray, path) -> None:
    _write_bytes(path, encode_embeddings(matrix))


def read_cells(path, K_c: int | None = None) -> list[CellRecord]:
    try:
        text = _read_bytes(path).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CELLS_HEADER:
        raise ParseError(f"{path}: expected header {','.join(CELLS_HEADER)}, got {header}")
    records = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5:
            raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
        try:
            patch_id, cell_id, label = int(row[0]), int(row[1]), int(row[4])
            x, y = float(row[2]), float(row[3])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValidationError(f"{path}:{lineno}: non-finite coordinate")
        if x < 0 or y < 0:
            raise ValidationError(f"{path}:{lineno}: negative coordinate ({x}, {y})")
        if patch_id < 0 or cell_id < 0:
            raise ValidationError(f"{path}:{lineno}: negative id")
        if label < 0 or (K_c is not None and label >= K_c):
            raise ValidationError(f"{path}:{lineno}: label {label} outside [0, {K_c})")
        key = (patch_id, cell_id)
        if key in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate (patch_id, cell_id) {key}")
        seen.add(key)
        records.append(CellRecord(patch_id, cell_id, x, y, label))
    return records


def write_cells(cells: Iterable[CellRecord], path) -> None:
    buf = io.StringIO()
    buf.write(",".join(CELLS_HEADER) + "\n")
    for c in cells:
        buf.write(f"{c.patch_id},{c.cell_id},{c.x!r},{c.y!r},{c.label}\n")
    _write_bytes(path, buf.getvalue().encode("utf-8"))


def group_cells_by_patch(cells: Iterable[CellRecord]) -> dict[int, list[CellRecord]]:
    groups: dict[int, list[CellRecord]] = defaultdict(list)
    for c in cells:
        groups[c.patch_id].append(c)
    return {pid: sorted(cs, key=lambda c: c.cell_id) for pid, cs in sorted(groups.items())}


def graphs_to_json(radius: float, graphs: Sequence[LabeledCellGraph]) -> dict:
    return {
        "radius": float(radius),
        "patches": [
            {
                "patch_id": g.patch_id,
                "nodes": list(g.nodes),
                "labels": list(g.labels),
                "edges": [list(e) for e in g.edges],
            }
            for g in graphs
        ],
    }


def write_graphs(radius: float, graphs: Sequence[LabeledCellGraph], path) -> None:
    # compact encoding: graph files dominate corpus size
    text = json.dumps(graphs_to_json(radius, graphs), separators=(",", ":")) + "\n"
    _write_bytes(path, text.encode("utf-8"))


def read_graphs(path, K_c: int | None = None) -> tuple[float, list[LabeledCellGraph]]:
    try:
        raw = json.loads(_read_bytes(path).decode("utf-8"))
        radius = float(raw["radius"])
        graphs = []
        for p in raw["patches"]:
            labels = tuple(int(v) for v in p["labels"])
            if K_c is not None and any(not 0 <= v < K_c for v in labels):
                raise ValidationError(f"{path}: patch {p['patch_id']} has label outside [0, {K_c})")
            graphs.append(
                LabeledCellGraph(
                    patch_id=int(p["patch_id"]),
                    nodes=tuple(int(v) for v in p["nodes"]),
                    edges=tuple((int(i), int(j)) for i, j in p["edges"]),
                    labels=labels,
                    radius=radius,
                )
            )
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ParseError(f"{path}: malformed graph file: {exc}") from exc
    if not radius > 0:
        raise ValidationError(f"{path}: radius must be positive, got {radius}")
    return radius, sorted(graphs, key=lambda g: g.patch_id)


def make_bag(
    bag_id: str,
    label_index: int,
    K: int,
    embeddings: PatchEmbeddingMatrix,
    graphs: Mapping[int, LabeledCellGraph] | Sequence[LabeledCellGraph],
    radius: float,
) -> Bag:
    """Assemble a bag, filling patches absent from ``graphs`` with empty graphs."""
    if not isinstance(graphs, Mapping):
        graphs = {g.patch_id: g for g in graphs}
    extra = sorted(pid for pid in graphs if not 0 <= pid < embeddings.M)
    if extra:
        raise ValidationError(
            f"bag {bag_id}: patch ids {extra[:5]} have no embedding row (M={embeddings.M})"
        )
    aligned = tuple(
        graphs.get(m) or LabeledCellGraph.empty(m, radius) for m in range(embeddings.M)
    )
    return Bag(bag_id, embeddings, aligned, one_hot(label_index, K))


def relpath(target, start) -> str:
    return os.path.relpath(Path(target).resolve(), Path(start).resolve())
