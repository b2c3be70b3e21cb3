"""Planted-signal synthetic corpora.

Each bag holds ``M`` patches of which ``ceil(rho * M)`` carry the class
signal; the rest are background drawn identically for every class.  The
graph signal lives in cell-type composition and layout, the image signal in
a class-specific mean shift of the patch embedding.

Class motifs (cycled when ``K > 3``):

* class 0: dense, diffuse cells dominated by type 0
* class 1: type-1 cells packed into a few tight clusters
* class 2: scattered type-2 cells
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from wegmil.datamodel import (
    CellRecord,
    DatasetManifest,
    ManifestEntry,
    dumps_json,
    write_cells,
    write_embeddings,
    write_manifest,
)
from wegmil.errors import ConfigError, IoError

BOTH = "both"
GRAPH_ONLY = "graph_only"
IMAGE_ONLY = "image_only"
SPLITS = (BOTH, GRAPH_ONLY, IMAGE_ONLY)

DEFAULT_CLASS_NAMES = ("DLBCL", "FL", "Reactive")
DEFAULT_CELL_TYPES = ("LBC", "CC", "RM", "others")


@dataclass(frozen=True)
class SyntheticSpec:
    K: int = 3
    K_c: int = 4
    bags_per_class: int = 100
    M: int = 16
    rho: float = 0.25
    cells_min: int = 20
    cells_max: int = 40
    patch_size: float = 256.0
    d_in: int = 32
    image_strength: float = 4.0
    # 0 makes signal patches' cells indistinguishable from background
    graph_strength: float = 1.0
    modality_split: str = BOTH
    seed: int = 0

    def __post_init__(self):
        if self.K < 2 or self.K_c < 4:
            raise ConfigError("synthetic corpora need K >= 2 and K_c >= 4")
        if not 0 < self.rho <= 1 or self.rho * self.M < 1:
            raise ConfigError(f"need 0 < rho <= 1 and rho * M >= 1 (rho={self.rho}, M={self.M})")
        if self.bags_per_class < 1 or self.M < 1 or self.d_in < 1:
            raise ConfigError("bags_per_class, M and d_in must be >= 1")
        if not 0 <= self.cells_min <= self.cells_max:
            raise ConfigError("need 0 <= cells_min <= cells_max")
        if self.image_strength < 0 or not 0 <= self.graph_strength <= 1:
            raise ConfigError("image_strength must be >= 0 and graph_strength in [0, 1]")
        if self.modality_split not in SPLITS:
            raise ConfigError(f"modality_split must be one of {SPLITS}")

    @property
    def num_signal(self) -> int:
        return math.ceil(self.rho * self.M)

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {unknown}")
        return cls(**raw)


def _background_probs(K_c: int) -> np.ndarray:
    p = np.full(K_c, 0.7 / (K_c - 3))
    p[:3] = 0.1
    return p


_MOTIF_MASS = (0.7, 0.6, 0.5)


def _motif_probs(cls: int, K_c: int) -> np.ndarray:
    motif = cls % 3
    return _spread(K_c, motif, _MOTIF_MASS[motif])


def _spread(K_c: int, main: int, mass: float) -> np.ndarray:
    p = np.full(K_c, (1.0 - mass) / (K_c - 1))
    p[main] = mass
    return p


def _signal_cells(rng, cls: int, spec: SyntheticSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    g = spec.graph_strength
    bg = _background_probs(spec.K_c)
    probs = bg + g * (_motif_probs(cls, spec.K_c) - bg)
    motif = cls % 3
    if motif == 0:
        n = int(round(n * (1 + 0.5 * g)))
    labels = rng.choice(spec.K_c, size=n, p=probs)
    pos = rng.uniform(0, spec.patch_size, size=(n, 2))
    if motif == 1 and g > 0:
        centres = rng.uniform(0.25 * spec.patch_size, 0.75 * spec.patch_size, size=(2, 2))
        typed = np.flatnonzero(labels == 1)
        cluster = centres[rng.integers(0, 2, size=len(typed))]
        tight = np.clip(cluster + rng.normal(0, 15.0, size=(len(typed), 2)), 0, spec.patch_size)
        pos[typed] = (1 - g) * pos[typed] + g * tight
    return pos, labels


def _background_cells(rng, spec: SyntheticSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.choice(spec.K_c, size=n, p=_background_probs(spec.K_c))
    pos = rng.uniform(0, spec.patch_size, size=(n, 2))
    return pos, labels


def class_directions(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal (where possible) unit directions, one row per class."""
    raw = rng.normal(size=(spec.d_in, max(spec.K, 1)))
    if spec.d_in >= spec.K:
        q, _ = np.linalg.qr(raw)
        return q[:, :spec.K].T
    return (raw / np.linalg.norm(raw, axis=0)).T


def generate_bag(rng: np.random.Generator, cls: int, spec: SyntheticSpec, directions: np.ndarray):
    """Return ``(cells, embeddings, signal_patch_ids)`` for one bag."""
    signal = sorted(rng.choice(spec.M, size=spec.num_signal, replace=False).tolist())
    graph_signal = spec.modality_split in (BOTH, GRAPH_ONLY)
    image_signal = spec.modality_split in (BOTH, IMAGE_ONLY)
    cells = []
    emb = rng.normal(size=(spec.M, spec.d_in))
    for m in range(spec.M):
        n = int(rng.integers(spec.cells_min, spec.cells_max + 1))
        if m in signal and graph_signal:
            pos, labels = _signal_cells(rng, cls, spec, n)
        else:
            pos, labels = _background_cells(rng, spec, n)
        for cid, ((x, y), lab) in enumerate(zip(pos, labels)):
            cells.append(CellRecord(m, cid, float(x), float(y), int(lab)))
        if m in signal and image_signal:
            emb[m] += spec.image_strength * directions[cls]
    return cells, emb.astype(np.float32), signal


def gen_synth(spec: SyntheticSpec, out_dir) -> Path:
    """Write manifest, cells CSVs, PEMB files and ``truth.json``; return the manifest path."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    directions = class_directions(spec, rng)
    entries, truth = [], {}
    width = len(str(spec.K * spec.bags_per_class - 1))
    idx = 0
    for b in range(spec.bags_per_class):
        for cls in range(spec.K):
            bag_id = f"bag{idx:0{width}d}"
            idx += 1
            cells, emb, signal = generate_bag(rng, cls, spec, directions)
            write_cells(cells, out_dir / "bags" / f"{bag_id}.cells.csv")
            write_embeddings(emb, out_dir / "bags" / f"{bag_id}.pemb")
            entries.append(ManifestEntry(bag_id, cls, f"bags/{bag_id}.pemb", f"bags/{bag_id}.cells.csv"))
            truth[bag_id] = {"label": cls, "signal_patches": signal}
    class_names = tuple(DEFAULT_CLASS_NAMES[k] if k < 3 and spec.K == 3 else f"class{k}"
                        for k in range(spec.K))
    cell_types = tuple(DEFAULT_CELL_TYPES[t] if spec.K_c == 4 else f"type{t}" for t in range(spec.K_c))
    manifest = DatasetManifest(spec.K, spec.K_c, class_names, cell_types, tuple(entries), out_dir)
    path = out_dir / "manifest.json"
    write_manifest(manifest, path)
    (out_dir / "truth.json").write_bytes(dumps_json({"spec": asdict(spec), "bags": truth}))
    return path


def read_truth(path) -> dict:
    return json.loads(Path(path).read_text())["bags"]
