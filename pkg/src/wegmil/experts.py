"""Single-modality AdditiveMIL experts.

An expert maps a bag's instances to per-instance features, mixes them with
one self-attention block, and scores every instance for every class.  The bag
score for class ``k`` is the plain sum of the per-instance contributions, so
each instance's class-wise importance is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from wegmil import autodiff as ad
from wegmil.autodiff import MLP, Linear, Module, Tensor
from wegmil.config import derive_seed
from wegmil.datamodel import Bag, LabeledCellGraph
from wegmil.errors import ConfigError, DataError, ShapeError, ValidationError
from wegmil.training import train

GRAPH = "graph"
IMAGE = "image"
MODALITIES = (GRAPH, IMAGE)


@dataclass(frozen=True)
class GraphBatch:
    """All patch graphs of one bag as a single disjoint graph."""

    labels: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    node_patch: np.ndarray
    inv_counts: np.ndarray
    M: int

    @property
    def num_nodes(self) -> int:
        return len(self.labels)

    @classmethod
    def from_graphs(cls, graphs: Sequence[LabeledCellGraph]) -> "GraphBatch":
        labels, src, dst, node_patch = [], [], [], []
        counts = np.zeros(len(graphs))
        offset = 0
        for m, g in enumerate(graphs):
            n = g.num_nodes
            labels.extend(g.labels)
            node_patch.extend([m] * n)
            counts[m] = n
            if g.edges:
                e = g.edge_positions() + offset
                # messages flow both ways along an undirected edge
                src.extend(e[:, 0].tolist() + e[:, 1].tolist())
                dst.extend(e[:, 1].tolist() + e[:, 0].tolist())
            offset += n
        inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
        as_int = lambda v: np.asarray(v, dtype=np.int64)
        return cls(as_int(labels), as_int(src), as_int(dst), as_int(node_patch),
                   inv.reshape(-1, 1), len(graphs))


@dataclass(frozen=True)
class PreparedBag:
    """A bag with its graph batch precomputed for repeated forward passes."""

    bag: Bag
    graph_batch: GraphBatch

    @property
    def bag_id(self) -> str:
        return self.bag.bag_id

    @property
    def y(self) -> np.ndarray:
        return self.bag.y

    @property
    def M(self) -> int:
        return self.bag.M


def prepare(bag: Bag | PreparedBag) -> PreparedBag:
    if isinstance(bag, PreparedBag):
        return bag
    return PreparedBag(bag, GraphBatch.from_graphs(bag.graphs))


class GinEncoder(Module):
    """GIN over one-hot cell labels, mean readout per patch."""

    def __init__(self, K_c: int, d: int, layers: int, rng: np.random.Generator):
        super().__init__()
        object.__setattr__(self, "K_c", K_c)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "num_layers", layers)
        for l in range(layers):
            setattr(self, f"eps{l}", Tensor(np.zeros((1, 1)), requires_grad=True))
            setattr(self, f"mlp{l}", MLP(K_c if l == 0 else d, d, d, rng))

    def encode_batch(self, batch: GraphBatch) -> Tensor:
        if batch.num_nodes and batch.labels.max() >= self.K_c:
            raise ValidationError(f"cell label {int(batch.labels.max())} outside [0, {self.K_c})")
        if batch.num_nodes == 0:
            return Tensor(np.zeros((batch.M, self.d)))
        h = Tensor(np.eye(self.K_c)[batch.labels])
        n = batch.num_nodes
        for l in range(self.num_layers):
            neighbours = ad.scatter_add_rows(ad.gather_rows(h, batch.src), batch.dst, n)
            eps = getattr(self, f"eps{l}")
            h = ad.add(ad.add(h, ad.mul(h, eps)), neighbours)
            h = getattr(self, f"mlp{l}")(h)
            if l < self.num_layers - 1:
                h = ad.relu(h)
        pooled = ad.scatter_add_rows(h, batch.node_patch, batch.M)
        return ad.mul(pooled, Tensor(batch.inv_counts))

    def __call__(self, graph: LabeledCellGraph) -> Tensor:
        return self.encode_batch(GraphBatch.from_graphs([graph]))


def gin_encode(encoder: GinEncoder, graph: LabeledCellGraph) -> np.ndarray:
    return encoder(graph).data[0].copy()


class AttentionMixer(Module):
    """One scaled dot-product self-attention block with a residual path.

    The value map starts at zero so the block is the identity at init and
    cross-instance mixing is only learned where it pays.  Without this the
    bag-level signal leaks into every row and per-instance contributions stop
    localizing.
    """

    def __init__(self, d: int, rng: np.random.Generator, zero_value: bool = True):
        super().__init__()
        object.__setattr__(self, "d", d)
        self.query = Linear(d, d, rng, bias=False)
        self.key = Linear(d, d, rng, bias=False)
        self.value = Linear(d, d, rng, bias=False)
        if zero_value:
            self.value.weight.data[:] = 0.0

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        scores = ad.scale(ad.matmul(self.query(x), ad.transpose(self.key(x))), 1.0 / math.sqrt(self.d))
        attn = ad.softmax_rows(scores)
        return ad.add(x, ad.matmul(attn, self.value(x))), attn


@dataclass
class ExpertOutputs:
    h: Tensor
    p: Tensor
    contrib: Tensor
    attention: Tensor
    sigmoid_on: bool


class Expert(Module):
    def __init__(self, modality: str, K: int, d: int, rng: np.random.Generator, *,
                 K_c: int | None = None, d_in: int | None = None, gin_layers: int = 3,
                 sigmoid_on: bool = True, head_hidden: int | None = None):
        super().__init__()
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}")
        if modality == GRAPH and not K_c:
            raise ConfigError("graph expert needs K_c")
        if modality == IMAGE and not d_in:
            raise ConfigError("image expert needs d_in")
        head_hidden = head_hidden or d
        object.__setattr__(self, "config", {
            "modality": modality, "K": K, "d": d, "K_c": K_c, "d_in": d_in,
            "gin_layers": gin_layers, "sigmoid_on": sigmoid_on, "head_hidden": head_hidden,
        })
        if modality == GRAPH:
            self.encoder = GinEncoder(K_c, d, gin_layers, rng)
        else:
            self.encoder = Linear(d_in, d, rng)
        self.mixer = AttentionMixer(d, rng)
        self.head = MLP(d, head_hidden, K, rng)

    @property
    def modality(self) -> str:
        return self.config["modality"]

    @property
    def sigmoid_on(self) -> bool:
        return self.config["sigmoid_on"]

    @property
    def K(self) -> int:
        return self.config["K"]

    def instance_features(self, bag: PreparedBag) -> Tensor:
        if self.modality == GRAPH:
            # sum aggregation grows with degree**layers; rescale each patch embedding
            return ad.rms_norm_rows(self.encoder.encode_batch(bag.graph_batch))
        x = bag.bag.embeddings.values
        if x.shape[1] != self.config["d_in"]:
            raise ShapeError(f"bag {bag.bag_id}: embedding width {x.shape[1]}, expert expects {self.config['d_in']}")
        return self.encoder(Tensor(x))

    def __call__(self, bag: Bag | PreparedBag) -> ExpertOutputs:
        return expert_forward(self, bag)


def expert_forward(expert: Expert, bag: Bag | PreparedBag) -> ExpertOutputs:
    bag = prepare(bag)
    if bag.y.shape[0] != expert.K:
        raise ShapeError(f"bag {bag.bag_id} has {bag.y.shape[0]} classes, expert has {expert.K}")
    h, attn = expert.mixer(expert.instance_features(bag))
    p = expert.head(h)
    contrib = ad.sigmoid(p) if expert.sigmoid_on else p
    return ExpertOutputs(h, p, contrib, attn, expert.sigmoid_on)


def additive_bag_predict(outputs: ExpertOutputs) -> tuple[Tensor, Tensor]:
    """Return ``(y_hat, scores)``: softmax of, and the raw, per-class contribution sums."""
    scores = ad.row_sum(outputs.contrib)
    return ad.softmax_rows(scores), scores


def expert_from_config(config: dict, seed: int) -> Expert:
    cfg = dict(config)
    modality = cfg.pop("modality")
    K, d = cfg.pop("K"), cfg.pop("d")
    return Expert(modality, K, d, np.random.default_rng(seed), **cfg)


def save_expert(path, expert: Expert, seed: int) -> None:
    ad.save_checkpoint(path, expert, {"kind": "expert", "config": expert.config, "seed": seed})


def load_expert(path) -> Expert:
    state, meta = ad.load_checkpoint(path)
    if meta.get("kind") != "expert":
        raise ConfigError(f"{path} is not an expert checkpoint")
    expert = expert_from_config(meta["config"], meta.get("seed", 0))
    expert.load_state_dict(state)
    return expert


def check_widths(bags: Sequence[Bag | PreparedBag], config) -> tuple[int, int]:
    """Return ``(K, d_in)`` shared by ``bags``; ConfigError when config disagrees."""
    bags = [b.bag if isinstance(b, PreparedBag) else b for b in bags]
    Ks = {b.K for b in bags}
    d_ins = {b.embeddings.d_in for b in bags}
    if len(Ks) != 1 or len(d_ins) != 1:
        raise ConfigError(f"bags disagree on widths: K in {sorted(Ks)}, d_in in {sorted(d_ins)}")
    K, d_in = Ks.pop(), d_ins.pop()
    if config.K is not None and config.K != K:
        raise ConfigError(f"config K={config.K} but bags have K={K}")
    if config.d_in is not None and config.d_in != d_in:
        raise ConfigError(f"config d_in={config.d_in} but embeddings have d_in={d_in}")
    return K, d_in


def build_expert(modality: str, K: int, d_in: int, config, seed: int) -> Expert:
    return Expert(modality, K, config.d, np.random.default_rng(seed),
                  K_c=config.K_c if config.K_c is not None else 4, d_in=d_in,
                  gin_layers=config.gin_layers, sigmoid_on=config.sigmoid_on)


def pretrain_expert(bags: Sequence[Bag | PreparedBag], modality: str, config,
                    val_bags: Sequence[Bag | PreparedBag] = ()):
    """Train one expert alone on bag-level cross-entropy.

    Returns ``(expert, epoch_rows)``; deterministic for a fixed ``config.seed``.
    """
    if not bags:
        raise DataError(f"cannot pretrain the {modality} expert on an empty dataset")
    K, d_in = check_widths(bags, config)
    items = [prepare(b) for b in bags]
    val = [prepare(b) for b in val_bags]
    expert = build_expert(modality, K, d_in, config, derive_seed(config.seed, f"init-{modality}"))

    def forward(item):
        y_hat, _ = additive_bag_predict(expert_forward(expert, item))
        return y_hat, item.y

    rows = train(expert, items, forward, K, config, config.pretrain_epochs, config.lr,
                 derive_seed(config.seed, f"order-{modality}"), val, tag=f"pretrain-{modality}")
    return expert, rows
