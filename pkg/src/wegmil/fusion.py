"""Gated mixtures of the graph and image experts.

Two gates are supported.  The ``naive`` gate reads both experts' latent
features; the ``weg`` (weak-expert gate) reads only the graph expert's
features and is trained with the image contributions set to zero, so it
learns where the graph expert can be trusted and hands the remaining
instances to the image expert at inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from wegmil import autodiff as ad
from wegmil.autodiff import MLP, Module, Tensor
from wegmil.config import RunConfig, derive_seed
from wegmil.datamodel import Bag
from wegmil.errors import ConfigError, DataError, ShapeError
from wegmil.experts import (
    GRAPH,
    IMAGE,
    Expert,
    ExpertOutputs,
    PreparedBag,
    expert_forward,
    prepare,
)
from wegmil.training import EpochRow, evaluate, train

NAIVE = "naive"
WEG = "weg"
VARIANTS = (NAIVE, WEG)

_PICK_GRAPH = np.array([[1.0], [0.0]])
_PICK_IMAGE = np.array([[0.0], [1.0]])


class GateNetwork(Module):
    """Two-layer perceptron producing two logits (graph, image) per instance."""

    def __init__(self, variant: str, d: int, rng: np.random.Generator, hidden: int | None = None):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown gate variant {variant!r}")
        hidden = hidden or max(1, d // 2)
        object.__setattr__(self, "config", {"variant": variant, "d": d, "hidden": hidden})
        self.mlp = MLP(2 * d if variant == NAIVE else d, hidden, 2, rng)

    @property
    def variant(self) -> str:
        return self.config["variant"]

    @property
    def in_width(self) -> int:
        return self.mlp.fc1.weight.shape[0]

    def zero_output(self) -> None:
        """Zero the output layer so every instance gets weights (0.5, 0.5)."""
        self.mlp.fc2.weight.data = np.zeros_like(self.mlp.fc2.weight.data)
        self.mlp.fc2.bias.data = np.zeros_like(self.mlp.fc2.bias.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def gate_forward(hG, hX, gate: GateNetwork) -> Tensor:
    """Row-wise softmax of gate logits; columns are (graph, image).

    The weg gate never touches ``hX``; it may be None.
    """
    hG = _as_tensor(hG)
    if gate.variant == WEG:
        x = hG
    else:
        hX = _as_tensor(hX)
        if hG.shape != hX.shape:
            raise ShapeError(f"gate: graph features {hG.shape} vs image features {hX.shape}")
        x = ad.concat_cols([hG, hX])
    if x.shape[1] != gate.in_width:
        raise ShapeError(f"{gate.variant} gate expects width {gate.in_width}, got {x.shape[1]}")
    return ad.softmax_rows(gate.mlp(x))


def fuse(weights: Tensor, contrib_graph: Tensor, contrib_image: Tensor | None) -> Tensor:
    """Per-instance convex combination; ``contrib_image=None`` means zero image contribution."""
    fused = ad.mul(ad.matmul(weights, Tensor(_PICK_GRAPH)), contrib_graph)
    if contrib_image is None:
        return fused
    return ad.add(fused, ad.mul(ad.matmul(weights, Tensor(_PICK_IMAGE)), contrib_image))


@dataclass
class MoEPrediction:
    y_hat: Tensor
    scores: Tensor
    weights: Tensor
    fused: Tensor
    graph: ExpertOutputs
    image: ExpertOutputs


def _check_experts(graph_expert: Expert, image_expert: Expert, gate: GateNetwork | None = None):
    if graph_expert.modality != GRAPH or image_expert.modality != IMAGE:
        raise ConfigError("expected a graph expert and an image expert, in that order")
    if graph_expert.sigmoid_on != image_expert.sigmoid_on:
        raise ConfigError("experts disagree on the sigmoid flag")
    if graph_expert.K != image_expert.K:
        raise ConfigError(f"experts disagree on K: {graph_expert.K} vs {image_expert.K}")
    d = graph_expert.config["d"]
    if image_expert.config["d"] != d or (gate is not None and gate.config["d"] != d):
        raise ConfigError("experts and gate disagree on latent width d")


def moe_predict(bag: Bag | PreparedBag, graph_expert: Expert, image_expert: Expert,
                gate: GateNetwork) -> MoEPrediction:
    _check_experts(graph_expert, image_expert, gate)
    bag = prepare(bag)
    g_out = expert_forward(graph_expert, bag)
    x_out = expert_forward(image_expert, bag)
    return _mix(g_out, x_out, gate)


def _mix(g_out: ExpertOutputs, x_out: ExpertOutputs, gate: GateNetwork) -> MoEPrediction:
    w = gate_forward(g_out.h, x_out.h, gate)
    fused = fuse(w, g_out.contrib, x_out.contrib)
    scores = ad.row_sum(fused)
    return MoEPrediction(ad.softmax_rows(scores), scores, w, fused, g_out, x_out)


@dataclass
class _Cached:
    """Frozen-expert outputs for one bag, reused across gate epochs."""

    bag: PreparedBag
    graph: ExpertOutputs
    image: ExpertOutputs


def _cache(bags, graph_expert, image_expert) -> list[_Cached]:
    out = []
    for b in bags:
        b = prepare(b)
        out.append(_Cached(b, expert_forward(graph_expert, b), expert_forward(image_expert, b)))
    return out


def build_gate(variant: str, d: int, config: RunConfig) -> GateNetwork:
    return GateNetwork(variant, d, np.random.default_rng(derive_seed(config.seed, f"init-gate-{variant}")))


def train_weg_gate(bags: Sequence[Bag | PreparedBag], graph_expert: Expert, image_expert: Expert,
                   config: RunConfig, val_bags: Sequence = ()) -> tuple[GateNetwork, list[EpochRow]]:
    """Fit the weak-expert gate with image contributions forced to zero.

    Only gate parameters move; both experts must be frozen beforehand.
    Validation rows score full two-expert inference.
    """
    _check_experts(graph_expert, image_expert)
    if not (graph_expert.frozen and image_expert.frozen):
        raise ConfigError("train_weg_gate needs frozen experts; call expert.freeze() first")
    if not bags:
        raise DataError("cannot train a gate on an empty dataset")
    gate = build_gate(WEG, graph_expert.config["d"], config)
    items = _cache(bags, graph_expert, image_expert)
    val = _cache(val_bags, graph_expert, image_expert)

    def objective(item: _Cached):
        w = gate_forward(item.graph.h, None, gate)
        return ad.softmax_rows(ad.row_sum(fuse(w, item.graph.contrib, None))), item.bag.y

    def inference(item: _Cached):
        return _mix(item.graph, item.image, gate).y_hat, item.bag.y

    rows = _train_gate(gate, items, objective, config, val, inference, tag="gate-weg")
    return gate, rows


def train_naive_gate(bags: Sequence[Bag | PreparedBag], graph_expert: Expert, image_expert: Expert,
                     config: RunConfig, val_bags: Sequence = ()) -> tuple[GateNetwork, list[EpochRow]]:
    """Fit the naive gate on the full mixture of both experts.

    With ``config.freeze_experts`` (default) only the gate moves and frozen
    experts are required; otherwise experts are trained jointly.
    """
    _check_experts(graph_expert, image_expert)
    if not bags:
        raise DataError("cannot train a gate on an empty dataset")
    gate = build_gate(NAIVE, graph_expert.config["d"], config)
    frozen = graph_expert.frozen and image_expert.frozen
    if config.freeze_experts:
        if not frozen:
            raise ConfigError("freeze_experts is set but the experts are not frozen")
        items = _cache(bags, graph_expert, image_expert)
        val = _cache(val_bags, graph_expert, image_expert)

        def forward(item: _Cached):
            return _mix(item.graph, item.image, gate).y_hat, item.bag.y

        rows = _train_gate(gate, items, forward, config, val, forward, tag="gate-naive")
        return gate, rows

    if frozen:
        graph_expert.unfreeze()
        image_expert.unfreeze()
    items = [prepare(b) for b in bags]
    val = [prepare(b) for b in val_bags]

    def joint(item: PreparedBag):
        return moe_predict(item, graph_expert, image_expert, gate).y_hat, item.y

    params = gate.parameters() + graph_expert.parameters() + image_expert.parameters()
    rows = train(params, items, joint, graph_expert.K, config, config.gate_epochs, config.gate_lr,
                 derive_seed(config.seed, "order-gate-naive"), val, tag="gate-naive-joint")
    return gate, rows


def _train_gate(gate, items, objective, config, val, val_forward, tag):
    K = items[0].bag.y.shape[0]
    rows = train(gate, items, objective, K, config, config.gate_epochs, config.gate_lr,
                 derive_seed(config.seed, f"order-{tag}"), (), tag=tag)
    if val:
        # validation scores the deployed mixture, after training
        loss, m = evaluate(val, val_forward, K)
        rows.append(EpochRow(config.gate_epochs, "val", loss, m["accuracy"], m["macro_recall"]))
    return rows


def collect_gate_weights(bags: Sequence[Bag | PreparedBag], gate: GateNetwork,
                         graph_expert: Expert, image_expert: Expert) -> dict[str, np.ndarray]:
    out = {}
    for b in bags:
        b = prepare(b)
        g_out = expert_forward(graph_expert, b)
        x_out = expert_forward(image_expert, b) if gate.variant == NAIVE else None
        out[b.bag_id] = gate_forward(g_out.h, None if x_out is None else x_out.h, gate).data.copy()
    return out


def gate_collapse_report(bags: Sequence[Bag | PreparedBag], gate: GateNetwork, graph_expert: Expert,
                         image_expert: Expert, threshold: float = 0.05) -> dict:
    """Dataset-level use of the graph expert: mean weight and collapsed fraction."""
    weights = collect_gate_weights(bags, gate, graph_expert, image_expert)
    return collapse_stats(weights, threshold) | {"variant": gate.variant}


def collapse_stats(weights: dict[str, np.ndarray], threshold: float = 0.05) -> dict:
    wG = np.concatenate([w[:, 0] for w in weights.values()]) if weights else np.zeros(0)
    return {
        "mean_wG": float(wG.mean()) if len(wG) else 0.0,
        "collapse_fraction": float(np.mean(wG < threshold)) if len(wG) else 0.0,
        "threshold": threshold,
        "n_instances": int(len(wG)),
    }


def save_gate(path, gate: GateNetwork, seed: int) -> None:
    ad.save_checkpoint(path, gate, {"kind": "gate", "config": gate.config, "seed": seed})


def load_gate(path) -> GateNetwork:
    state, meta = ad.load_checkpoint(path)
    if meta.get("kind") != "gate":
        raise ConfigError(f"{path} is not a gate checkpoint")
    cfg = meta["config"]
    gate = GateNetwork(cfg["variant"], cfg["d"], np.random.default_rng(0), hidden=cfg["hidden"])
    gate.load_state_dict(state)
    return gate
