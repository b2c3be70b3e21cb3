"""End-to-end phases over one run directory.

Layout of ``out``::

    config.json  splits.json
    graphs/manifest.json  graphs/<bag>.graph.json
    experts/{graph,image}.ckpt  gates/{weg,naive}.ckpt
    metrics/{pretrain_graph,pretrain_image,gate_weg,gate_naive}.csv
    metrics/eval.json  metrics/gate_stats.json
    reports/<bag>.heatmap.csv  reports/<bag>.explanation.json
    figures/*.png
"""

from __future__ import annotations

import logging
import os
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from wegmil import plotting
from wegmil.config import RunConfig, derive_seed
from wegmil.datamodel import DatasetManifest, dumps_json, read_manifest, relpath, write_manifest
from wegmil.dataset import Dataset, bag_labels, load_dataset, stratified_split
from wegmil.errors import ConfigError, IoError, WegmilError
from wegmil.experts import GRAPH, IMAGE, Expert, additive_bag_predict, expert_forward, load_expert, pretrain_expert, save_expert
from wegmil.explain import explain_bag, export_heatmap_csv, write_report_json
from wegmil.fusion import (
    NAIVE,
    WEG,
    GateNetwork,
    collapse_stats,
    collect_gate_weights,
    load_gate,
    moe_predict,
    save_gate,
    train_naive_gate,
    train_weg_gate,
)
from wegmil.graphbuild import build_all
from wegmil.training import classification_metrics, metrics_csv, predict_class

log = logging.getLogger(__name__)


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def expert(self, modality: str) -> Path:
        return self.path("experts", f"{modality}.ckpt")

    def gate(self, variant: str) -> Path:
        return self.path("gates", f"{variant}.ckpt")

    def write(self, rel: str, data: bytes | str) -> Path:
        p = self.path(*rel.split("/"))
        try:
            p.write_bytes(data.encode("utf-8") if isinstance(data, str) else data)
        except OSError as exc:
            raise IoError(f"cannot write {p}: {exc}") from exc
        return p


@contextmanager
def run_lock(root):
    """Exclusive ownership of a run directory for the lifetime of the block."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise IoError(f"run directory {root} is locked by another process ({lock})") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def resolve_config(config: RunConfig, manifest: DatasetManifest, d_in: int | None = None) -> RunConfig:
    if config.K is not None and config.K != manifest.K:
        raise ConfigError(f"config K={config.K} but manifest K={manifest.K}")
    if config.K_c is not None and config.K_c != manifest.K_c:
        raise ConfigError(f"config K_c={config.K_c} but manifest K_c={manifest.K_c}")
    if d_in is not None and config.d_in is not None and config.d_in != d_in:
        raise ConfigError(f"config d_in={config.d_in} but embeddings have d_in={d_in}")
    return replace(config, K=manifest.K, K_c=manifest.K_c, d_in=d_in if d_in is not None else config.d_in)


# --- phases ----------------------------------------------------------------

def build_graphs_phase(manifest_path, config: RunConfig, out) -> Path:
    """Write graph files and a manifest pointing at them; return that manifest's path."""
    run = RunDir(out)
    manifest = read_manifest(manifest_path)
    graph_dir = run.root / "graphs"
    paths = build_all(manifest, config.radius, graph_dir, workers=config.workers)
    entries = tuple(
        replace(e,
                embeddings_path=relpath(manifest.resolve(e.embeddings_path), graph_dir),
                cells_path=relpath(manifest.resolve(e.cells_path), graph_dir),
                graphs_path=relpath(paths[e.bag_id], graph_dir))
        for e in manifest.entries
    )
    derived = replace(manifest, entries=entries, root=graph_dir.resolve())
    path = graph_dir / "manifest.json"
    write_manifest(derived, path)
    return path


def prepare_run(manifest_path, config: RunConfig, out) -> tuple[Dataset, dict, RunConfig]:
    """Load data, resolve widths, fix the split; writes config.json and splits.json."""
    run = RunDir(out)
    manifest = read_manifest(manifest_path)
    ds = load_dataset(manifest, config.radius, workers=config.workers)
    config = resolve_config(config, manifest, ds.bags[0].bag.embeddings.d_in)
    ids = [b.bag_id for b in ds.bags]
    splits = stratified_split(ids, bag_labels(ds.bags), config.split, derive_seed(config.seed, "split"))
    run.write("config.json", dumps_json(config.to_json()))
    run.write("splits.json", dumps_json(splits))
    return ds, splits, config


def pretrain_phase(ds: Dataset, splits: dict, modality: str, config: RunConfig, out):
    run = RunDir(out)
    expert, rows = pretrain_expert(ds.subset(splits["train"]), modality, config, ds.subset(splits["val"]))
    save_expert(run.expert(modality), expert, config.seed)
    run.write(f"metrics/pretrain_{modality}.csv", metrics_csv(rows))
    return expert, rows


def load_frozen_experts(out) -> tuple[Expert, Expert]:
    run = RunDir(out)
    experts = []
    for modality in (GRAPH, IMAGE):
        path = run.root / "experts" / f"{modality}.ckpt"
        if not path.exists():
            raise IoError(f"missing {path}; run `wegmil pretrain --modality {modality}` first")
        e = load_expert(path)
        e.freeze()
        experts.append(e)
    return experts[0], experts[1]


def train_gate_phase(ds: Dataset, splits: dict, variant: str, config: RunConfig, out,
                     experts: tuple[Expert, Expert] | None = None):
    run = RunDir(out)
    graph_expert, image_expert = experts or load_frozen_experts(out)
    trainer = train_weg_gate if variant == WEG else train_naive_gate
    gate, rows = trainer(ds.subset(splits["train"]), graph_expert, image_expert, config,
                         ds.subset(splits["val"]))
    save_gate(run.gate(variant), gate, config.seed)
    run.write(f"metrics/gate_{variant}.csv", metrics_csv(rows))
    return gate, rows


def load_gates(out) -> dict[str, GateNetwork]:
    gates = {}
    for variant in (WEG, NAIVE):
        path = Path(out) / "gates" / f"{variant}.ckpt"
        if path.exists():
            gates[variant] = load_gate(path)
    return gates


def eval_phase(ds: Dataset, splits: dict, config: RunConfig, out,
               experts: tuple[Expert, Expert] | None = None,
               gates: dict[str, GateNetwork] | None = None) -> dict:
    """Accuracy, per-class recall, macro recall and confusion per model and split."""
    run = RunDir(out)
    graph_expert, image_expert = experts or load_frozen_experts(out)
    gates = load_gates(out) if gates is None else gates
    K = config.K
    results: dict = {}
    for split in ("train", "val", "test"):
        bags = ds.subset(splits[split])
        y_true = bag_labels(bags)
        preds: dict[str, list[int]] = {GRAPH: [], IMAGE: [], **{v: [] for v in gates}}
        for b in bags:
            g_out = expert_forward(graph_expert, b)
            x_out = expert_forward(image_expert, b)
            preds[GRAPH].append(predict_class(additive_bag_predict(g_out)[0].data[0]))
            preds[IMAGE].append(predict_class(additive_bag_predict(x_out)[0].data[0]))
            for variant, gate in gates.items():
                preds[variant].append(predict_class(moe_predict(b, graph_expert, image_expert, gate).y_hat.data[0]))
        for model, p in preds.items():
            results.setdefault(model, {})[split] = classification_metrics(y_true, p, K)
    stats = {}
    weights = {}
    test_bags = ds.subset(splits["test"])
    for variant, gate in gates.items():
        w = collect_gate_weights(test_bags, gate, graph_expert, image_expert)
        stats[variant] = collapse_stats(w) | {"variant": variant, "split": "test"}
        weights[variant] = np.concatenate([v[:, 0] for v in w.values()])
    run.write("metrics/eval.json", dumps_json(results))
    run.write("metrics/gate_stats.json", dumps_json(stats))
    if config.figure_bags > 0:
        plotting.confusion_figure({m: r["test"]["confusion"] for m, r in results.items()},
                                  run.path("figures", "confusion_test.png"), ds.manifest.class_names)
        if weights:
            plotting.gate_weights_figure(weights, run.path("figures", "gate_weights_test.png"))
    return {"metrics": results, "gate_stats": stats}


def explain_phase(ds: Dataset, bag_ids: Sequence[str], config: RunConfig, out,
                  experts: tuple[Expert, Expert] | None = None, gate: GateNetwork | None = None,
                  q: int | None = None, figures: int | None = None) -> list:
    """Write heatmap CSV and explanation JSON per bag; figures for the first few bags."""
    run = RunDir(out)
    graph_expert, image_expert = experts or load_frozen_experts(out)
    if gate is None:
        gates = load_gates(out)
        if WEG not in gates:
            raise IoError(f"missing {run.root / 'gates' / 'weg.ckpt'}; run `wegmil train-gate --variant weg` first")
        gate = gates[WEG]
    q = q if q is not None else config.topq
    figures = config.figure_bags if figures is None else figures
    reports = []
    for n, bag_id in enumerate(bag_ids):
        bag = ds.bag(bag_id)
        report = explain_bag(bag, graph_expert, image_expert, gate, q=q, cells=ds.cells[bag_id])
        export_heatmap_csv(report, run.path("reports", f"{bag_id}.heatmap.csv"))
        write_report_json(report, run.path("reports", f"{bag_id}.explanation.json"))
        if n < figures:
            plotting.importance_figure(report, run.path("figures", f"{bag_id}.importance.png"),
                                       ds.manifest.class_names)
            plotting.cell_distribution_figure(report.cell_summary, run.path("figures", f"{bag_id}.cells.png"),
                                              ds.manifest.cell_type_names)
        reports.append(report)
    return reports


def run_pipeline(config: RunConfig, manifest_path, out) -> dict:
    """build-graphs, pretrain both experts, train gates, evaluate, explain the test split."""
    out = Path(out)
    with run_lock(out):
        phase = "build-graphs"
        try:
            derived = build_graphs_phase(manifest_path, config, out)
            phase = "load"
            ds, splits, config = prepare_run(derived, config, out)
            curves = {}
            for modality in (GRAPH, IMAGE):
                phase = f"pretrain-{modality}"
                _, curves[f"pretrain {modality}"] = pretrain_phase(ds, splits, modality, config, out)
            # reload so `run` matches the standalone commands bit for bit
            experts = load_frozen_experts(out)
            gates = {}
            for variant in ((WEG, NAIVE) if config.train_naive else (WEG,)):
                phase = f"train-gate-{variant}"
                gates[variant], curves[f"gate {variant}"] = train_gate_phase(ds, splits, variant, config, out, experts)
            gates = load_gates(out)
            phase = "eval"
            summary = eval_phase(ds, splits, config, out, experts, gates)
            phase = "explain"
            explain_phase(ds, splits["test"], config, out, experts, gates[WEG])
            if config.figure_bags > 0:
                plotting.training_curves_figure(curves, RunDir(out).path("figures", "training.png"))
        except WegmilError as exc:
            raise type(exc)(f"[{phase}] {exc}") from exc
    return summary
