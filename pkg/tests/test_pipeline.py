"""Pipeline phases and the command line on a tiny corpus."""

import json
from pathlib import Path

import numpy as np
import pytest

from wegmil.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from wegmil.config import RunConfig
from wegmil.errors import IoError, ParseError
from wegmil.pipeline import run_lock, run_pipeline
from wegmil.synth import SyntheticSpec, gen_synth, read_truth

TINY = {"pretrain_epochs": 3, "gate_epochs": 2, "d": 16, "figure_bags": 1}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return gen_synth(SyntheticSpec(bags_per_class=4, M=4, seed=3), root / "corpus")


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "config.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def tiny_run(corpus, config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    assert main(["run", "--config", str(config_file), "--manifest", str(corpus), "--out", str(out)]) == EXIT_OK
    return out


def _read(p):
    return json.loads(Path(p).read_text())


def test_run_layout(tiny_run):
    for rel in ("config.json", "splits.json", "graphs/manifest.json", "experts/graph.ckpt", "experts/image.ckpt",
                "gates/weg.ckpt", "gates/naive.ckpt", "metrics/pretrain_graph.csv", "metrics/gate_weg.csv",
                "metrics/eval.json", "metrics/gate_stats.json", "figures/training.png"):
        assert (tiny_run / rel).is_file(), rel
    assert not (tiny_run / ".lock").exists()
    test_ids = _read(tiny_run / "splits.json")["test"]
    assert sorted(p.name for p in (tiny_run / "reports").glob("*.json")) == sorted(f"{b}.explanation.json" for b in test_ids)


def test_splits_disjoint_and_stratified(tiny_run, corpus):
    splits = _read(tiny_run / "splits.json")
    ids = [set(v) for v in splits.values()]
    assert sum(map(len, ids)) == 12 and len(set().union(*ids)) == 12
    truth = read_truth(Path(corpus).parent / "truth.json")
    for name in ("train", "val", "test"):
        assert {truth[b]["label"] for b in splits[name]} == {0, 1, 2}


def test_confusion_rows_sum_to_class_counts(tiny_run, corpus):
    truth = read_truth(Path(corpus).parent / "truth.json")
    test_ids = _read(tiny_run / "splits.json")["test"]
    counts = np.bincount([truth[b]["label"] for b in test_ids], minlength=3)
    for model, per_split in _read(tiny_run / "metrics/eval.json").items():
        cm = np.array(per_split["test"]["confusion"])
        assert cm.sum(axis=1).tolist() == counts.tolist(), model
    stats = _read(tiny_run / "metrics/gate_stats.json")
    assert stats["weg"]["n_instances"] == 4 * len(test_ids)
    assert 0.0 <= stats["naive"]["mean_wG"] <= 1.0


def test_gate_curves_have_train_and_val_rows(tiny_run):
    lines = (tiny_run / "metrics/pretrain_graph.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss,accuracy,macro_recall"
    assert len(lines) == 1 + 2 * TINY["pretrain_epochs"]


def test_stepwise_commands_match_run(tiny_run, corpus, config_file, tmp_path):
    out = tmp_path / "steps"
    common = ["--config", str(config_file), "--out", str(out)]
    assert main(["build-graphs", "--manifest", str(corpus)] + common) == EXIT_OK
    derived = str(out / "graphs" / "manifest.json")
    for modality in ("graph", "image"):
        assert main(["pretrain", "--modality", modality, "--manifest", derived] + common) == EXIT_OK
    for variant in ("weg", "naive"):
        assert main(["train-gate", "--variant", variant, "--manifest", derived] + common) == EXIT_OK
    assert main(["eval", "--manifest", derived] + common) == EXIT_OK
    for rel in ("experts/graph.ckpt", "experts/image.ckpt", "gates/weg.ckpt", "gates/naive.ckpt",
                "metrics/eval.json", "metrics/gate_stats.json", "splits.json"):
        assert (out / rel).read_bytes() == (tiny_run / rel).read_bytes(), rel


def test_explain_command_with_topq(tiny_run, capsys):
    bag = _read(tiny_run / "splits.json")["test"][0]
    derived = str(tiny_run / "graphs" / "manifest.json")
    assert main(["explain", "--manifest", derived, "--out", str(tiny_run), "--bag", bag, "--topq", "2"]) == EXIT_OK
    report = _read(tiny_run / "reports" / f"{bag}.explanation.json")
    assert report["q"] == 2 and all(len(v) == 2 for v in report["top_regions"].values())
    assert bag in capsys.readouterr().out
    assert main(["explain", "--manifest", derived, "--out", str(tiny_run), "--bag", bag, "--topq", "9"]) == EXIT_VALIDATION
    # leave the default report in place for the other tests
    assert main(["explain", "--manifest", derived, "--out", str(tiny_run), "--bag", bag]) == EXIT_OK


def test_gen_synth_command(tmp_path, capsys):
    code = main(["gen-synth", "--out", str(tmp_path), "--bags-per-class", "2", "--instances", "5",
                 "--rho", "0.4", "--modality-split", "graph_only", "--seed", "4"])
    assert code == EXIT_OK
    spec = _read(tmp_path / "truth.json")["spec"]
    assert spec["M"] == 5 and spec["modality_split"] == "graph_only" and spec["seed"] == 4
    assert capsys.readouterr().out.strip().endswith("manifest.json")
    assert main(["gen-synth", "--out", str(tmp_path / "x"), "--rho", "1.5"]) == EXIT_VALIDATION


def test_missing_manifest_is_io_error(tmp_path):
    assert main(["run", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_bad_config_is_validation_error(corpus, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"splits": [0.5, 0.5]}')
    assert main(["run", "--config", str(cfg), "--manifest", str(corpus), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    cfg.write_text('{"radius": -1}')
    assert main(["run", "--config", str(cfg), "--manifest", str(corpus), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_gate_before_pretrain_names_missing_checkpoint(corpus, config_file, tmp_path, capsys):
    code = main(["train-gate", "--manifest", str(corpus), "--config", str(config_file), "--out", str(tmp_path)])
    assert code == EXIT_IO
    assert "wegmil pretrain" in capsys.readouterr().err


def test_locked_run_directory(corpus, tmp_path):
    with run_lock(tmp_path):
        with pytest.raises(IoError, match="locked"):
            run_pipeline(RunConfig(**TINY), corpus, tmp_path)
        assert main(["run", "--manifest", str(corpus), "--out", str(tmp_path)]) == EXIT_IO
    assert not (tmp_path / ".lock").exists()


def test_errors_carry_phase_and_bag(corpus, tmp_path):
    bad = tmp_path / "corpus"
    bad.mkdir()
    src = Path(corpus).parent
    for p in src.rglob("*"):
        if p.is_file():
            dest = bad / p.relative_to(src)
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(p.read_bytes())
    victim = sorted((bad / "bags").glob("*.cells.csv"))[1]
    victim.write_text("patch_id,cell_id,x,y\n0,0,not-a-number,1\n")
    with pytest.raises(ParseError) as info:
        run_pipeline(RunConfig(**TINY), bad / "manifest.json", tmp_path / "out")
    msg = str(info.value)
    assert msg.startswith("[build-graphs]") and victim.name.split(".")[0] in msg
    assert not (tmp_path / "out" / ".lock").exists()


@pytest.mark.slow
def test_clustered_class_top_regions_enriched(full_run):
    # class 1 plants tight type-1 clusters: its top regions should over-represent type 1
    truth = full_run.truth()
    deltas = [full_run.report(b)["cell_summary"]["frequency_delta"][1]
              for b in full_run.splits()["test"] if truth[b]["label"] == 1]
    assert len(deltas) >= 10
    assert np.mean(deltas) > 0.1
