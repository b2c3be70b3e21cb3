import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wegmil.autodiff import Tensor
from wegmil.config import RunConfig
from wegmil.errors import ConfigError, DataError, ShapeError
from wegmil.experts import additive_bag_predict, expert_forward
from wegmil.fusion import (
    NAIVE,
    WEG,
    GateNetwork,
    build_gate,
    collect_gate_weights,
    collapse_stats,
    fuse,
    gate_collapse_report,
    gate_forward,
    load_gate,
    moe_predict,
    save_gate,
    train_naive_gate,
    train_weg_gate,
)
from wegmil.gradcheck import toy_bag

from conftest import make_models


def _np_softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _force(gate, graph_weight):
    """Make every row of the gate output exactly (graph_weight, 1 - graph_weight) for 0/1."""
    gate.zero_output()
    gate.mlp.fc2.bias.data = np.array([[800.0, -800.0]] if graph_weight == 1 else [[-800.0, 800.0]])


def test_zero_gate_splits_evenly():
    rng = np.random.default_rng(0)
    for variant in (NAIVE, WEG):
        gate = GateNetwork(variant, 8, rng)
        gate.zero_output()
        w = gate_forward(rng.normal(size=(5, 8)), rng.normal(size=(5, 8)), gate)
        assert w.data.tolist() == [[0.5, 0.5]] * 5


def test_weg_gate_ignores_image_features():
    rng = np.random.default_rng(1)
    gate = GateNetwork(WEG, 8, rng)
    hG = rng.normal(size=(6, 8))
    a = gate_forward(hG, rng.normal(size=(6, 8)), gate).data
    b = gate_forward(hG, rng.normal(size=(6, 8)) * 1e6, gate).data
    c = gate_forward(hG, None, gate).data
    assert a.tobytes() == b.tobytes() == c.tobytes()


def test_naive_gate_matches_straight_line_mlp():
    rng = np.random.default_rng(2)
    gate = GateNetwork(NAIVE, 8, rng)
    hG, hX = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    W = {n: t.data for n, t in gate.named_parameters()}
    x = np.concatenate([hG, hX], axis=1)
    logits = np.maximum(x @ W["mlp.fc1.weight"] + W["mlp.fc1.bias"], 0) @ W["mlp.fc2.weight"] + W["mlp.fc2.bias"]
    np.testing.assert_allclose(gate_forward(hG, hX, gate).data, _np_softmax(logits), atol=1e-14)


def test_gate_widths():
    rng = np.random.default_rng(3)
    assert GateNetwork(NAIVE, 8, rng).in_width == 16
    assert GateNetwork(WEG, 8, rng).in_width == 8
    assert GateNetwork(WEG, 8, rng).config["hidden"] == 4
    with pytest.raises(ShapeError):
        gate_forward(np.ones((3, 8)), np.ones((2, 8)), GateNetwork(NAIVE, 8, rng))
    with pytest.raises(ShapeError):
        gate_forward(np.ones((3, 5)), None, GateNetwork(WEG, 8, rng))
    with pytest.raises(ConfigError):
        GateNetwork("soft", 8, rng)


def test_graph_only_gate_reproduces_graph_expert(models, bag):
    ge, ie, naive, weg = models
    for gate in (naive, weg):
        _force(gate, 1)
        pred = moe_predict(bag, ge, ie, gate)
        assert pred.weights.data[:, 1].max() == 0.0
        y_graph, _ = additive_bag_predict(expert_forward(ge, bag))
        assert pred.y_hat.data.tobytes() == y_graph.data.tobytes()


def test_even_gate_with_equal_contributions_is_a_fixed_point():
    c = Tensor(np.random.default_rng(4).uniform(size=(5, 3)))
    w = Tensor(np.full((5, 2), 0.5))
    assert fuse(w, c, c).data.tobytes() == c.data.tobytes()


def test_moe_matches_straight_line_oracle(models, bag):
    ge, ie, naive, _ = models
    pred = moe_predict(bag, ge, ie, naive)
    cg, cx = expert_forward(ge, bag).contrib.data, expert_forward(ie, bag).contrib.data
    w = gate_forward(expert_forward(ge, bag).h.data, expert_forward(ie, bag).h.data, naive).data
    fused = w[:, :1] * cg + w[:, 1:] * cx
    np.testing.assert_allclose(pred.fused.data, fused, atol=1e-12)
    np.testing.assert_allclose(pred.y_hat.data, _np_softmax(fused.sum(axis=0, keepdims=True)), atol=1e-12)


def test_moe_config_mismatches(bag):
    ge, ie, naive, _ = make_models(seed=0)
    _, ie_off, _, _ = make_models(seed=0, sigmoid_on=False)
    with pytest.raises(ConfigError, match="sigmoid"):
        moe_predict(bag, ge, ie_off, naive)
    with pytest.raises(ConfigError):
        moe_predict(bag, ie, ge, naive)
    with pytest.raises(ConfigError, match="width"):
        moe_predict(bag, ge, ie, GateNetwork(NAIVE, 4, np.random.default_rng(0)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([NAIVE, WEG]))
def test_fused_rows_are_convex_and_additive(seed, variant):
    ge, ie, naive, weg = make_models(seed=seed % 101)
    bag = toy_bag(np.random.default_rng(seed), M=int(seed % 6) + 1, K=3, d_in=6)
    pred = moe_predict(bag, ge, ie, naive if variant == NAIVE else weg)
    w = pred.weights.data
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((w >= 0) & (w <= 1))
    cg, cx, f = pred.graph.contrib.data, pred.image.contrib.data, pred.fused.data
    assert np.all(f >= np.minimum(cg, cx) - 1e-15) and np.all(f <= np.maximum(cg, cx) + 1e-15)
    np.testing.assert_allclose(pred.scores.data[0], f.sum(axis=0), rtol=0, atol=1e-9)


# --- training protocol ------------------------------------------------------

def _bags(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return [toy_bag(rng, M=4, K=3, d_in=6, label=i % 3, bag_id=f"toy{i}") for i in range(n)]


def _frozen(seed=0):
    ge, ie, _, _ = make_models(seed=seed)
    ge.freeze()
    ie.freeze()
    return ge, ie


CFG = RunConfig(d=8, gate_epochs=3, gate_lr=1e-2)


def test_weg_requires_frozen_experts():
    ge, ie, _, _ = make_models()
    with pytest.raises(ConfigError, match="frozen"):
        train_weg_gate(_bags(), ge, ie, CFG)


@pytest.mark.parametrize("trainer", [train_weg_gate, train_naive_gate])
def test_gate_training_leaves_experts_untouched(trainer):
    ge, ie = _frozen()
    before = [p.data.tobytes() for p in ge.parameters() + ie.parameters()]
    gate, rows = trainer(_bags(), ge, ie, CFG, _bags(3, seed=1))
    after = [p.data.tobytes() for p in ge.parameters() + ie.parameters()]
    assert before == after
    assert rows[-1].split == "val" and len([r for r in rows if r.split == "train"]) == 3
    init = build_gate(gate.variant, 8, CFG)
    assert any(not np.array_equal(a, b) for a, b in zip(gate.state_dict().values(), init.state_dict().values()))


@pytest.mark.parametrize("trainer,variant", [(train_weg_gate, WEG), (train_naive_gate, NAIVE)])
def test_zero_epochs_returns_initial_gate(trainer, variant):
    ge, ie = _frozen()
    config = RunConfig(d=8, gate_epochs=0)
    gate, _ = trainer(_bags(), ge, ie, config)
    init = build_gate(variant, 8, config)
    for a, b in zip(gate.state_dict().values(), init.state_dict().values()):
        assert a.tobytes() == b.tobytes()


def test_weg_objective_ignores_image_expert():
    ge, ie = _frozen()
    _, ie_other = _frozen(seed=9)
    ie_other.freeze()
    a, _ = train_weg_gate(_bags(), ge, ie, CFG)
    b, _ = train_weg_gate(_bags(), ge, ie_other, CFG)
    for x, y in zip(a.state_dict().values(), b.state_dict().values()):
        assert x.tobytes() == y.tobytes()


def test_naive_joint_mode_updates_experts():
    ge, ie, _, _ = make_models()
    before = ge.state_dict()
    config = RunConfig(d=8, gate_epochs=1, freeze_experts=False)
    train_naive_gate(_bags(), ge, ie, config)
    assert any(not np.array_equal(before[n], t.data) for n, t in ge.named_parameters())
    ge2, ie2, _, _ = make_models()
    with pytest.raises(ConfigError):
        train_naive_gate(_bags(), ge2, ie2, RunConfig(d=8))


def test_gate_training_needs_bags():
    ge, ie = _frozen()
    with pytest.raises(DataError):
        train_weg_gate([], ge, ie, CFG)


# --- collapse statistics ----------------------------------------------------

@pytest.mark.parametrize("graph_weight,mean,frac", [(1, 1.0, 0.0), (0, 0.0, 1.0)])
def test_forced_gate_collapse_report(graph_weight, mean, frac):
    ge, ie, naive, _ = make_models()
    _force(naive, graph_weight)
    report = gate_collapse_report(_bags(), naive, ge, ie)
    assert report["mean_wG"] == mean and report["collapse_fraction"] == frac
    assert report["n_instances"] == 24


def test_collapse_stats_match_dumped_weights(tmp_path):
    ge, ie = _frozen()
    gate, _ = train_naive_gate(_bags(), ge, ie, CFG)
    weights = collect_gate_weights(_bags(), gate, ge, ie)
    np.savez(tmp_path / "w.npz", **weights)
    dumped = np.load(tmp_path / "w.npz")
    wG = np.concatenate([dumped[k][:, 0] for k in dumped.files])
    stats = collapse_stats(weights)
    assert stats["mean_wG"] == pytest.approx(wG.mean(), abs=1e-15)
    assert stats["collapse_fraction"] == np.mean(wG < 0.05)


def test_gate_checkpoint_round_trip(tmp_path):
    gate = GateNetwork(WEG, 8, np.random.default_rng(0))
    save_gate(tmp_path / "g.ckpt", gate, seed=0)
    back = load_gate(tmp_path / "g.ckpt")
    assert back.config == gate.config
    for a, b in zip(back.state_dict().values(), gate.state_dict().values()):
        assert a.tobytes() == b.astype(np.float32).astype(np.float64).tobytes()
