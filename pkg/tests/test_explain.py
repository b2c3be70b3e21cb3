import csv
import io
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wegmil.datamodel import CellRecord, LabeledCellGraph, PatchEmbeddingMatrix, group_cells_by_patch, make_bag
from wegmil.errors import ConfigError
from wegmil.experts import prepare
from wegmil.explain import (
    ExplanationReport,
    PatchRow,
    default_q,
    explain_bag,
    export_heatmap_csv,
    heatmap_columns,
    heatmap_csv,
    localization_precision,
    top_patches,
    write_report_json,
)
from wegmil.graphbuild import build_patch_graphs
from wegmil.gradcheck import toy_bag

from conftest import make_models


def _softmax(v):
    e = np.exp(np.asarray(v) - np.max(v))
    return e / e.sum()


def _bag_with_cells(rng, M, label_for_patch, n=6):
    cells = []
    for m in range(M):
        pos = rng.uniform(0, 100, size=(n, 2))
        cells += [CellRecord(m, i, float(x), float(y), label_for_patch(m, i)) for i, (x, y) in enumerate(pos)]
    bag = make_bag("b", 0, 3, PatchEmbeddingMatrix(rng.normal(size=(M, 6))), build_patch_graphs(cells, M, 60), 60)
    return prepare(bag), group_cells_by_patch(cells)


def test_single_patch_is_top_everywhere(models):
    ge, ie, _, weg = models
    bag = toy_bag(np.random.default_rng(0), M=1, K=3, d_in=6)
    report = explain_bag(bag, ge, ie, weg)
    assert report.q == 1
    assert report.top_regions == {0: [0], 1: [0], 2: [0]}


def test_report_reconstructs_prediction(models, bag):
    ge, ie, naive, weg = models
    for gate in (naive, weg):
        r = explain_bag(bag, ge, ie, gate)
        scores = r.fused_matrix().sum(axis=0)
        np.testing.assert_allclose(scores, r.scores, atol=1e-12)
        np.testing.assert_allclose(_softmax(scores), r.y_hat, atol=1e-9)
        assert r.predicted_class == int(np.argmax(r.y_hat))
        for row in r.rows:
            np.testing.assert_allclose(
                row.fused, row.gate_w_graph * np.array(row.contrib_graph) + row.gate_w_image * np.array(row.contrib_image),
                atol=1e-15)


def test_q_bounds_and_default(models, bag):
    ge, ie, _, weg = models
    with pytest.raises(ConfigError):
        explain_bag(bag, ge, ie, weg, q=bag.M + 1)
    with pytest.raises(ConfigError):
        explain_bag(bag, ge, ie, weg, q=0)
    assert explain_bag(bag, ge, ie, weg).q == default_q(bag.M) == 1
    assert default_q(16) == 2 and default_q(10) == 1 and default_q(11) == 2


def test_top_patches_sorted_with_id_tiebreak():
    rows = [PatchRow(m, 0.5, 0.5, (), (), (v, 0.0)) for m, v in enumerate([0.2, 0.9, 0.2, 0.9, 0.1])]
    assert top_patches(rows, 0, 4) == [1, 3, 0, 2]
    assert top_patches(rows, 1, 3) == [0, 1, 2]


def test_reports_are_deterministic(models, bag, tmp_path):
    ge, ie, _, weg = models
    a = write_report_json(explain_bag(bag, ge, ie, weg, q=2), tmp_path / "a.json").read_bytes()
    b = write_report_json(explain_bag(bag, ge, ie, weg, q=2), tmp_path / "b.json").read_bytes()
    assert a == b


# --- heatmap CSV ------------------------------------------------------------

def test_heatmap_schema(models):
    ge, ie, _, weg = models
    bag = toy_bag(np.random.default_rng(1), M=2, K=3, d_in=6)
    r = explain_bag(bag, ge, ie, weg)
    rows = list(csv.reader(io.StringIO(heatmap_csv(r))))
    assert len(rows) == 3 and all(len(x) == 1 + 3 * 3 + 2 for x in rows)
    assert rows[0] == heatmap_columns(3, False)
    rows = list(csv.reader(io.StringIO(heatmap_csv(r, {0: (0.0, 0.0), 1: (256.0, 0.0)}))))
    assert all(len(x) == 1 + 2 + 3 * 3 + 2 for x in rows)
    assert rows[0][:3] == ["patch_id", "x", "y"]


def test_heatmap_export_is_byte_stable_and_round_trips(models, bag, tmp_path):
    ge, ie, _, weg = models
    r = explain_bag(bag, ge, ie, weg)
    a = export_heatmap_csv(r, tmp_path / "a.csv").read_bytes()
    b = export_heatmap_csv(r, tmp_path / "b.csv").read_bytes()
    assert a == b
    parsed = list(csv.DictReader(io.StringIO(a.decode())))
    sums = [sum(float(row[f"fused_{k}"]) for row in parsed) for k in range(3)]
    np.testing.assert_allclose(sums, r.scores, atol=1e-12)


# --- cell summaries -----------------------------------------------------------

def test_summary_of_pure_type_one_patches(models):
    ge, ie, _, weg = models
    bag, cells = _bag_with_cells(np.random.default_rng(2), 4, lambda m, i: 1)
    r = explain_bag(bag, ge, ie, weg, q=2, cells=cells)
    s = r.cell_summary
    assert s["top_aggregate"]["frequencies"] == [0.0, 1.0, 0.0, 0.0]
    assert len(s["top_patches"]) == 2
    assert {p["patch_id"] for p in s["top_patches"]} == set(r.top_regions[r.predicted_class])


def test_summary_whole_bag_has_zero_delta(models):
    ge, ie, _, weg = models
    bag, cells = _bag_with_cells(np.random.default_rng(3), 4, lambda m, i: (m + i) % 4)
    r = explain_bag(bag, ge, ie, weg, q=4, cells=cells)
    assert r.cell_summary["frequency_delta"] == [0.0] * 4
    assert r.cell_summary["top_aggregate"] == r.cell_summary["bag_aggregate"]


def test_localization_precision():
    rows = [PatchRow(m, 1, 0, (), (), (float(v),)) for m, v in enumerate([5, 1, 4, 0, 3])]
    r = ExplanationReport("b", 0, (1.0,), (13.0,), rows, {0: [0]}, 1, true_class=0)
    assert localization_precision(r, [0, 2]) == 1.0
    assert localization_precision(r, [0, 1, 3]) == pytest.approx(1 / 3)


# --- permutation of instances -------------------------------------------------

def _permute(bag, perm):
    b = bag.bag
    graphs = {new: LabeledCellGraph(new, b.graphs[old].nodes, b.graphs[old].edges, b.graphs[old].labels, 60.0)
              for new, old in enumerate(perm)}
    return make_bag(b.bag_id, b.label, b.K, PatchEmbeddingMatrix(b.embeddings.values[perm]), graphs, 60.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_explanation_rows_follow_instance_permutation(seed):
    rng = np.random.default_rng(seed)
    ge, ie, _, weg = make_models(seed=seed % 53)
    bag = toy_bag(rng, M=int(rng.integers(2, 8)), K=3, d_in=6)
    perm = rng.permutation(bag.M)
    a = explain_bag(bag, ge, ie, weg)
    b = explain_bag(_permute(bag, perm), ge, ie, weg)
    np.testing.assert_allclose(b.y_hat, a.y_hat, rtol=0, atol=1e-12)
    for new, old in enumerate(perm):
        np.testing.assert_allclose(b.rows[new].fused, a.rows[old].fused, rtol=0, atol=1e-12)
        assert b.rows[new].gate_w_graph == pytest.approx(a.rows[old].gate_w_graph, abs=1e-12)
