import json

import numpy as np

from wegmil import autodiff as ad
from wegmil.cli import EXIT_GRADCHECK, EXIT_OK, main
from wegmil.config import RunConfig
from wegmil.gradcheck import compare_gradients, gradcheck


def _bad_sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    # deliberately wrong: missing the (1 - s) factor
    return ad.make_op("sigmoid", s, (a,), lambda g: (g * s,))


def test_default_gradcheck_passes_quickly():
    report = gradcheck(RunConfig())
    assert report.passed, report.lines()
    assert report.seconds < 60
    assert {"op:sigmoid", "graph_expert", "image_expert", "naive_gate", "weg_gate"} <= {g.group for g in report.groups}


def test_degenerate_sizes_pass():
    report = gradcheck(RunConfig(d=1, gradcheck_entries=4), M=1, K=2)
    assert report.passed, report.lines()


def test_compare_gradients_exact_for_quadratic():
    x = ad.Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
    err, name, n = compare_gradients(lambda: ad.sum_all(ad.mul(x, x)), [("x", x)])
    assert err < 1e-8 and name == "x" and n == 3


def test_corrupted_backward_is_reported(monkeypatch, tmp_path, capsys):
    monkeypatch.setattr(ad, "sigmoid", _bad_sigmoid)
    report = gradcheck(RunConfig())
    failed = {g.group for g in report.failures}
    assert "op:sigmoid" in failed and "graph_expert" in failed
    assert "op:relu" not in failed
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_GRADCHECK
    assert "FAIL op:sigmoid" in capsys.readouterr().out
    saved = json.loads((tmp_path / "gradcheck.json").read_text())
    assert saved["passed"] is False


def test_cli_gradcheck_ok(capsys):
    assert main(["gradcheck", "--seed", "2"]) == EXIT_OK
    assert "PASS overall" in capsys.readouterr().out
