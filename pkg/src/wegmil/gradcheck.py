"""Central finite-difference checks of every op and every model's gradients."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from wegmil import autodiff as ad
from wegmil.autodiff import Tensor
from wegmil.config import RunConfig
from wegmil.datamodel import CellRecord, PatchEmbeddingMatrix, make_bag
from wegmil.experts import GRAPH, IMAGE, Expert, additive_bag_predict, expert_forward, prepare
from wegmil.fusion import NAIVE, WEG, GateNetwork, fuse, gate_forward, moe_predict
from wegmil.graphbuild import build_patch_graphs

TOLERANCE = 1e-4
FD_STEP = 1e-5
# gradients smaller than this are compared absolutely
_NORM_FLOOR = 1e-7


@dataclass
class GroupResult:
    group: str
    max_rel_err: float
    passed: bool
    worst: str
    checked: int


@dataclass
class GradcheckReport:
    groups: list[GroupResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def failures(self) -> list[GroupResult]:
        return [g for g in self.groups if not g.passed]

    def to_json(self) -> dict:
        return {"passed": self.passed, "tolerance": TOLERANCE, "fd_step": FD_STEP,
                "groups": [asdict(g) for g in self.groups]}

    def lines(self) -> list[str]:
        return [f"{'PASS' if g.passed else 'FAIL'} {g.group:<28} max_rel_err={g.max_rel_err:.3e} "
                f"worst={g.worst} entries={g.checked}" for g in self.groups]


def compare_gradients(loss_fn: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
                      eps: float = FD_STEP, max_entries: int | None = None,
                      rng: np.random.Generator | None = None) -> tuple[float, str, int]:
    """Worst per-tensor relative error between backprop and central differences.

    Returns ``(max_rel_err, worst_param_name, entries_checked)``.  With
    ``max_entries`` only that many seeded-random entries per tensor are probed.
    """
    rng = rng or np.random.default_rng(0)
    for _, p in params:
        p.grad = None
    ad.backward(loss_fn())
    worst, worst_name, checked = 0.0, "-", 0
    for name, p in params:
        analytic_full = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * eps)
        analytic = analytic_full.reshape(-1)[idx]
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), _NORM_FLOOR)
        err = float(np.linalg.norm(analytic - numeric) / denom)
        checked += len(idx)
        if err > worst or worst_name == "-":
            worst, worst_name = err, name
    for _, p in params:
        p.grad = None
    return worst, worst_name, checked


# --- single-op checks ------------------------------------------------------

def _op_cases(rng: np.random.Generator) -> dict[str, tuple[list[Tensor], Callable[..., Tensor]]]:
    def t(*shape, low=-1.0, high=1.0):
        return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)

    def away_from_zero(*shape):
        x = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return Tensor(x, requires_grad=True)

    idx = np.array([0, 2, 2, 1])
    y = np.array([0.0, 1.0, 0.0])
    return {
        "matmul": ([t(3, 4), t(4, 2)], lambda a, b: ad.matmul(a, b)),
        "add": ([t(3, 4), t(1, 4)], lambda a, b: ad.add(a, b)),
        "sub": ([t(3, 4), t(3, 1)], lambda a, b: ad.sub(a, b)),
        "mul": ([t(3, 4), t(3, 1)], lambda a, b: ad.mul(a, b)),
        "scale": ([t(3, 4)], lambda a: ad.scale(a, -1.7)),
        "transpose": ([t(3, 4)], lambda a: ad.transpose(a)),
        "row_sum": ([t(3, 4)], lambda a: ad.row_sum(a)),
        "mean_rows": ([t(3, 4)], lambda a: ad.mean_rows(a)),
        "sum_all": ([t(3, 4)], lambda a: ad.sum_all(a)),
        "concat_rows": ([t(2, 3), t(1, 3)], lambda a, b: ad.concat_rows([a, b])),
        "concat_cols": ([t(2, 3), t(2, 1)], lambda a, b: ad.concat_cols([a, b])),
        "relu": ([away_from_zero(3, 4)], lambda a: ad.relu(a)),
        "sigmoid": ([t(3, 4, low=-4, high=4)], lambda a: ad.sigmoid(a)),
        "softmax_rows": ([t(3, 4, low=-3, high=3)], lambda a: ad.softmax_rows(a)),
        "log": ([t(3, 4, low=0.5, high=2.0)], lambda a: ad.log(a)),
        "rms_norm_rows": ([t(3, 5)], lambda a: ad.rms_norm_rows(a)),
        "gather_rows": ([t(3, 2)], lambda a: ad.gather_rows(a, idx)),
        "scatter_add_rows": ([t(4, 2)], lambda a: ad.scatter_add_rows(a, idx, 3)),
        "cross_entropy": ([t(1, 3)], lambda a: ad.cross_entropy(ad.softmax_rows(a), y)),
    }


def check_ops(rng: np.random.Generator) -> list[GroupResult]:
    results = []
    for name, (inputs, fn) in _op_cases(rng).items():
        probe = fn(*[Tensor(x.data) for x in inputs]).shape
        weights = Tensor(rng.uniform(0.5, 1.5, size=probe))
        loss_fn = lambda fn=fn, inputs=inputs, weights=weights: ad.sum_all(ad.mul(fn(*inputs), weights))
        err, worst, n = compare_gradients(loss_fn, [(f"x{i}", x) for i, x in enumerate(inputs)])
        results.append(GroupResult(f"op:{name}", err, err < TOLERANCE, worst, n))
    return results


# --- model checks ----------------------------------------------------------

def toy_bag(rng: np.random.Generator, M: int = 3, K: int = 3, K_c: int = 4, d_in: int = 6,
            radius: float = 60.0, label: int = 0, bag_id: str = "toy"):
    """Small bag with a few connected cells per patch."""
    cells = []
    for m in range(M):
        n = int(rng.integers(2, 6))
        pos = rng.uniform(0, 100, size=(n, 2))
        for c in range(n):
            cells.append(CellRecord(m, c, float(pos[c, 0]), float(pos[c, 1]), int(rng.integers(0, K_c))))
    graphs = build_patch_graphs(cells, M, radius)
    emb = PatchEmbeddingMatrix(rng.normal(size=(M, d_in)))
    return prepare(make_bag(bag_id, label, K, emb, graphs, radius))


def _named(module, prefix: str) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]


def check_models(config: RunConfig, M: int = 3, K: int | None = None, seed: int | None = None
                 ) -> list[GroupResult]:
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    K = K or config.K or 3
    K_c = config.K_c or 4
    d_in = config.d_in or 6
    bag = toy_bag(rng, M=M, K=K, K_c=K_c, d_in=d_in, radius=config.radius,
                  label=int(rng.integers(0, K)))
    kw = dict(K_c=K_c, d_in=d_in, gin_layers=config.gin_layers, sigmoid_on=config.sigmoid_on)
    graph_expert = Expert(GRAPH, K, config.d, rng, **kw)
    image_expert = Expert(IMAGE, K, config.d, rng, **kw)
    for e in (graph_expert, image_expert):
        # a zero value map would make the query/key gradients trivially zero
        e.mixer.value.weight.data[:] = ad.glorot(rng, config.d, config.d)
    naive = GateNetwork(NAIVE, config.d, rng)
    weg = GateNetwork(WEG, config.d, rng)
    probe_rng = np.random.default_rng(seed + 1)
    limit = config.gradcheck_entries

    def expert_loss(expert):
        return lambda: ad.cross_entropy(additive_bag_predict(expert_forward(expert, bag))[0], bag.y)

    def naive_loss():
        return ad.cross_entropy(moe_predict(bag, graph_expert, image_expert, naive).y_hat, bag.y)

    def weg_train_loss():
        g_out = expert_forward(graph_expert, bag)
        w = gate_forward(g_out.h, None, weg)
        return ad.cross_entropy(ad.softmax_rows(ad.row_sum(fuse(w, g_out.contrib, None))), bag.y)

    def weg_full_loss():
        return ad.cross_entropy(moe_predict(bag, graph_expert, image_expert, weg).y_hat, bag.y)

    groups = [
        ("graph_expert", expert_loss(graph_expert), _named(graph_expert, "graph")),
        ("image_expert", expert_loss(image_expert), _named(image_expert, "image")),
        ("naive_gate", naive_loss, _named(naive, "gate")),
        ("weg_gate", weg_train_loss, _named(weg, "gate")),
        ("weg_moe_all_params", weg_full_loss,
         _named(graph_expert, "graph") + _named(image_expert, "image") + _named(weg, "gate")),
    ]
    results = []
    for name, loss_fn, params in groups:
        err, worst, n = compare_gradients(loss_fn, params, max_entries=limit, rng=probe_rng)
        results.append(GroupResult(name, err, err < TOLERANCE, worst, n))
    return results


def gradcheck(config: RunConfig | None = None, M: int = 3, K: int | None = None) -> GradcheckReport:
    config = config or RunConfig()
    start = time.perf_counter()
    groups = check_ops(np.random.default_rng(config.seed)) + check_models(config, M=M, K=K)
    return GradcheckReport(groups, time.perf_counter() - start)
