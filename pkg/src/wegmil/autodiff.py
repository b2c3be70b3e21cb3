"""Small dense reverse-mode autodiff over 2D float64 arrays.

Every tensor is a matrix.  Binary elementwise ops accept operands of equal
shape or a ``(1, n)`` row, ``(m, 1)`` column or ``(1, 1)`` scalar operand that
is broadcast against the other; nothing else is broadcast.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from wegmil.errors import (
    DomainError,
    IoError,
    NonFiniteError,
    ParseError,
    ShapeError,
    StateError,
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar for tests and hand-written formulas
    def __add__(self, other):
        return add(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Record one node on the tape.

    ``backward`` maps the output gradient to one gradient (or None) per parent.
    """
    if not np.all(np.isfinite(data)):
        idx = tuple(int(v) for v in np.argwhere(~np.isfinite(data))[0])
        raise NonFiniteError(f"{op}: non-finite output at index {idx}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _broadcast_dim(x: int, y: int) -> int | None:
    if x == y or y == 1:
        return x
    if x == 1:
        return y
    return None


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    rows, cols = _broadcast_dim(a[0], b[0]), _broadcast_dim(a[1], b[1])
    if rows is None or cols is None:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return (rows, cols)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b),
                   lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make_op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return make_op("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def row_sum(a: Tensor) -> Tensor:
    """Sum of the rows: ``(m, n) -> (1, n)``."""
    m = a.shape[0]
    return make_op("row_sum", a.data.sum(axis=0, keepdims=True), (a,),
                   lambda g: (np.repeat(g, m, axis=0),))


def mean_rows(a: Tensor) -> Tensor:
    """Mean of the rows: ``(m, n) -> (1, n)``."""
    m = a.shape[0]
    if m == 0:
        raise ShapeError("mean_rows: no rows")
    return make_op("mean_rows", a.data.mean(axis=0, keepdims=True), (a,),
                   lambda g: (np.repeat(g / m, m, axis=0),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op("sum_all", np.array([[a.data.sum()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0]),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return make_op("concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts),
                   lambda g: tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(parts))))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return make_op("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts),
                   lambda g: tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts))))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_op("softmax_rows", s, (a,), backward)


def rms_norm_rows(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each row to unit root-mean-square; zero rows stay zero."""
    x = a.data
    inv = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)
    y = x * inv

    def backward(g):
        return (inv * (g - y * (g * y).mean(axis=1, keepdims=True)),)

    return make_op("rms_norm_rows", y, (a,), backward)


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        idx = tuple(int(v) for v in np.argwhere(x <= 0)[0])
        raise DomainError(f"log: nonpositive input at index {idx}")
    return make_op("log", np.log(x), (a,), lambda g: (g / x,))


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n, shape = a.shape[0], a.shape
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_op("gather_rows", a.data[index], (a,), backward)


def scatter_add_rows(a: Tensor, index, num_rows: int) -> Tensor:
    """``out[index[i]] += a[i]`` into a fresh ``(num_rows, n)`` matrix."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (a.shape[0],):
        raise ShapeError(f"scatter_add_rows: {index.shape[0] if index.ndim else 0} indices for {a.shape[0]} rows")
    if index.size and (index.min() < 0 or index.max() >= num_rows):
        raise ShapeError(f"scatter_add_rows: index out of range for {num_rows} rows")
    out = np.zeros((num_rows, a.shape[1]))
    np.add.at(out, index, a.data)
    return make_op("scatter_add_rows", out, (a,), lambda g: (g[index],))


def cross_entropy(y_hat: Tensor, y) -> Tensor:
    """``-sum_k y_k log y_hat_k`` for a ``(1, K)`` probability row and one-hot ``y``."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    if y.shape != y_hat.shape:
        raise ShapeError(f"cross_entropy: y_hat {y_hat.shape} vs y {y.shape}")
    k = int(np.argmax(y))
    p = y_hat.data[0, k]
    if not p > 0:
        raise DomainError(f"cross_entropy: predicted probability {p} at true class {k}")
    return make_op("cross_entropy", np.array([[-math.log(p)]]), (y_hat,),
                   lambda g: (_ce_grad(g, k, p, y.shape),))


def _ce_grad(g, k, p, shape):
    out = np.zeros(shape)
    out[0, k] = -g[0, 0] / p
    return out


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Without ``retain_graph`` the tape is released and a second call raises
    :class:`StateError`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("tape already consumed; pass retain_graph=True to backprop twice")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if not retain_graph:
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


# --- modules ---------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class Module:
    """Parameter container; registration order fixes checkpoint order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "frozen", False)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + n, t) for n, t in self._params.items()]
        for cname, child in self._children.items():
            out.extend(child.named_parameters(prefix + cname + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
        for m in self._modules():
            object.__setattr__(m, "frozen", True)

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True
        for m in self._modules():
            object.__setattr__(m, "frozen", False)

    def _modules(self):
        yield self
        for child in self._children.values():
            yield from child._modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            missing = sorted(set(named) - set(state))
            unexpected = sorted(set(state) - set(named))
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for n, t in named.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{n}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Tensor(glorot(rng, fan_in, fan_out), requires_grad=True)
        if bias:
            a = math.sqrt(6.0 / (fan_in + fan_out))
            self.bias = Tensor(rng.uniform(-a, a, size=(1, fan_out)), requires_grad=True)
        else:
            object.__setattr__(self, "bias", None)

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out if self.bias is None else add(out, self.bias)


class MLP(Module):
    """Two linear layers with a ReLU between them."""

    def __init__(self, fan_in: int, hidden: int, fan_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(fan_in, hidden, rng)
        self.fc2 = Linear(hidden, fan_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


# --- optimizer -------------------------------------------------------------

ADAM_DEFAULTS = {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: dict,
              hyper: dict | None = None) -> tuple[list[np.ndarray], dict]:
    """One Adam update; returns new parameter arrays and state (inputs untouched)."""
    h = {**ADAM_DEFAULTS, **(hyper or {})}
    t = state.get("t", 0) + 1
    m_prev = state.get("m") or [np.zeros_like(p) for p in params]
    v_prev = state.get("v") or [np.zeros_like(p) for p in params]
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient {g.shape} vs parameter {p.shape}")
        m = h["beta1"] * m + (1 - h["beta1"]) * g
        v = h["beta2"] * v + (1 - h["beta2"]) * g * g
        m_hat = m / (1 - h["beta1"] ** t)
        v_hat = v / (1 - h["beta2"] ** t)
        new_p.append(p - h["lr"] * m_hat / (np.sqrt(v_hat) + h["eps"]))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


class Adam:
    def __init__(self, params: Iterable[Tensor], **hyper):
        self.params = list(params)
        self.hyper = {**ADAM_DEFAULTS, **hyper}
        self.state: dict = {}

    def step(self) -> None:
        new, self.state = adam_step([p.data for p in self.params], [p.grad for p in self.params],
                                    self.state, self.hyper)
        for p, arr in zip(self.params, new):
            p.data = arr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"WGCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")


def encode_checkpoint(state: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Magic, u32 version, u32 header length, JSON header, float32 LE payload."""
    names = list(state)
    header = {
        "params": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.asarray(state[n], dtype="<f4").tobytes() for n in names)
    return _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(hbytes)) + hbytes + payload


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < _CKPT_HEADER.size:
        raise ParseError("checkpoint truncated in header")
    magic, version, hlen = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ParseError(f"not a version-{CKPT_VERSION} checkpoint (magic {magic!r}, version {version})")
    start = _CKPT_HEADER.size
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"checkpoint header: {exc}") from exc
    offset = start + hlen
    state = {}
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape))
        if offset + 4 * n > len(data):
            raise ParseError(f"checkpoint payload truncated at byte {len(data)} reading {spec['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        state[spec["name"]] = arr.astype(np.float64)
        offset += 4 * n
    if offset != len(data):
        raise ParseError(f"{len(data) - offset} trailing bytes in checkpoint")
    return state, header["meta"]


def save_checkpoint(path, module: Module, meta: dict | None = None) -> None:
    data = encode_checkpoint(module.state_dict(), meta)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
