"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every differentiable operation appends one node to the active :class:`Graph`
(a per-thread tape).  :func:`backward` walks that tape in reverse, visiting
each node once, and accumulates gradients into leaf tensors.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> backward(sum_(w * w))
    >>> w.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeError", "no_grad", "current_graph", "forward_op", "backward",
    "sgd_step", "Adam", "clip_grad_norm", "global_grad_norm", "zero_grad", "parameter",
    "save_tensors", "load_tensors", "OPS",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "tanh", "sigmoid", "relu", "exp",
    "log", "softmax", "log_softmax", "concat", "index", "sum_", "mean", "reshape",
    "transpose", "take", "pick", "gru",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's shape rule."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class Graph:
    """Ordered record of executed differentiable operations.

    Nodes are appended as ``(result, operands, vjp)`` in execution order, so
    every operand precedes the node that consumed it.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def record(self, result: Tensor, operands: tuple[Tensor, ...], vjp: Callable) -> None:
        self.nodes.append((result, operands, vjp))

    def clear(self) -> None:
        self.nodes.clear()

    def __enter__(self):
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


_local = threading.local()


def _stack() -> list[Graph]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Graph()]
    return stack


def current_graph() -> Graph:
    return _stack()[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording on the current thread's active graph."""
    graph = current_graph()
    previous = graph.enabled
    graph.enabled = False
    try:
        yield
    finally:
        graph.enabled = previous


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, operands: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.is_leaf = True
    out.name = None
    graph = current_graph()
    out.requires_grad = graph.enabled and any(o.requires_grad for o in operands)
    if out.requires_grad:
        out.is_leaf = False
        graph.record(out, operands, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape),
                              _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.value / b.value
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.value, a.shape),
                              _unbroadcast(-g * out / b.value, b.shape)), "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _result(a.value * c, (a,), lambda g: (g * c,), "scale")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.value)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.value)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0
    return _result(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.value <= 0):
        raise FloatingPointError("log: non-positive input")
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), vjp, "log_softmax")


# -- linear algebra and structure --------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), vjp, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[x.shape for x in ts]} differ off axis {axis}")
    out = np.concatenate([t.value for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _result(out, ts, vjp, "concat")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def index(a, idx) -> Tensor:
    a = _as_tensor(a)
    try:
        out = np.array(a.value[idx])
    except IndexError as err:
        raise ShapeError(f"index: {err} for shape {a.shape}") from None
    advanced = _is_advanced(idx)

    def vjp(g):
        grad = np.zeros_like(a.value)
        if advanced:
            np.add.at(grad, idx, g)
        else:
            grad[idx] += g
        return (grad,)

    return _result(out, (a,), vjp, "index")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.array(a.value.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.value, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def take(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]`` (embedding)."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError(f"take: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"take: ids outside [0, {weight.shape[0]}) for weight {weight.shape}")

    def vjp(g):
        grad = np.zeros_like(weight.value)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (grad,)

    return _result(weight.value[ids], (weight,), vjp, "take")


def pick(a, ids) -> Tensor:
    """Gather one entry along the last axis: ``out[...] = a[..., ids[...]]``."""
    a = _as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"pick: ids shape {ids.shape} does not match {a.shape[:-1]}")
    expanded = ids[..., None]
    out = np.take_along_axis(a.value, expanded, axis=-1)[..., 0]

    def vjp(g):
        grad = np.zeros_like(a.value)
        np.put_along_axis(grad, expanded, g[..., None], axis=-1)
        return (grad,)

    return _result(out, (a,), vjp, "pick")


def gru(x, h0, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Fused GRU over a whole sequence.

    ``x`` is (B, T, I); returns every hidden state, shape (B, T, H).  Gate
    layout in the 3H axis is [reset, update, candidate].  The recurrence
    is causal: outputs at ``t`` never see later inputs.
    """
    x, h0, w_ih, w_hh, b_ih, b_hh = map(_as_tensor, (x, h0, w_ih, w_hh, b_ih, b_hh))
    if x.ndim != 3:
        raise ShapeError(f"gru: input must be (B, T, I), got {x.shape}")
    B, T, I = x.shape
    H = w_hh.shape[0]
    if (w_ih.shape != (I, 3 * H) or w_hh.shape != (H, 3 * H) or b_ih.shape != (3 * H,)
            or b_hh.shape != (3 * H,) or h0.shape != (B, H)):
        raise ShapeError(
            f"gru: shapes x={x.shape} h0={h0.shape} w_ih={w_ih.shape} w_hh={w_hh.shape} "
            f"b_ih={b_ih.shape} b_hh={b_hh.shape} do not conform")
    xs, wi, wh, bi, bh = x.value, w_ih.value, w_hh.value, b_ih.value, b_hh.value
    gi_all = xs @ wi + bi
    out = np.empty((B, T, H))
    cache = []
    h = h0.value
    for t in range(T):
        gi = gi_all[:, t]
        gh = h @ wh + bh
        rz = _sigmoid(gi[:, :2 * H] + gh[:, :2 * H])
        r, z = rz[:, :H], rz[:, H:]
        ghn = gh[:, 2 * H:]
        n = np.tanh(gi[:, 2 * H:] + r * ghn)
        h_prev = h
        h = n + z * (h_prev - n)
        out[:, t] = h
        cache.append((h_prev, r, z, n, ghn))

    def vjp(g):
        dgi_all = np.empty((B, T, 3 * H))
        dgh_all = np.empty((B, T, 3 * H))
        h_prevs = np.empty((B, T, H))
        dh_next = np.zeros((B, H))
        wh_t = np.ascontiguousarray(wh.T)
        for t in range(T - 1, -1, -1):
            h_prev, r, z, n, ghn = cache[t]
            dh = g[:, t] + dh_next
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            da_z = dh * (h_prev - n) * z * (1.0 - z)
            da_r = da_n * ghn * r * (1.0 - r)
            dgi = dgi_all[:, t]
            dgi[:, :H] = da_r
            dgi[:, H:2 * H] = da_z
            dgi[:, 2 * H:] = da_n
            dgh = dgh_all[:, t]
            dgh[:, :2 * H] = dgi[:, :2 * H]
            dgh[:, 2 * H:] = da_n * r
            h_prevs[:, t] = h_prev
            dh_next = dh * z + dgh @ wh_t
        flat_gi = dgi_all.reshape(B * T, 3 * H)
        flat_gh = dgh_all.reshape(B * T, 3 * H)
        dx = (flat_gi @ wi.T).reshape(B, T, I) if x.requires_grad else None
        dwi = xs.reshape(B * T, I).T @ flat_gi
        dwh = h_prevs.reshape(B * T, H).T @ flat_gh
        return dx, dh_next, dwi, dwh, flat_gi.sum(axis=0), flat_gh.sum(axis=0)

    return _result(out, (x, h0, w_ih, w_hh, b_ih, b_hh), vjp, "gru")


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "scale": scale,
    "matmul": matmul, "tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log,
    "softmax": softmax, "log_softmax": log_softmax, "concat": lambda *ts, axis=-1: concat(ts, axis),
    "index": index, "sum": sum_, "mean": mean, "reshape": reshape, "transpose": transpose,
    "take": take, "pick": pick, "gru": gru,
}


def forward_op(name: str, inputs: Sequence, **attrs) -> Tensor:
    """Run the registered operation ``name`` on ``inputs``."""
    try:
        fn = OPS[name]
    except KeyError:
        raise ValueError(f"unknown op {name!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **attrs)


# -- gradients and updates ---------------------------------------------------

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` and clear the tape.

    Leaves that appear in the tape but are unreachable from ``root`` receive
    zero gradients.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    graph = current_graph()
    for _, operands, _ in graph.nodes:
        for op in operands:
            if op.is_leaf and op.requires_grad and op.grad is None:
                op.grad = np.zeros_like(op.value)
    if root.is_leaf:
        if root.requires_grad:
            root.grad = (root.grad if root.grad is not None else 0.0) + np.ones_like(root.value)
        graph.clear()
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for result, operands, vjp in reversed(graph.nodes):
        g = grads.pop(id(result), None)
        if g is None:
            continue
        for op, gi in zip(operands, vjp(g)):
            if gi is None or not op.requires_grad:
                continue
            if op.is_leaf:
                op.grad = gi.copy() if op.grad is None else op.grad + gi
            else:
                key = id(op)
                grads[key] = grads[key] + gi if key in grads else gi
    graph.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def _require_grads(params: Sequence[Tensor]) -> None:
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or i} has no gradient")


def sgd_step(params: Sequence[Tensor], lr: float, clip_norm: float | None = None) -> None:
    """``p <- p - lr * grad`` for every parameter, then clear gradients."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    _require_grads(params)
    if clip_norm is not None:
        clip_grad_norm(params, clip_norm)
    for p in params:
        p.value -= lr * p.grad
        p.grad = None


class Adam:
    """Adam over a fixed parameter list; optional alternative to plain SGD."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        _require_grads(self.params)
        if self.clip_norm is not None:
            clip_grad_norm(self.params, self.clip_norm)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"adam.m.{i}"]
            self.v[i][...] = state[f"adam.v.{i}"]


def parameter(shape, rng: np.random.Generator, fan_in: int | None = None, name: str | None = None) -> Tensor:
    """Trainable tensor drawn from uniform(-r, r) with r = 1/sqrt(fan_in)."""
    shape = tuple(shape)
    fan_in = fan_in if fan_in is not None else shape[0]
    r = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-r, r, size=shape), requires_grad=True, name=name)


# -- checkpoints -------------------------------------------------------------

MAGIC = b"TCTS"
FORMAT_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    """Write named arrays as: magic, u32 version, then one record per tensor
    (u32 name length, UTF-8 name, u32 rank, u32 extents, little-endian f64 values)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, t in tensors.items():
            arr = np.asarray(t.value if isinstance(t, Tensor) else t, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return out
