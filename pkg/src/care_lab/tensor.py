"""Dense float64 tensors with a reverse-mode tape and the Adam optimizer.

Operations record themselves on the innermost active :class:`Graph` when at
least one input requires a gradient. Outside any ``with Graph():`` block
nothing is recorded, which is how inference and target computations run.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
_EXP_MAX = 709.0


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class DomainError(ValueError):
    """Raised when log/exp would produce non-finite values."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; every method defers to a primitive below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Node:
    __slots__ = ("kind", "inputs", "output", "vjp", "graph")

    def __init__(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable,
                 graph: "Graph"):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.graph = graph


_GRAPHS: list["Graph"] = []


class Graph:
    """Append-only tape. Nodes are appended in execution order, so the list is
    already topologically sorted."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _GRAPHS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _GRAPHS.pop()

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


class no_grad:
    """Suspend recording inside an active graph."""

    def __enter__(self):
        _GRAPHS.append(None)  # type: ignore[arg-type]
        return self

    def __exit__(self, *exc):
        _GRAPHS.pop()


def _active_graph() -> Graph | None:
    return _GRAPHS[-1] if _GRAPHS else None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(kind, inputs, out, vjp, graph)
        out._node = node
        graph.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record("mul", (a, b), ad * bd, vjp)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError(f"div: zero in denominator of shape {b.shape}")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _record("matmul", (a, b), ad @ bd, vjp)


def linear(x, w, b, apply_relu: bool = False) -> Tensor:
    """Fused ``x @ w + b`` with optional ReLU; x is (B, n), w (n, m), b (m,)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape} (bias {b.shape})")
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data
    if apply_relu:
        np.maximum(out, 0.0, out=out)

    def vjp(g):
        if apply_relu:
            g = g * (out > 0.0)
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _record("linear", (x, w, b), out, vjp)


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)
    return _record("relu", (a,), out, lambda g: (g * (out > 0.0),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _wrap(a)
    if a.data.size and np.max(a.data) > _EXP_MAX:
        raise DomainError(f"exp: argument {np.max(a.data):.4g} overflows float64")
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    if a.data.size and not np.all(a.data > 0.0):
        raise DomainError(f"log: non-positive argument (min {np.min(a.data):.4g})")
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _record("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _wrap(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(_wrap(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: empty input list")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or tuple(np.delete(t.shape, axis)) != tuple(np.delete(ref, axis)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _record("concat", ts, np.concatenate([t.data for t in ts], axis=axis),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_wrap(t) for t in tensors)
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: incompatible shapes {ts[0].shape} and {t.shape}")
    n = len(ts)
    return _record("stack", ts, np.stack([t.data for t in ts], axis=axis),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def dot(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("dot", (a, b), np.dot(ad, bd), lambda g: (g * bd, g * ad))


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (a,), out, vjp)


def gaussian_sample(mean_: Tensor, log_std: Tensor, noise) -> Tensor:
    """Reparameterized ``mean + exp(log_std) * noise``; noise is a constant."""
    mean_, log_std = _wrap(mean_), _wrap(log_std)
    eps = np.asarray(noise, dtype=DTYPE)
    if mean_.shape != log_std.shape or mean_.shape != eps.shape:
        raise ShapeError(
            f"gaussian_sample: incompatible shapes {mean_.shape} and {log_std.shape} (noise {eps.shape})")
    std_eps = np.exp(log_std.data) * eps
    return _record("gaussian_sample", (mean_, log_std), mean_.data + std_eps,
                   lambda g: (g, g * std_eps))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * mask,))


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: incompatible shapes {a.shape} and {b.shape}")
    pick_a = a.data <= b.data
    return _record("minimum", (a, b), np.where(pick_a, a.data, b.data),
                   lambda g: (g * pick_a, g * ~pick_a))


def take(a, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup); repeated indices accumulate."""
    a = _wrap(a)
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        if axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _record("take", (a,), np.take(a.data, idx, axis=axis), vjp)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice_last: range [{start}, {stop}) outside shape {a.shape}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[..., start:stop] = g
        return (out,)

    return _record("slice", (a,), a.data[..., start:stop], vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no upstream gradient. The result shares ``x``'s buffer."""
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; zero them between updates.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if graph is None:
        graph = loss._node.graph
    elif loss._node.graph is not graph:
        raise RuntimeError("backward: loss was recorded on a different graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls(m=[np.zeros_like(a, dtype=DTYPE) for a in arrays],
                   v=[np.zeros_like(a, dtype=DTYPE) for a in arrays],
                   t=0, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    step = state.lr / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: incompatible shapes {p.shape} and {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step * m / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a list of parameter tensors, reading their ``.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, betas=betas, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------------------
# finite differences


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr``, perturbed in place."""
    out = np.zeros_like(arr, dtype=DTYPE)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max|a-b| / max(max|a|, max|b|, floor): error relative to the gradient's scale."""
    a, b = np.asarray(a, DTYPE), np.asarray(b, DTYPE)
    if not a.size:
        return 0.0
    denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / denom


@dataclass
class GradCheckResult:
    max_rel_error: float
    analytic: list[np.ndarray] = field(default_factory=list)
    numeric: list[np.ndarray] = field(default_factory=list)


def gradcheck(build_loss: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5,
              floor: float = 1e-8) -> GradCheckResult:
    """Compare tape gradients of ``build_loss()`` against central differences.

    ``build_loss`` must rebuild the computation from ``leaves`` on every call.
    """
    for leaf in leaves:
        leaf.grad = None
    with Graph() as g:
        loss = build_loss()
        backward(loss, g)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def value() -> float:
        with no_grad():
            return float(build_loss().data)

    numeric = [numerical_grad(value, leaf.data, h) for leaf in leaves]
    err = max((relative_error(a, n, floor) for a, n in zip(analytic, numeric)), default=0.0)
    return GradCheckResult(err, analytic, numeric)


__all__ = [
    "Adam", "AdamState", "DomainError", "Graph", "GradCheckResult", "Node", "ShapeError", "Tensor",
    "adam_step", "add", "backward", "clip", "concat", "div", "dot", "exp", "gaussian_sample",
    "gradcheck", "linear", "log", "matmul", "mean", "minimum", "mul", "no_grad", "numerical_grad",
    "relative_error", "relu", "reshape", "scale", "slice_last", "softmax", "square", "stack",
    "stop_gradient", "sub", "sum", "take", "tanh",
]
