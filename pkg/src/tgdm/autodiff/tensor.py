"""Dense float64 tensors with a reverse-mode tape that can be differentiated twice.

Every backward rule is written in terms of the same primitive ops used in the
forward pass, so with ``create_graph=True`` the gradients are ordinary graph
nodes and can be differentiated again (needed for one-step hypergradients).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

ParamSet = dict  # ordered name -> Tensor mapping

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def enable_grad(flag: bool = True):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "parents", "attrs", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.attrs: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# op registry: forward kernels on ndarrays, backward rules on Tensors

_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _register(name: str, forward: Callable, backward: Callable) -> None:
    _FORWARD[name] = forward
    _BACKWARD[name] = backward


def apply_op(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run a primitive op and record it on the tape when grad mode is on."""
    try:
        value = _FORWARD[op](*[t.data for t in inputs], **attrs)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise ShapeError(f"{op}: incompatible shapes {shapes}: {exc}") from None
    out = Tensor(value)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(inputs)
        out.attrs = attrs
    return out


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return reshape(g, shape)


def _bcast_check(a: np.ndarray, b: np.ndarray):
    np.broadcast_shapes(a.shape, b.shape)


# elementwise binary ------------------------------------------------------

def _add_f(a, b):
    _bcast_check(a, b)
    return a + b


def _add_b(out, g, needs):
    a, b = out.parents
    return (_sum_to(g, a.shape) if needs[0] else None,
            _sum_to(g, b.shape) if needs[1] else None)


def _sub_f(a, b):
    _bcast_check(a, b)
    return a - b


def _sub_b(out, g, needs):
    a, b = out.parents
    return (_sum_to(g, a.shape) if needs[0] else None,
            _sum_to(scale(g, -1.0), b.shape) if needs[1] else None)


def _mul_f(a, b):
    _bcast_check(a, b)
    return a * b


def _mul_b(out, g, needs):
    a, b = out.parents
    return (_sum_to(mul(g, b), a.shape) if needs[0] else None,
            _sum_to(mul(g, a), b.shape) if needs[1] else None)


_register("add", _add_f, _add_b)
_register("sub", _sub_f, _sub_b)
_register("mul", _mul_f, _mul_b)


def add(a, b) -> Tensor:
    return apply_op("add", (as_tensor(a), as_tensor(b)))


def sub(a, b) -> Tensor:
    return apply_op("sub", (as_tensor(a), as_tensor(b)))


def mul(a, b) -> Tensor:
    return apply_op("mul", (as_tensor(a), as_tensor(b)))


# scalar multiply and power ----------------------------------------------

_register("scale", lambda a, c: a * c, lambda out, g, needs: (scale(g, out.attrs["c"]),))


def scale(a, c: float) -> Tensor:
    return apply_op("scale", (as_tensor(a),), c=float(c))


def _pow_b(out, g, needs):
    (a,) = out.parents
    p = out.attrs["p"]
    return (mul(g, scale(power(a, p - 1.0), p)),)


_register("pow", lambda a, p: np.power(a, p), _pow_b)


def power(a, p: float) -> Tensor:
    return apply_op("pow", (as_tensor(a),), p=float(p))


# matmul / shape ops -------------------------------------------------------

def _matmul_f(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError("matmul needs [m,k] @ [k,n]")
    return a @ b


def _matmul_b(out, g, needs):
    a, b = out.parents
    return (matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None)


_register("matmul", _matmul_f, _matmul_b)
_register("transpose", lambda a: a.T, lambda out, g, needs: (transpose(g),))
_register("reshape", lambda a, shape: a.reshape(shape),
          lambda out, g, needs: (reshape(g, out.parents[0].shape),))
_register("broadcast_to", lambda a, shape: np.broadcast_to(a, shape),
          lambda out, g, needs: (_sum_to(g, out.parents[0].shape),))


def matmul(a, b) -> Tensor:
    return apply_op("matmul", (as_tensor(a), as_tensor(b)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.shape}")
    return apply_op("transpose", (a,))


def reshape(a, shape) -> Tensor:
    return apply_op("reshape", (as_tensor(a),), shape=tuple(int(s) for s in shape))


def broadcast_to(a, shape) -> Tensor:
    return apply_op("broadcast_to", (as_tensor(a),), shape=tuple(int(s) for s in shape))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sum_b(out, g, needs):
    (a,) = out.parents
    axes = _norm_axis(out.attrs["axis"], a.ndim)
    if not out.attrs["keepdims"]:
        kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
        g = reshape(g, kept)
    return (broadcast_to(g, a.shape),)


def _mean_b(out, g, needs):
    (a,) = out.parents
    axes = _norm_axis(out.attrs["axis"], a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if not out.attrs["keepdims"]:
        kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
        g = reshape(g, kept)
    return (broadcast_to(scale(g, 1.0 / count), a.shape),)


_register("sum", lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims), _sum_b)
_register("mean", lambda a, axis, keepdims: np.mean(a, axis=axis, keepdims=keepdims), _mean_b)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply_op("sum", (as_tensor(a),), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply_op("mean", (as_tensor(a),), axis=axis, keepdims=keepdims)


def _concat_f(*arrays, axis):
    return np.concatenate(arrays, axis=axis)


def _concat_b(out, g, needs):
    axis = out.attrs["axis"]
    grads = []
    start = 0
    for p, need in zip(out.parents, needs):
        stop = start + p.shape[axis]
        grads.append(slice_axis(g, axis, start, stop) if need else None)
        start = stop
    return tuple(grads)


_register("concat", _concat_f, _concat_b)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    return apply_op("concat", ts, axis=axis % ts[0].ndim)


def _slice_f(a, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return a[tuple(idx)]


def _slice_b(out, g, needs):
    a = out.parents[0]
    axis, start, stop = out.attrs["axis"], out.attrs["start"], out.attrs["stop"]
    return (pad_axis(g, axis, start, a.shape[axis] - stop),)


def _pad_f(a, axis, before, after):
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    return np.pad(a, widths)


def _pad_b(out, g, needs):
    a = out.parents[0]
    before = out.attrs["before"]
    return (slice_axis(g, out.attrs["axis"], before, before + a.shape[out.attrs["axis"]]),)


_register("slice", _slice_f, _slice_b)
_register("pad", _pad_f, _pad_b)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    return apply_op("slice", (a,), axis=axis % a.ndim, start=int(start), stop=int(stop))


def pad_axis(a, axis: int, before: int, after: int) -> Tensor:
    a = as_tensor(a)
    return apply_op("pad", (a,), axis=axis % a.ndim, before=int(before), after=int(after))


# nonlinearities -------------------------------------------------------------

def _relu_b(out, g, needs):
    (a,) = out.parents
    # derivative at exactly 0 is taken as 0
    return (mul(g, Tensor((a.data > 0).astype(np.float64))),)


def _abs_b(out, g, needs):
    (a,) = out.parents
    return (mul(g, Tensor(np.sign(a.data))),)


def _sigmoid_f(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sigmoid_b(out, g, needs):
    return (mul(g, mul(out, sub(1.0, out))),)


def _softmax_f(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_b(out, g, needs):
    inner = tsum(mul(g, out), axis=-1, keepdims=True)
    return (mul(out, sub(g, inner)),)


def _log_f(a):
    if np.any(a <= 0):
        raise ValueError("log of non-positive value")
    return np.log(a)


def _log_b(out, g, needs):
    return (mul(g, power(out.parents[0], -1.0)),)


def _rownorm_f(a, eps):
    n = np.sqrt(np.sum(a * a, axis=-1, keepdims=True) + eps)
    return a / n


def _rownorm_b(out, g, needs):
    (a,) = out.parents
    eps = out.attrs["eps"]
    inv = power(add(tsum(mul(a, a), axis=-1, keepdims=True), eps), -0.5)
    proj = tsum(mul(g, out), axis=-1, keepdims=True)
    return (mul(inv, sub(g, mul(out, proj))),)


_register("relu", lambda a: np.maximum(a, 0.0), _relu_b)
_register("abs", np.abs, _abs_b)
_register("sigmoid", _sigmoid_f, _sigmoid_b)
_register("softmax", _softmax_f, _softmax_b)
_register("log", _log_f, _log_b)
_register("row_normalize", _rownorm_f, _rownorm_b)


def relu(a) -> Tensor:
    return apply_op("relu", (as_tensor(a),))


def tabs(a) -> Tensor:
    return apply_op("abs", (as_tensor(a),))


def sigmoid(a) -> Tensor:
    return apply_op("sigmoid", (as_tensor(a),))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    return apply_op("softmax", (as_tensor(a),))


def log(a) -> Tensor:
    return apply_op("log", (as_tensor(a),))


def row_normalize(a, eps: float = 1e-12) -> Tensor:
    return apply_op("row_normalize", (as_tensor(a),), eps=float(eps))


def _ce_f(logits, labels):
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects [batch, classes] logits")
    lab = np.asarray(labels)
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    return np.mean(lse - logits[np.arange(len(lab)), lab])


def _ce_b(out, g, needs):
    (z,) = out.parents
    labels = np.asarray(out.attrs["labels"])
    onehot = np.zeros(z.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    diff = sub(softmax(z), Tensor(onehot))
    return (mul(diff, scale(g, 1.0 / z.shape[0])),)


_register("cross_entropy", _ce_f, _ce_b)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` [B, C] against integer labels."""
    logits = as_tensor(logits)
    labels = tuple(int(y) for y in np.asarray(labels).reshape(-1))
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {len(labels)} labels")
    if labels and (min(labels) < 0 or max(labels) >= logits.shape[1]):
        raise ValueError(f"cross_entropy: label out of range [0, {logits.shape[1]})")
    return apply_op("cross_entropy", (logits,), labels=labels)


PRIMITIVES = tuple(_FORWARD)


# --------------------------------------------------------------------------
# reverse sweep

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that ``output`` does not depend on get a zero gradient. With
    ``create_graph`` the returned gradients stay on the tape.
    """
    if output.size != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
    targets = {id(t) for t in wrt}
    order = _topo(output)
    relevant: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))

    grads: dict[int, Tensor] = {}
    with enable_grad(create_graph):
        if id(output) in relevant:
            grads[id(output)] = Tensor(np.ones(output.shape))
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.op is None:
                continue
            needs = tuple(id(p) in relevant for p in node.parents)
            if not any(needs):
                continue
            parent_grads = _BACKWARD[node.op](node, g, needs)
            for p, pg, need in zip(node.parents, parent_grads, needs):
                if not need or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros(t.shape)))
    return out
