"""Replayable op records plus gradient utilities built on the tape."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import ParamSet, ShapeError, Tensor, apply_op, grad, scale, sub


@dataclass(frozen=True)
class RecordEntry:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict = field(default_factory=dict)


@dataclass
class ComputationRecord:
    """Topologically ordered list of primitive applications.

    Node ids below ``len(leaf_names) + len(constants)`` are inputs: first the
    named leaves, then constants frozen at trace time.
    """

    leaf_names: tuple[str, ...]
    constants: tuple[np.ndarray, ...]
    entries: tuple[RecordEntry, ...]
    output: int

    @classmethod
    def trace(cls, output: Tensor, leaves: Mapping[str, Tensor]) -> "ComputationRecord":
        """Capture the graph that produced ``output`` from the named ``leaves``."""
        ids: dict[int, int] = {}
        names = tuple(leaves)
        for i, name in enumerate(names):
            ids[id(leaves[name])] = i
        constants: list[np.ndarray] = []
        pending: list[tuple[Tensor, list[Tensor]]] = []

        # iterative post-order so deep graphs do not hit the recursion limit
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if id(node) not in ids:
                for p in node.parents:
                    stack.append((p, False))

        n_leaf = len(names)
        for node in order:
            if id(node) in ids:
                continue
            if node.op is None:
                ids[id(node)] = -1 - len(constants)  # placeholder, fixed below
                constants.append(node.data.copy())
            else:
                pending.append((node, list(node.parents)))
        # constants sit after the leaves
        for key, val in list(ids.items()):
            if val < 0:
                ids[key] = n_leaf + (-1 - val)
        next_id = n_leaf + len(constants)
        entries = []
        for node, parents in pending:
            ids[id(node)] = next_id
            entries.append(RecordEntry(node.op, tuple(ids[id(p)] for p in parents),
                                       next_id, dict(node.attrs)))
            next_id += 1
        return cls(names, tuple(constants), tuple(entries), ids[id(output)])


def forward_eval(record: ComputationRecord, leaves: Mapping[str, Tensor]) -> Tensor:
    """Replay ``record`` on new leaf values; gradients flow to tracked leaves."""
    values: dict[int, Tensor] = {}
    for i, name in enumerate(record.leaf_names):
        if name not in leaves:
            raise KeyError(f"forward_eval: missing leaf {name!r}")
        leaf = leaves[name]
        values[i] = leaf if isinstance(leaf, Tensor) else Tensor(leaf)
    base = len(record.leaf_names)
    for j, c in enumerate(record.constants):
        values[base + j] = Tensor(c)
    for e in record.entries:
        try:
            values[e.output] = apply_op(e.op, [values[i] for i in e.inputs], **e.attrs)
        except ShapeError as exc:
            raise ShapeError(f"forward_eval: entry {e.output} ({e.op}) failed: {exc}") from None
    return values[record.output]


def backward_grads(output: Tensor, wrt: ParamSet, create_graph: bool = True) -> ParamSet:
    """Named gradients of a scalar; unreachable parameters get zeros."""
    names = list(wrt)
    gs = grad(output, [wrt[n] for n in names], create_graph=create_graph)
    return dict(zip(names, gs))


def tracked_copy(params: ParamSet) -> ParamSet:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def hypergradient(
    inner_loss_builder: Callable[[ParamSet, ParamSet], Tensor],
    outer_loss_builder: Callable[[ParamSet], Tensor],
    theta: ParamSet,
    omega: ParamSet,
    inner_step_size: float,
) -> ParamSet:
    """d outer(theta - eta * grad_theta inner(theta, omega)) / d omega.

    Works on tracked copies, so the caller's tensors are never touched.
    """
    if not inner_step_size > 0:
        raise ValueError(f"inner_step_size must be positive, got {inner_step_size}")
    th = tracked_copy(theta)
    om = tracked_copy(omega)
    inner = inner_loss_builder(th, om)
    if inner.size != 1:
        raise ShapeError(f"inner loss must be scalar, got shape {inner.shape}")
    g = backward_grads(inner, th, create_graph=True)
    th_hat = {k: sub(th[k], scale(g[k], inner_step_size)) for k in th}
    outer = outer_loss_builder(th_hat)
    if outer.size != 1:
        raise ShapeError(f"outer loss must be scalar, got shape {outer.shape}")
    return backward_grads(outer, om, create_graph=False)


def numeric_grad(fn: Callable[[ParamSet], float], params: ParamSet, h: float) -> ParamSet:
    """Central differences of a scalar function of plain arrays."""
    base = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
            for k, v in params.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(base)
            flat[i] = orig - h
            fm = fn(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def max_rel_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    worst = 0.0
    for k in a:
        x = np.asarray(a[k], dtype=np.float64)
        y = np.asarray(b[k], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), 1e-8)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


def finite_diff_check(loss_builder: Callable[[ParamSet], Tensor], params: ParamSet,
                      h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences."""
    if not 0 < h <= 1e-2:
        raise ValueError(f"h must lie in (0, 1e-2], got {h}")
    tracked = tracked_copy(params)
    analytic = {k: v.data for k, v in
                backward_grads(loss_builder(tracked), tracked, create_graph=False).items()}

    def f(arrays):
        return loss_builder({k: Tensor(v) for k, v in arrays.items()}).item()

    return max_rel_error(analytic, numeric_grad(f, params, h))
