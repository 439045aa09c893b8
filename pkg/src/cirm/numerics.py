"""Small static expression graphs over float64 arrays with reverse-mode autodiff.

Graphs are built once with :class:`ExprGraph` and then evaluated against a
mapping of leaf name to array.  The op vocabulary is fixed to what the toy
reward model needs; every op has a forward kernel and a vector-Jacobian rule.
:func:`finite_difference_gradient` only ever calls forward kernels, so it can
serve as an independent check on :func:`gradient`.

Example::

    g = ExprGraph()
    w = g.leaf("w", ())
    out = g.sum(g.mul(w, w))
    gradient(g, {"w": np.array(3.0)}, ["w"], out)   # {"w": array(6.)}
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit, log_expit

from .errors import GraphError, NonFiniteError, ShapeError

__all__ = [
    "Node",
    "ExprGraph",
    "evaluate",
    "gradient",
    "finite_difference_gradient",
]


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    shape: tuple[int, ...]
    attrs: tuple = ()

    def attr(self, key):
        for k, v in self.attrs:
            if k == key:
                return v
        raise KeyError(key)


class ExprGraph:
    """An append-only DAG.  Insertion order is a valid topological order."""

    def __init__(self):
        self._nodes: dict[str, Node] = {}
        self._order: list[str] = []
        self._auto = 0

    def __len__(self):
        return len(self._order)

    def __contains__(self, name):
        return name in self._nodes

    def node(self, name: str) -> Node:
        try:
            return self._nodes[name]
        except KeyError:
            raise GraphError(f"no node named {name!r}") from None

    @property
    def order(self) -> list[str]:
        return list(self._order)

    @property
    def leaves(self) -> list[str]:
        return [n for n in self._order if self._nodes[n].op == "leaf"]

    def shape(self, name: str) -> tuple[int, ...]:
        return self.node(name).shape

    # -- construction -------------------------------------------------------

    def _add(self, op, inputs, shape, attrs=(), name=None) -> str:
        for i in inputs:
            if i not in self._nodes:
                raise GraphError(f"input {i!r} of {op} is not in the graph")
        if name is None:
            name = f"%{self._auto}:{op}"
            self._auto += 1
        elif name in self._nodes:
            raise GraphError(f"duplicate node name {name!r}")
        self._nodes[name] = Node(name, op, tuple(inputs), tuple(int(s) for s in shape), tuple(attrs))
        self._order.append(name)
        return name

    def leaf(self, name: str, shape) -> str:
        """Declare a leaf.  Re-declaring with the same shape returns the existing leaf."""
        shape = tuple(int(s) for s in shape)
        if name in self._nodes:
            node = self._nodes[name]
            if node.op != "leaf" or node.shape != shape:
                raise GraphError(f"{name!r} already declared as {node.op} {node.shape}")
            return name
        if any(s < 0 for s in shape):
            raise ShapeError(f"negative extent in leaf shape {shape}")
        return self._add("leaf", (), shape, name=name)

    def matmul(self, a, b, name=None):
        sa, sb = self.shape(a), self.shape(b)
        if len(sa) == 2 and len(sb) == 2:
            if sa[1] != sb[0]:
                raise ShapeError(f"matmul {sa} @ {sb}")
            shape = (sa[0], sb[1])
        elif len(sa) == 3 and len(sb) == 3:
            if sa[0] != sb[0] or sa[2] != sb[1]:
                raise ShapeError(f"batched matmul {sa} @ {sb}")
            shape = (sa[0], sa[1], sb[2])
        else:
            raise ShapeError(f"matmul needs two 2-D or two 3-D operands, got {sa} and {sb}")
        return self._add("matmul", (a, b), shape, name=name)

    def add(self, a, b, name=None):
        return self._add("add", (a, b), self._same(a, b, "add"), name=name)

    def mul(self, a, b, name=None):
        return self._add("mul", (a, b), self._same(a, b, "mul"), name=name)

    def _same(self, a, b, op):
        sa, sb = self.shape(a), self.shape(b)
        if sa != sb:
            raise ShapeError(f"{op} operands differ: {sa} vs {sb}")
        return sa

    def softmax(self, x, causal=False, name=None):
        s = self.shape(x)
        if len(s) < 1:
            raise ShapeError("softmax of a scalar")
        if causal and (len(s) < 2 or s[-1] != s[-2]):
            raise ShapeError(f"causal softmax needs square trailing axes, got {s}")
        return self._add("softmax", (x,), s, (("causal", bool(causal)),), name=name)

    def rms_norm(self, x, gain, eps=1e-6, name=None):
        sx, sg = self.shape(x), self.shape(gain)
        if len(sx) < 1 or sg != (sx[-1],):
            raise ShapeError(f"rms_norm gain {sg} does not match {sx}")
        return self._add("rms_norm", (x, gain), sx, (("eps", float(eps)),), name=name)

    def silu(self, x, name=None):
        return self._add("silu", (x,), self.shape(x), name=name)

    def sigmoid(self, x, name=None):
        return self._add("sigmoid", (x,), self.shape(x), name=name)

    def softplus(self, x, name=None):
        return self._add("softplus", (x,), self.shape(x), name=name)

    def embedding(self, table, ids, name=None):
        st, si = self.shape(table), self.shape(ids)
        if len(st) != 2 or len(si) != 1:
            raise ShapeError(f"embedding needs a 2-D table and 1-D ids, got {st}, {si}")
        return self._add("embedding", (table, ids), (si[0], st[1]), name=name)

    def slice(self, x, axis, start, stop, name=None):
        s = list(self.shape(x))
        if not 0 <= axis < len(s) or not 0 <= start < stop <= s[axis]:
            raise ShapeError(f"bad slice axis={axis} [{start}:{stop}] of {tuple(s)}")
        s[axis] = stop - start
        attrs = (("axis", axis), ("start", start), ("stop", stop))
        return self._add("slice", (x,), s, attrs, name=name)

    def transpose(self, x, axes=None, name=None):
        s = self.shape(x)
        if axes is None:
            axes = tuple(reversed(range(len(s))))
        axes = tuple(int(a) for a in axes)
        if sorted(axes) != list(range(len(s))):
            raise ShapeError(f"bad permutation {axes} for {s}")
        return self._add("transpose", (x,), tuple(s[a] for a in axes), (("axes", axes),), name=name)

    def reshape(self, x, shape, name=None):
        shape = tuple(int(v) for v in shape)
        if int(np.prod(shape)) != int(np.prod(self.shape(x))):
            raise ShapeError(f"cannot reshape {self.shape(x)} to {shape}")
        return self._add("reshape", (x,), shape, (("shape", shape),), name=name)

    def scale(self, x, c, name=None):
        return self._add("scale", (x,), self.shape(x), (("c", float(c)),), name=name)

    def sum(self, x, name=None):
        return self._add("sum", (x,), (), name=name)


# -- kernels -------------------------------------------------------------------
# forward(node, *inputs) -> array
# backward(node, g, out, *inputs) -> tuple of input cotangents (None = not differentiable)


def _swap(a):
    return np.swapaxes(a, -1, -2)


@functools.lru_cache(maxsize=64)
def _causal_masks(n):
    keep = np.tril(np.ones((n, n), dtype=bool))
    return np.where(keep, 0.0, -np.inf), keep.astype(np.float64)


def _softmax_fwd(node, x):
    if node.attr("causal"):
        bias, keep = _causal_masks(x.shape[-1])
        z = x - (x + bias).max(axis=-1, keepdims=True)
        np.minimum(z, 0.0, out=z)
        np.exp(z, out=z)
        z *= keep
    else:
        z = x - x.max(axis=-1, keepdims=True)
        np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _softmax_bwd(node, g, out, x):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _rms_fwd(node, x, gain):
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + node.attr("eps"))
    return x / r * gain


def _rms_bwd(node, g, out, x, gain):
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + node.attr("eps"))
    xhat = x / r
    gy = g * gain
    dx = (gy - xhat * (gy * xhat).mean(axis=-1, keepdims=True)) / r
    dgain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
    return dx, dgain


def _silu_bwd(node, g, out, x):
    s = expit(x)
    return (g * (s + x * s * (1.0 - s)),)


def _ids(ids, n):
    idx = ids.astype(np.int64)
    if not np.array_equal(idx, ids) or idx.min(initial=0) < 0 or idx.max(initial=0) >= n:
        raise ShapeError(f"embedding ids must be integers in [0, {n})")
    return idx


def _embedding_fwd(node, table, ids):
    return table[_ids(ids, table.shape[0])]


def _embedding_bwd(node, g, out, table, ids):
    dt = np.zeros_like(table)
    np.add.at(dt, _ids(ids, table.shape[0]), g)
    return dt, None


def _slice_index(node, ndim):
    idx = [slice(None)] * ndim
    idx[node.attr("axis")] = slice(node.attr("start"), node.attr("stop"))
    return tuple(idx)


def _slice_bwd(node, g, out, x):
    dx = np.zeros_like(x)
    dx[_slice_index(node, x.ndim)] = g
    return (dx,)


def _matmul_bwd(node, g, out, a, b):
    return g @ _swap(b), _swap(a) @ g


_KERNELS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (lambda n, a, b: a @ b, _matmul_bwd),
    "add": (lambda n, a, b: a + b, lambda n, g, o, a, b: (g, g)),
    "mul": (lambda n, a, b: a * b, lambda n, g, o, a, b: (g * b, g * a)),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "rms_norm": (_rms_fwd, _rms_bwd),
    "silu": (lambda n, x: x * expit(x), _silu_bwd),
    "sigmoid": (lambda n, x: expit(x), lambda n, g, o, x: (g * o * (1.0 - o),)),
    "softplus": (lambda n, x: -log_expit(-x), lambda n, g, o, x: (g * expit(x),)),
    "embedding": (_embedding_fwd, _embedding_bwd),
    "slice": (lambda n, x: x[_slice_index(n, x.ndim)].copy(), _slice_bwd),
    "transpose": (
        lambda n, x: np.transpose(x, n.attr("axes")).copy(),
        lambda n, g, o, x: (np.transpose(g, np.argsort(n.attr("axes"))),),
    ),
    "reshape": (
        lambda n, x: x.reshape(n.attr("shape")).copy(),
        lambda n, g, o, x: (g.reshape(x.shape),),
    ),
    "scale": (lambda n, x: x * n.attr("c"), lambda n, g, o, x: (g * n.attr("c"),)),
    "sum": (lambda n, x: np.asarray(x.sum()), lambda n, g, o, x: (np.full(x.shape, float(g)),)),
}


# -- evaluation -----------------------------------------------------------------


def _ancestors(graph: ExprGraph, targets: Iterable[str]) -> set[str]:
    seen: set[str] = set()
    stack = list(targets)
    while stack:
        name = stack.pop()
        if name in seen:
            continue
        seen.add(name)
        stack.extend(graph.node(name).inputs)
    return seen


def _bind(graph: ExprGraph, bindings: Mapping[str, np.ndarray], needed: set[str]):
    values = {}
    for name in graph.order:
        node = graph.node(name)
        if node.op != "leaf" or name not in needed:
            continue
        if name not in bindings:
            raise GraphError(f"unbound leaf {name!r}")
        v = np.asarray(bindings[name], dtype=np.float64)
        if v.shape != node.shape:
            raise ShapeError(f"leaf {name!r} bound to shape {v.shape}, declared {node.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"leaf {name!r} holds non-finite values")
        values[name] = v
    return values


def _finite(a: np.ndarray) -> bool:
    # a finite sum implies finite entries; only the rare overflow case pays for the full scan
    return bool(np.isfinite(a.sum())) or bool(np.isfinite(a).all())


def _forward(graph: ExprGraph, values: dict, name: str) -> np.ndarray:
    node = graph.node(name)
    out = _KERNELS[node.op][0](node, *(values[i] for i in node.inputs))
    if not _finite(out):
        raise NonFiniteError(f"non-finite value produced by {node.op} node {name!r}")
    return out


def _run(graph: ExprGraph, values: dict, names: Iterable[str]):
    with np.errstate(over="ignore", invalid="ignore"):  # reported by _forward
        for name in names:
            if graph.node(name).op != "leaf":
                values[name] = _forward(graph, values, name)
    return values


def evaluate(graph: ExprGraph, bindings: Mapping[str, np.ndarray], outputs=None) -> dict[str, np.ndarray]:
    """Evaluate every node (or just the ancestors of ``outputs``)."""
    if outputs is None:
        needed = set(graph.order)
    else:
        needed = _ancestors(graph, [outputs] if isinstance(outputs, str) else outputs)
    values = _bind(graph, bindings, needed)
    return _run(graph, values, [n for n in graph.order if n in needed])


def _check_request(graph, wrt, output):
    node = graph.node(output)
    if int(np.prod(node.shape)) != 1:
        raise ShapeError(f"output {output!r} has shape {node.shape}; a scalar is required")
    wrt = [wrt] if isinstance(wrt, str) else list(wrt)
    for w in wrt:
        if w not in graph or graph.node(w).op != "leaf":
            raise GraphError(f"{w!r} is not a leaf of the graph")
    return wrt


def gradient(graph: ExprGraph, bindings, wrt, output: str) -> dict[str, np.ndarray]:
    """Reverse-mode derivative of a scalar node with respect to leaves."""
    return value_and_gradient(graph, bindings, wrt, output)[1]


def value_and_gradient(graph: ExprGraph, bindings, wrt, output: str) -> tuple[float, dict[str, np.ndarray]]:
    """Like :func:`gradient`, also returning the output value from the same pass."""
    wrt = _check_request(graph, wrt, output)
    needed = _ancestors(graph, [output])
    order = [n for n in graph.order if n in needed]
    values = _run(graph, _bind(graph, bindings, needed), order)
    grads = {output: np.ones_like(values[output])}
    for name in reversed(order):
        node = graph.node(name)
        if node.op == "leaf" or name not in grads:
            continue
        g = grads.pop(name)
        bwd = _KERNELS[node.op][1]
        ins = [values[i] for i in node.inputs]
        with np.errstate(over="ignore", invalid="ignore"):
            cot = bwd(node, g, values[name], *ins)
        for inp, gi in zip(node.inputs, cot):
            if gi is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    out = {}
    for w in wrt:
        shape = graph.node(w).shape
        g = grads.get(w)
        out[w] = np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64).reshape(shape)
    return float(values[output].reshape(-1)[0]), out


def finite_difference_gradient(graph: ExprGraph, bindings, wrt, output: str, step: float = 1e-5):
    """Central-difference estimate of d(output)/d(leaf), one coordinate at a time.

    Only forward kernels are used.  Nodes not downstream of the perturbed leaf
    are reused from the unperturbed pass, as is everything below a direct
    consumer whose recomputed value comes out bitwise unchanged; both
    shortcuts are exact because evaluation is deterministic.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    wrt = _check_request(graph, wrt, output)
    needed = _ancestors(graph, [output])
    order = [n for n in graph.order if n in needed]
    base = _run(graph, _bind(graph, bindings, needed), order)

    result = {}
    for w in wrt:
        shape = graph.node(w).shape
        est = np.zeros(shape)
        if w not in needed:
            result[w] = est
            continue
        dirty = {w}
        for name in order:
            if any(i in dirty for i in graph.node(name).inputs):
                dirty.add(name)
        steps = [(n, graph.node(n).inputs, w in graph.node(n).inputs) for n in order if n in dirty and n != w]
        x0 = base[w]
        flat = est.reshape(-1)
        for j in range(x0.size):
            fs = []
            for sign in (1.0, -1.0):
                xp = x0.copy().reshape(-1)
                xp[j] += sign * step
                values = dict(base)
                values[w] = xp.reshape(shape)
                changed = {w}
                with np.errstate(over="ignore", invalid="ignore"):
                    for name, inputs, direct in steps:
                        if not any(i in changed for i in inputs):
                            continue
                        out = _forward(graph, values, name)
                        # e.g. an embedding row the input never reads: nothing below can move
                        if direct and np.array_equal(out, base[name]):
                            continue
                        values[name] = out
                        changed.add(name)
                fs.append(float(values[output].reshape(-1)[0]))
            flat[j] = (fs[0] - fs[1]) / (2.0 * step)
        result[w] = est
    return result
