"""Dense float64 arrays with reverse-mode differentiation.

Every operation on a :class:`Tensor` records its parents and a closure that
pushes the output adjoint back to them.  ``Tensor.backward`` walks the
recorded nodes in reverse topological order.  :class:`DiffGraph` wraps a
Python function built from these primitives so that it can be evaluated,
differentiated and finite-difference checked by name.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "ShapeError",
    "DiffGraph",
    "GradCheckReport",
    "tensor",
    "constant",
    "make_node",
    "evaluate",
    "gradient",
    "grad_check",
    "matmul",
    "concat",
    "stack",
    "where_mask",
    "softmax",
    "log_softmax",
    "normalize",
    "layer_norm",
    "gelu",
    "sigmoid",
    "elementwise",
]


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


_state = threading.local()


def _next_node_id() -> int:
    n = getattr(_state, "counter", 0)
    _state.counter = n + 1
    return n


def _reset_node_ids() -> None:
    _state.counter = 0


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "node_id", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.node_id = _next_node_id()
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- backward ---------------------------------------------------------
    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"node {self.node_id}: backward needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        _check_broadcast(self, other, "add")
        a_shape, b_shape = self.shape, other.shape
        return make_node(self.data + other.data, (self, other),
                         lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        _check_broadcast(self, other, "sub")
        a_shape, b_shape = self.shape, other.shape
        return make_node(self.data - other.data, (self, other),
                         lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)))

    def __rsub__(self, other):
        return _lift(other) - self

    def __neg__(self):
        return make_node(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = _lift(other)
        _check_broadcast(self, other, "mul")
        a, b = self.data, other.data
        return make_node(a * b, (self, other),
                         lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        _check_broadcast(self, other, "div")
        a, b = self.data, other.data
        out = a / b
        return make_node(out, (self, other),
                         lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)))

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.data
        return make_node(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_lift(other), self)

    def __getitem__(self, idx):
        a_shape = self.shape
        try:
            out = self.data[idx]
        except IndexError as exc:
            raise ShapeError(f"node {self.node_id}: bad index {idx!r} for shape {a_shape}") from exc

        fancy = _is_fancy(idx)

        def back(g):
            full = np.zeros(a_shape)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return make_node(out, (self,), back)

    # -- elementwise maths ------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return make_node(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return make_node(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return make_node(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return make_node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sin(self):
        a = self.data
        return make_node(np.sin(a), (self,), lambda g: (g * np.cos(a),))

    def cos(self):
        a = self.data
        return make_node(np.cos(a), (self,), lambda g: (-g * np.sin(a),))

    def abs(self):
        a = self.data
        return make_node(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def relu(self):
        a = self.data
        return make_node(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),))

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a_shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a_shape).copy(),)

        return make_node(out, (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False):
        """Maximum along one axis; the adjoint goes to the first maximiser."""
        a = self.data
        idx = np.argmax(a, axis=axis)
        out = np.take_along_axis(a, np.expand_dims(idx, axis), axis)
        if not keepdims:
            out = np.squeeze(out, axis)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(a)
            np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
            return (full,)

        return make_node(out, (self,), back)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a_shape = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"node {self.node_id}: cannot reshape {a_shape} to {shape}") from exc
        return make_node(out, (self,), lambda g: (g.reshape(a_shape),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return make_node(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        return make_node(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    @property
    def T(self):
        return self.transpose()

    def take(self, indices, axis: int):
        """Gather along ``axis`` with an integer index array."""
        indices = np.asarray(indices, dtype=np.intp)
        a_shape = self.shape
        out = np.take(self.data, indices, axis=axis)

        def back(g):
            full = np.zeros(a_shape)
            moved = np.moveaxis(full, axis, 0)
            gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
            np.add.at(moved, indices, gm)
            return (full,)

        return make_node(out, (self,), back)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"node {_peek_node_id()}: {op} cannot broadcast {a.shape} with {b.shape}") from exc


def _peek_node_id() -> int:
    return getattr(_state, "counter", 0)


def make_node(data, parents: tuple, backward: Callable) -> Tensor:
    """Create a recorded node.

    ``backward`` receives the output adjoint and returns one adjoint (or
    ``None``) per parent, each shaped like that parent.
    """
    return Tensor(data, _parents=tuple(parents), _backward=backward)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def matmul(a, b) -> Tensor:
    """Batched matrix product following ``np.matmul`` broadcasting."""
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"node {_peek_node_id()}: matmul needs arrays, got {a.shape} and {b.shape}")
    vec_a, vec_b = a.ndim == 1, b.ndim == 1
    A = a.data[None, :] if vec_a else a.data
    B = b.data[:, None] if vec_b else b.data
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"node {_peek_node_id()}: matmul inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(A, B)
    if vec_a:
        out = out[..., 0, :]
    if vec_b:
        out = out[..., 0]

    def back(g):
        if vec_a:
            g = np.expand_dims(g, -2)
        if vec_b:
            g = np.expand_dims(g, -1)
        ga = np.matmul(g, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), g)
        ga = _unbroadcast(ga, A.shape)
        gb = _unbroadcast(gb, B.shape)
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return make_node(out, (a, b), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"node {_peek_node_id()}: cannot concatenate {shapes} on axis {axis}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"node {_peek_node_id()}: cannot stack {shapes}") from exc
    n = len(tensors)
    return make_node(out, tuple(tensors),
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true else ``b`` (mask is constant)."""
    a, b = _lift(a), _lift(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return make_node(out, (a, b), lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                                             _unbroadcast(np.where(mask, 0.0, g), b.shape)))


def elementwise(x: Tensor, f: Callable, df: Callable) -> Tensor:
    """Apply a scalar function with known derivative elementwise."""
    a = x.data
    return make_node(f(a), (x,), lambda g: (g * df(a),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    a = x.data
    cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * a * a)
    return make_node(a * cdf, (x,), lambda g: (g * (cdf + a * pdf),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return make_node(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale to unit L2 norm along ``axis``."""
    a = x.data
    n = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    n = np.maximum(n, eps)
    out = a / n

    def back(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / n,)

    return make_node(out, (x,), back)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    w, b = weight.data, bias.data
    out = xhat * w + b
    d = a.shape[-1]

    def back(g):
        gw = _unbroadcast(g * xhat, w.shape)
        gb = _unbroadcast(g, b.shape)
        gx_hat = g * w
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gw, gb

    return make_node(out, (x, weight, bias), back)


# ---------------------------------------------------------------------------
# Named graphs


@dataclass
class DiffGraph:
    """A differentiable computation over named leaf tensors.

    ``fn`` takes one keyword argument per leaf and returns a Tensor or a
    mapping of output names to Tensors.  ``leaves`` holds default values;
    ``trainable`` names the leaves that receive gradients (all by default).
    """

    fn: Callable[..., Tensor | Mapping[str, Tensor]]
    leaves: dict[str, np.ndarray] = field(default_factory=dict)
    trainable: set[str] | None = None

    def trainable_names(self) -> list[str]:
        names = self.leaves.keys() if self.trainable is None else self.trainable
        return sorted(names)

    def _bind(self, inputs: Mapping | None) -> dict[str, np.ndarray]:
        bound = dict(self.leaves)
        if inputs:
            bound.update({k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()})
        return bound

    def run(self, inputs: Mapping | None = None, track: bool = False):
        bound = self._bind(inputs)
        train = set(self.trainable_names()) if track else set()
        _reset_node_ids()
        leaves = {k: Tensor(v, requires_grad=k in train, name=k) for k, v in bound.items()}
        out = self.fn(**leaves)
        if isinstance(out, Tensor):
            out = {"out": out}
        return leaves, dict(out)


def evaluate(graph: DiffGraph, inputs: Mapping | None = None) -> dict[str, np.ndarray]:
    """Forward values of every graph output."""
    _, outs = graph.run(inputs)
    return {k: v.data.copy() for k, v in outs.items()}


def gradient(graph: DiffGraph, scalar_output: str = "out",
             inputs: Mapping | None = None) -> dict[str, np.ndarray]:
    """d(scalar_output)/d(leaf) for each trainable leaf."""
    leaves, outs = graph.run(inputs, track=True)
    if scalar_output not in outs:
        raise KeyError(f"graph has no output named {scalar_output!r}")
    y = outs[scalar_output]
    if y.data.size != 1:
        raise ShapeError(f"node {y.node_id}: output {scalar_output!r} is not scalar, shape {y.shape}")
    if y.requires_grad:
        y.backward()
    result = {}
    for name in graph.trainable_names():
        g = leaves[name].grad
        result[name] = np.zeros_like(leaves[name].data) if g is None else g.reshape(leaves[name].shape)
    return result


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    nonfinite: dict[str, int]
    probes: dict[str, int]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_error <= tol and not any(self.nonfinite.values())

    def __str__(self) -> str:
        lines = [f"{name:<32s} {err:.3e}  probes={self.probes[name]}"
                 + (f"  NONFINITE={self.nonfinite[name]}" if self.nonfinite[name] else "")
                 for name, err in sorted(self.errors.items())]
        return "\n".join(lines)


def grad_check(graph: DiffGraph, point: Mapping | None = None, step: float = 1e-6,
               scalar_output: str = "out", max_probes: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The per-entry error is ``|a - n| / max(1e-12, |a| + |n|)``; the report
    keeps the maximum per leaf.  ``max_probes`` limits how many entries of
    each leaf are probed (chosen at random with ``seed``).
    """
    if not step > 0:
        raise ValueError("step must be positive")
    bound = graph._bind(point)
    analytic = gradient(graph, scalar_output, bound)
    rng = np.random.default_rng(seed)

    def f(values):
        _, outs = graph.run(values)
        return float(outs[scalar_output].data.reshape(()))

    errors, nonfinite, probes = {}, {}, {}
    for name in graph.trainable_names():
        base = bound[name]
        flat_idx = np.arange(base.size)
        if max_probes is not None and base.size > max_probes:
            flat_idx = rng.choice(base.size, size=max_probes, replace=False)
        worst, bad = 0.0, 0
        a_flat = analytic[name].reshape(-1)
        for i in flat_idx:
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += step
            minus[i] -= step
            vals = dict(bound)
            vals[name] = plus.reshape(base.shape)
            fp = f(vals)
            vals[name] = minus.reshape(base.shape)
            fm = f(vals)
            num = (fp - fm) / (2.0 * step)
            a = a_flat[i]
            if not (np.isfinite(num) and np.isfinite(a)):
                bad += 1
                continue
            err = abs(a - num) / max(1e-12, abs(a) + abs(num))
            worst = max(worst, err)
        errors[name] = worst
        nonfinite[name] = bad
        probes[name] = len(flat_idx)
    return GradCheckReport(errors, nonfinite, probes)
