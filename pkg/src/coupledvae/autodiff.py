"""Reverse-mode differentiation over numpy arrays.

Every op builds a :class:`Tensor` that remembers its parents and a backward
rule mapping the output adjoint to one adjoint per parent.  ``backward`` walks
the graph in reverse topological order and stores adjoints on every reachable
node, intermediates included, so gradients with respect to activations (the
encoded text, the decoding signal) are as easy to read as parameter gradients.

All data is float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

__all__ = [
    "GraphError",
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "grad_wrt",
    "vjp",
    "jacobian",
    "concat",
    "stack",
    "softmax",
    "log_softmax",
    "embedding",
    "l2_norm",
    "maximum",
    "detach",
    "log_bessel_i",
]

_GRAD_ENABLED = True


class GraphError(ValueError):
    """Raised when a graph cannot be built or differentiated as requested."""


@contextlib.contextmanager
def no_grad():
    """Build values without recording parents or backward rules."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A node in the computation graph: value, adjoint, parents, producing op."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward_fn: BackwardFn, op: str) -> "Tensor":
        """Create an op output; records the tape entry only when grad is enabled."""
        out = cls.__new__(cls)
        out.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
        else:
            out.requires_grad = False
            out.parents = ()
            out.backward_fn = None
        return out

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def backward(self, retain: bool = False) -> None:
        backward(self, retain=retain)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor.from_op(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor.from_op(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor.from_op(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self, other

        def bw(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor.from_op(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise GraphError("tensor exponents are not supported; use exp/log")
        a = self

        def bw(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor.from_op(a.data**exponent, (a,), bw, "pow")

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self, other
        if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise GraphError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def bw(g):
            ga = g @ b.data.T
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return Tensor.from_op(a.data @ b.data, (a, b), bw, "matmul")

    def __getitem__(self, index):
        a = self
        index = _unwrap_index(index)

        def bw(g):
            out = np.zeros_like(a.data)
            np.add.at(out, index, g)
            return (out,)

        return Tensor.from_op(np.array(a.data[index], dtype=np.float64), (a,), bw, "getitem")

    # -- elementwise ------------------------------------------------------
    def tanh(self):
        y = np.tanh(self.data)
        return Tensor.from_op(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self):
        y = _sigmoid(self.data)
        return Tensor.from_op(y, (self,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def exp(self):
        y = np.exp(self.data)
        return Tensor.from_op(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        x = self.data
        return Tensor.from_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor.from_op(y, (self,), lambda g: (g * 0.5 / y,), "sqrt")

    def square(self):
        x = self.data
        return Tensor.from_op(x * x, (self,), lambda g: (2.0 * g * x,), "square")

    def softplus(self):
        x = self.data
        y = np.logaddexp(0.0, x)
        return Tensor.from_op(y, (self,), lambda g: (g * _sigmoid(x),), "softplus")

    # -- reductions and shape ---------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor.from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def broadcast_to(self, shape):
        a = self
        return Tensor.from_op(
            np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast"
        )


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unwrap_index(index):
    if isinstance(index, Tensor):
        return index.data.astype(np.int64)
    if isinstance(index, tuple):
        return tuple(i.data.astype(np.int64) if isinstance(i, Tensor) else i for i in index)
    return index


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    if g.shape != shape:
        raise GraphError(f"cannot reduce adjoint of shape {g.shape} to {shape}")
    return g


# -- free-function primitives --------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise GraphError(f"concat shape mismatch: {tensors[0].shape} vs {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise GraphError(f"stack shape mismatch: {tensors[0].shape} vs {t.shape}")

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor.from_op(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(y, (x,), bw, "log_softmax")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise GraphError(f"embedding ids out of range for table of shape {weight.shape}")

    def bw(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor.from_op(weight.data[ids], (weight,), bw, "embedding")


def l2_norm(x: Tensor, axis: int | None = -1, keepdims: bool = False) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * x.data / n,)

    out = n if keepdims else (n.reshape(()) if axis is None else np.squeeze(n, axis=axis))
    return Tensor.from_op(out, (x,), bw, "l2_norm")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; the floor is a constant.  Ties route the adjoint to x."""
    keep = x.data >= floor
    return Tensor.from_op(np.maximum(x.data, floor), (x,), lambda g: (g * keep,), "maximum")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _log_bessel_series(order: float, kappa: np.ndarray) -> np.ndarray:
    """log I_order(kappa) by summing the power series in log space."""
    kappa = np.asarray(kappa, dtype=np.float64)
    flat = kappa.reshape(-1)
    if flat.size == 0:
        return kappa.copy()
    # terms peak near m = k/2; beyond this bound they sit below 1e-12 of the peak
    k_max = float(flat.max())
    m_max = int(k_max / 2.0 + 12.0 * np.sqrt(k_max + 1.0) + 40)
    m = np.arange(m_max + 1, dtype=np.float64)
    logt = (
        (2.0 * m[None, :] + order) * np.log(flat[:, None] / 2.0)
        - gammaln(m + 1.0)[None, :]
        - gammaln(m + order + 1.0)[None, :]
    )
    return logsumexp(logt, axis=1).reshape(kappa.shape)


def log_bessel_i(order: float, kappa: Tensor) -> Tensor:
    """log of the modified Bessel function of the first kind, differentiable in kappa.

    d/dk log I_v(k) = I_{v+1}(k) / I_v(k) + v / k.
    """
    kappa = _lift(kappa)
    shape = kappa.shape
    val = _log_bessel_series(order, kappa.data).reshape(shape)

    def bw(g):
        up = _log_bessel_series(order + 1.0, kappa.data).reshape(shape)
        return (g * (np.exp(up - val) + order / kappa.data),)

    return Tensor.from_op(val, (kappa,), bw, "log_bessel_i")


# -- graph traversal -----------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every parent ahead of its children."""
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


def _propagate(root: Tensor, seed: np.ndarray, order: list[Tensor], active: set[int] | None = None) -> dict[int, np.ndarray]:
    adj: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(g)
        for p, gp in zip(node.parents, grads):
            if gp is None or not p.requires_grad:
                continue
            if active is not None and id(p) not in active:
                continue
            if gp.shape != p.shape:
                raise GraphError(f"backward rule of {node.op} returned {gp.shape} for parent {p.shape}")
            prev = adj.get(id(p))
            adj[id(p)] = gp if prev is None else prev + gp
    return adj


def _depends_on(order: list[Tensor], targets: Iterable[Tensor]) -> set[int]:
    """ids of nodes on some path from a target to the root (targets included)."""
    marked = {id(t) for t in targets}
    for node in order:
        if id(node) not in marked and any(id(p) in marked for p in node.parents):
            marked.add(id(node))
    return marked


def backward(root: Tensor, retain: bool = False) -> None:
    """Populate ``.grad`` on every node reachable from a scalar ``root``.

    Without ``retain`` previous adjoints on the reachable nodes are discarded
    first; with it the new adjoints are added on top.
    """
    if root.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    if not retain:
        for node in order:
            node.grad = None
    adj = _propagate(root, np.ones_like(root.data), order)
    for node in order:
        g = adj.get(id(node))
        if g is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            continue
        # adjoint arrays may alias each other; treat .grad as read-only
        node.grad = g if node.grad is None else node.grad + g


def vjp(output: Tensor, seed: np.ndarray, node: Tensor) -> tuple[np.ndarray, bool]:
    """Vector-Jacobian product seed^T d(output)/d(node), leaving ``.grad`` untouched."""
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise GraphError(f"seed shape {seed.shape} does not match output shape {output.shape}")
    if output is node:
        return seed.copy(), True
    order = _topo_order(output)
    active = _depends_on(order, [node])
    if id(output) not in active:
        return np.zeros_like(node.data), False
    adj = _propagate(output, seed, order, active)
    g = adj.get(id(node))
    if g is None:
        return np.zeros_like(node.data), False
    return g, True


def grad_wrt(root: Tensor, node: Tensor) -> tuple[np.ndarray, bool]:
    """d(root)/d(node) for a scalar root, computed in an isolated pass.

    Returns ``(gradient, reachable)``; an independent node yields zeros and
    ``reachable=False``.
    """
    if root.data.size != 1:
        raise GraphError(f"grad_wrt needs a scalar root, got shape {root.shape}")
    return vjp(root, np.ones_like(root.data), node)


def jacobian(output: Tensor, node: Tensor) -> np.ndarray:
    """Dense m x n Jacobian of flattened ``output`` w.r.t. flattened ``node``."""
    m, n = output.size, node.size
    if m > 1024 or n > 1024 * 64:
        raise GraphError(f"jacobian too large for dense extraction: {m} x {n}")
    order = _topo_order(output)
    active = _depends_on(order, [node])
    jac = np.zeros((m, n))
    if id(output) not in active and output is not node:
        return jac
    for i in range(m):
        seed = np.zeros(m)
        seed[i] = 1.0
        seed = seed.reshape(output.shape)
        if output is node:
            jac[i] = seed.ravel()
            continue
        g = _propagate(output, seed, order, active).get(id(node))
        if g is not None:
            jac[i] = g.ravel()
    return jac
