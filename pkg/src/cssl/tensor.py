"""Dense tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result keeps a reference to its parents and a closure mapping the output
gradient to parent gradients. :func:`backward` linearises the reachable graph
into a :class:`GradTape` (parents always precede children) and sweeps it in
reverse.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for an op."""


class SingularMatrixError(ArithmeticError):
    """Matrix inverse requested for a (numerically) singular matrix."""

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class GradientError(RuntimeError):
    """Misuse of the backward pass (non-scalar loss, reused graph...)."""


def default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    Training runs in float32; gradient checks switch to float64 so that the
    central-difference oracle is not dominated by rounding.
    """
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording the graph (inference, feature extraction)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = np.asarray(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, order="C")
        out.grad = None
        out.op = op
        out._consumed = False
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GradientError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)

    def backward(g):
        return (g * c,)

    return Tensor._result(a.data * c, (a,), backward, "scale")


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def backward(g):
        return (2 * g * x,)

    return Tensor._result(x * x, (a,), backward, "square")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise FloatingPointError("sqrt: negative input")
    y = np.sqrt(a.data)

    def backward(g):
        return (g / (2 * y),)

    return Tensor._result(y, (a,), backward, "sqrt")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0

    def backward(g):
        return (g * on,)

    return Tensor._result(np.where(on, a.data, 0).astype(a.dtype), (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1 - y * y),)

    return Tensor._result(y, (a,), backward, "tanh")


# -- reductions ---------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).astype(g.dtype),)

    return Tensor._result(np.asarray(out), (a,), backward, "mean")


# -- linear algebra / shape -----------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics for 2-D and stacked (3-D) operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or apply an explicit permutation."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose: need at least 2 dims, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._result(np.transpose(a.data, axes), (a,), backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return Tensor._result(out, (a,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def gather(a: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries along ``axis``.

    A 1-D ``index`` picks the same positions everywhere (``np.take``). An index
    with the same rank as ``a`` minus the trailing axis picks per-row positions,
    e.g. ``a`` of shape (B, T, E) with ``index`` (B, k) gives (B, k, E).
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    ax = axis % a.ndim
    if index.size and (index.min() < -a.shape[ax] or index.max() >= a.shape[ax]):
        raise IndexError(f"gather: index out of range for axis {axis} of shape {a.shape}")
    shape = a.shape
    if index.ndim == 1:
        out = np.take(a.data, index, axis=ax)

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, (slice(None),) * ax + (index,), g)
            return (full,)

    else:
        if index.ndim != ax + 1 or index.shape[:ax] != shape[:ax]:
            raise DimensionError(f"gather: index shape {index.shape} does not match tensor {shape} on axis {axis}")
        full_index = index.reshape(index.shape + (1,) * (a.ndim - index.ndim))
        out = np.take_along_axis(a.data, full_index, axis=ax)

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            lead = np.indices(index.shape, sparse=True)
            np.add.at(full, tuple(lead[:ax]) + (index,), g)
            return (full,)

    return Tensor._result(out, (a,), backward, "gather")


def softmax(a: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get exactly 0."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a row has every position masked")
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(y.dtype)
        return (y * (g - inner),)

    return Tensor._result(y, (a,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    x = logits.data.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    logp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    prob = np.exp(logp)

    def backward(g):
        d = prob.copy()
        d[np.arange(n), labels] -= 1.0
        return ((g * d / n).astype(logits.dtype),)

    return Tensor._result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def inverse(a, pivot_tol: float = 1e-12) -> Tensor:
    """Inverse of a square matrix (or a stack of them) by LU with partial pivoting.

    Forward only: the result never records a backward rule. Work is done in
    float64 and cast back to the input dtype.
    """
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"inverse: expected square matrices, got shape {a.shape}")
    inv = _lu_inverse(a.data.astype(np.float64), pivot_tol)
    return Tensor(inv, dtype=a.dtype)


def _lu_inverse(mat: np.ndarray, pivot_tol: float) -> np.ndarray:
    stack = mat.reshape((-1,) + mat.shape[-2:]).copy()
    batch, n, _ = stack.shape
    scale_ = np.abs(stack).max(axis=(1, 2))
    rhs = np.broadcast_to(np.eye(n), (batch, n, n)).copy()
    rows = np.arange(batch)
    for k in range(n):
        p = k + np.abs(stack[:, k:, k]).argmax(axis=1)
        pivot = stack[rows, p, k]
        bad = np.abs(pivot) <= pivot_tol * np.maximum(scale_, 1e-300)
        if bad.any():
            b = int(np.flatnonzero(bad)[0])
            cond = float(np.linalg.cond(mat.reshape(stack.shape)[b]))
            raise SingularMatrixError(
                f"inverse: matrix {b} is singular to working precision (condition estimate {cond:.3g})", cond
            )
        swap = p != k
        if swap.any():
            idx = rows[swap]
            for arr in (stack, rhs):
                tmp = arr[idx, k].copy()
                arr[idx, k] = arr[idx, p[swap]]
                arr[idx, p[swap]] = tmp
        factors = stack[:, k + 1 :, k] / stack[:, k, k][:, None]
        stack[:, k + 1 :, :] -= factors[:, :, None] * stack[:, k, None, :]
        rhs[:, k + 1 :, :] -= factors[:, :, None] * rhs[:, k, None, :]
    # back substitution on the upper-triangular factor
    out = np.empty_like(rhs)
    for k in range(n - 1, -1, -1):
        acc = rhs[:, k, :] - np.einsum("bj,bjc->bc", stack[:, k, k + 1 :], out[:, k + 1 :, :])
        out[:, k, :] = acc / stack[:, k, k][:, None]
    return out.reshape(mat.shape)


# -- backward -------------------------------------------------------------------
@dataclass
class GradTape:
    """Topologically ordered record of the graph behind one loss."""

    nodes: list[Tensor] = field(default_factory=list)
    parents: list[tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "GradTape":
        tape = cls()
        position: dict[int, int] = {}
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in position:
                continue
            if expanded:
                position[id(node)] = len(tape.nodes)
                tape.nodes.append(node)
                tape.parents.append(tuple(position[id(p)] for p in node._parents if p.requires_grad))
                continue
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in position:
                    stack.append((p, False))
        return tape

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Returns a map from ``id(leaf)`` to its gradient. Calling twice on the same
    graph raises; rebuild the forward pass instead.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("backward: loss does not depend on any tensor requiring grad")
    if loss._consumed:
        raise GradientError("backward: graph already consumed; recompute the forward pass")
    tape = GradTape.from_output(loss)
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[-1] = np.ones_like(loss.data)
    for i in range(len(tape.nodes) - 1, -1, -1):
        node, g = tape.nodes[i], grads[i]
        if g is None or node._backward is None:
            continue
        for j, pg in zip(tape.parents[i], _parent_grads(node, g)):
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=tape.nodes[j].dtype)
            grads[j] = pg if grads[j] is None else grads[j] + pg
    result: dict[int, np.ndarray] = {}
    for node, g in zip(tape.nodes, grads):
        if node.is_leaf and g is not None:
            node.grad = g if node.grad is None else node.grad + g
            result[id(node)] = g
    for node in tape.nodes:
        node._consumed = True
    return result


def _parent_grads(node: Tensor, g: np.ndarray):
    pgs = node._backward(g)
    # parents that do not require grad were dropped from the tape
    return [pg for p, pg in zip(node._parents, pgs) if p.requires_grad]


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a tensor to a scalar tensor. The check runs in float64.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"finite_diff_check: eps must lie in [1e-5, 1e-2], got {eps}")
    with precision(np.float64):
        x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        leaf = Tensor(x0, requires_grad=True)
        out = f(leaf)
        backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
        numeric = np.empty_like(x0)
        flat = x0.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(x0)).item()
            flat[i] = orig - eps
            lo = f(Tensor(x0)).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2 * eps)
        if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
            raise FloatingPointError("finite_diff_check: non-finite value encountered")
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
