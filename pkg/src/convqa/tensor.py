"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every operation records its parents and a backward rule on the output tensor.
``backward`` walks the resulting graph in reverse topological order (the tape)
and accumulates gradients into leaves; ``grad`` does the same walk but returns
the gradients for selected tensors without touching any ``.grad`` buffer, which
is what the adversarial perturbation code needs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ComputationError, ContractError, DimensionError

PROB_FLOOR = 1e-12

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense float64 array with an optional gradient and graph position."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
    ):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if self.requires_grad and not _parents else None
        )
        self._parents = _parents
        self._backward = _backward
        self._retain = False

    # ------------------------------------------------------------------ basics
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
        return not self._parents

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def retain_grad(self) -> "Tensor":
        """Keep this intermediate's gradient in ``.grad`` after ``backward``."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.is_leaf else None

    def backward(self) -> None:
        backward(self)

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------- tape
class Tape:
    """Operations reachable from a root, ordered so parents precede children."""

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion would overflow on long graphs
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, root: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def _scalar_seed(loss: Tensor) -> np.ndarray:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    return np.ones_like(loss.data)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    seed = _scalar_seed(loss)
    if not loss.requires_grad:
        return
    tape = Tape(loss)
    grads = tape.run(loss, seed)
    for node in tape.nodes:
        if not (node.is_leaf or node._retain):
            continue
        g = grads.get(id(node))
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g.copy() if node.grad is None else node.grad + g


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(loss)/d(input) for each input without mutating any ``.grad``."""
    seed = _scalar_seed(loss)
    if not loss.requires_grad:
        return [np.zeros_like(t.data) for t in inputs]
    grads = Tape(loss).run(loss, seed)
    return [grads.get(id(t), np.zeros_like(t.data)).copy() for t in inputs]


# --------------------------------------------------------------- arithmetic
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p
    if not np.all(np.isfinite(out)):
        raise ComputationError(f"power {p} produced non-finite values")
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dimensions must match exactly. A 1-D
    right operand is treated as a column vector and the result squeezed."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 1 and a.ndim == 2:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate on backward."""
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise ComputationError("mean over an empty axis")
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, value, a.data)
    return _result(out, (a,), lambda g: (np.where(mask, 0.0, g),))


# ------------------------------------------------------------- elementwise
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor, floor: Optional[float] = None) -> Tensor:
    """Natural log. With ``floor`` the input is clamped from below first and
    clamped entries receive no gradient; without it non-positive input raises."""
    x = a.data
    if floor is None:
        if np.any(x <= 0) or np.any(np.isnan(x)):
            raise ComputationError("log of a non-positive value")
        return _result(np.log(x), (a,), lambda g: (g / x,))
    clamped = x < floor
    safe = np.where(clamped, floor, x)
    return _result(np.log(safe), (a,), lambda g: (np.where(clamped, 0.0, g / safe),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if np.any(np.isnan(x)):
        raise ComputationError("softmax input contains NaN")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not np.all(np.isfinite(out)):
        raise ComputationError("softmax produced non-finite values (fully masked row?)")

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw)


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def bw(g):
        o = out if (axis is None or keepdims) else np.expand_dims(out, axis)
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, gg * a.data / safe, 0.0),)

    return _result(out, (a,), bw)


# ------------------------------------------------------------------ losses
def cross_entropy(p: Tensor, target: int) -> Tensor:
    """-log p[target] for a 1-D distribution, floored at ``PROB_FLOOR``."""
    n = p.shape[-1]
    if not 0 <= int(target) < n:
        raise IndexError(f"target {target} out of range for {n} classes")
    return scale(log(take(p, int(target)), floor=PROB_FLOOR), -1.0)


def kl_divergence(p, q: Tensor) -> Tensor:
    """KL(p || q) summed over all entries. ``p`` is treated as a constant."""
    p_data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if p_data.shape != q.shape:
        raise DimensionError(f"kl_divergence: shapes {p_data.shape} and {q.shape} differ")
    # same floor on both sides so KL(p, p) is exactly zero
    log_p = np.log(np.maximum(p_data, PROB_FLOOR))
    entropy_term = float((p_data * log_p).sum())
    cross = tsum(mul(Tensor(p_data), log(q, floor=PROB_FLOOR)))
    return add(scale(cross, -1.0), entropy_term)


# ----------------------------------------------------------- gradient check
def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function with respect to ``t.data``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(diff / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``."""
    loss = fn()
    analytic = grad(loss, inputs)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, numerical_grad(fn, t, step)))
    return worst
