"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation records a :class:`Node` holding references to
its inputs and a closure that maps the upstream gradient to input gradients.
Nodes carry a global sequence number, so a backward pass can visit them in
exact reverse recording order.
"""

from __future__ import annotations

import itertools
import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_sequence = itertools.count()
_debug = False


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def set_debug(enabled: bool) -> None:
    """Enable finiteness assertions on every forward result."""
    global _debug
    _debug = bool(enabled)


class Node:
    """One recorded operation: inputs, output and a backward rule."""

    __slots__ = ("seq", "inputs", "backward_fn", "op")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    """N-d real array with optional gradient participation.

    Args:
        data: array-like; converted to ``dtype`` (float32 unless given or
            unless ``data`` is already a floating numpy array).
        requires_grad: whether gradients should be accumulated into ``grad``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable tensor with a dotted name assigned by its owning module."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and register its backward rule.

    ``backward_fn(grad)`` must return one gradient (or ``None``) per input.
    No node is recorded when no input requires a gradient.
    """
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        out._node = Node(op, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------


def _check_binary(a: Tensor, b: Tensor, op: str) -> bool:
    """Return True when ``b`` is broadcast over the channel axis of ``a``."""
    if a.shape == b.shape:
        return False
    if (
        a.ndim >= 3
        and a.ndim == b.ndim
        and b.shape[-3] == 1
        and a.shape[:-3] == b.shape[:-3]
        and a.shape[-2:] == b.shape[-2:]
    ):
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_channels(grad: np.ndarray) -> np.ndarray:
    return grad.sum(axis=-3, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_binary(a, b, "add")

    def bw(g):
        return g, (_reduce_channels(g) if bcast else g)

    return record("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_binary(a, b, "sub")

    def bw(g):
        return g, -(_reduce_channels(g) if bcast else g)

    return record("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        gb = g * ad
        return g * bd, (_reduce_channels(gb) if bcast else gb)

    return record("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    return record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    # saturated logits would round to exactly 0 or 1; keep the open interval
    fi = np.finfo(a.dtype)
    np.clip(y, fi.tiny, 1 - fi.epsneg, out=y)
    return record("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch one of ``add``, ``mul``, ``relu``, ``sigmoid`` by name."""
    binary = {"add": add, "mul": mul, "sub": sub}
    unary = {"relu": relu, "sigmoid": sigmoid}
    if kind in binary:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# reductions and structural operations
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return record(
        "sum",
        np.asarray(a.data.sum(), dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g, dtype=dtype),),
    )


def mean_all(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.data.size
    return record(
        "mean",
        np.asarray(a.data.mean(), dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=dtype),),
    )


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis -3)."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:-3] != ref[:-3] or p.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: cannot join {ref} with {p.shape}")
    if len(parts) == 1:
        return record("concat", parts[0].data.copy(), parts, lambda g: (g,))
    bounds = np.cumsum([0] + [p.shape[-3] for p in parts])

    def bw(g):
        return tuple(g[..., bounds[i] : bounds[i + 1], :, :] for i in range(len(parts)))

    return record("concat", np.concatenate([p.data for p in parts], axis=-3), parts, bw)


def crop_spatial(a: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` window of the last two axes."""
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., :height, :width] = g
        return (full,)

    return record("crop", np.ascontiguousarray(a.data[..., :height, :width]), (a,), bw)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


def _collect(root: Tensor) -> list:
    nodes, seen, stack = [], set(), [root]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append((node, t))
        stack.extend(node.inputs)
    nodes.sort(key=lambda item: item[0].seq, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Leaves are tensors with ``requires_grad`` and no recording node (model
    parameters, user inputs). Intermediate gradients are not retained.
    """
    if loss.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    for node, out in _collect(loss):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-4) -> float:
    """Compare analytic and central-difference gradients of scalar ``f`` at ``x``.

    Runs in float64. Returns the maximum over elements of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    out = f(xt)
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x0, dtype=np.float64)).item()
        flat[i] = orig - h
        fm = f(Tensor(x0, dtype=np.float64)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    return _max_rel_error(analytic, numeric)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-6,
    max_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Finite-difference check of ``loss_fn`` against several parameters at once.

    Parameters must already hold float64 data. When ``max_per_param`` is set,
    only that many randomly chosen entries of each parameter are perturbed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        a_sel, n_sel = [], []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            a_sel.append(analytic.reshape(-1)[i])
            n_sel.append((fp - fm) / (2 * h))
        worst = max(worst, _max_rel_error(np.array(a_sel), np.array(n_sel)))
    return worst


def _max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
