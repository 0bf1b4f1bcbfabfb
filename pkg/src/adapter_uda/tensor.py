"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while at least one input has
``requires_grad`` is appended to the current thread's :class:`Tape`.
:func:`backward` walks the tape in exact reverse execution order, so no
topological sort is needed.

Compute precision is a process-wide setting (``"single"`` by default);
``"double"`` exists for gradient verification::

    with precision("double"):
        ...
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, EmptyLossError, NonFiniteError, ShapeError

_DTYPES = {"single": np.float32, "double": np.float64}
_state = {"precision": "single", "debug": False}


def get_precision() -> str:
    return _state["precision"]


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    _state["precision"] = mode


def default_dtype():
    return _DTYPES[_state["precision"]]


@contextlib.contextmanager
def precision(mode: str):
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


def set_debug(flag: bool) -> None:
    """Enable a finiteness check after every forward operation."""
    _state["debug"] = bool(flag)


def debug_enabled() -> bool:
    return _state["debug"]


class Tape:
    """Ordered record of differentiable operations for one thread."""

    def __init__(self):
        self.nodes: list[tuple] = []
        self.generation = 0
        self.enabled = True

    def record(self, inputs: Sequence["Tensor"], output: "Tensor", grad_fn: Callable):
        self.nodes.append((inputs, output, grad_fn))

    def reset(self) -> None:
        self.nodes.clear()
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if _state["debug"]:
        _check_finite(data, op)
    tape = get_tape()
    track = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        tape.record(tuple(inputs), out, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    def grad_fn(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(g, sb) if b.requires_grad else None,
        )

    return _make(out, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    def grad_fn(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(-g, sb) if b.requires_grad else None,
        )

    return _make(out, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out.astype(a.dtype, copy=False), (a, b), grad_fn, "mul")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU: ``x * Phi(x)``."""
    xd = x.data
    return _make(kernels.gelu_forward(xd), (x,), lambda g: (kernels.gelu_backward(xd, g),), "gelu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep, dtype=x.dtype))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` of a 2-D tensor (index may repeat)."""
    if x.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {x.shape}")
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    out = x.data[index]
    flat = index.reshape(-1)
    hdim = x.shape[1]

    def grad_fn(g):
        return (kernels.scatter_add_rows(n, flat, g.reshape(-1, hdim)),)

    return _make(out, (x,), grad_fn, "take_rows")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = take_rows(weight, ids.reshape(-1))
    return reshape(out, ids.shape + (weight.shape[1],))


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """``x`` indexed by a single integer along ``axis`` (that axis is dropped)."""
    shape = x.shape
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    sl = tuple(sl)

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[sl]), (x,), grad_fn, "select")


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return _make(out, (x,), grad_fn, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[1],))


# ---------------------------------------------------------------- normalizers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    mshape = moved.shape
    y = kernels.softmax_forward(moved.reshape(-1, mshape[-1])).reshape(mshape)

    def grad_fn(g):
        gm = np.moveaxis(g, axis, -1).reshape(-1, mshape[-1])
        gx = kernels.softmax_backward(y.reshape(-1, mshape[-1]), gm).reshape(mshape)
        return (np.moveaxis(gx, -1, axis),)

    return _make(np.moveaxis(y, -1, axis), (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    h = x.shape[-1]
    if h < 2:
        raise ShapeError(f"layer_norm needs a trailing dimension >= 2, got {x.shape}")
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match {x.shape}")
    shape = x.shape
    y, xhat, rstd = kernels.layer_norm_forward(x.data.reshape(-1, h), gamma.data, beta.data, eps)
    gd = gamma.data

    def grad_fn(g):
        gx, gg, gb = kernels.layer_norm_backward(g.reshape(-1, h), xhat, rstd, gd)
        return gx.reshape(shape), (gg if gamma.requires_grad else None), (gb if beta.requires_grad else None)

    return _make(y.reshape(shape), (x, gamma, beta), grad_fn, "layer_norm")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked rows.

    ``logits`` is ``[N, C]``; ``mask`` (boolean ``[N]``) selects the rows that
    contribute. Masked-out rows get zero gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {targets.shape[0]} targets")
    weights = np.ones(n, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=bool).astype(logits.dtype)
    count = float(weights.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: every position is masked")
    live = weights > 0
    bad = live & ((targets < 0) | (targets >= c))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ContractError(f"target {targets[i]} at row {i} outside [0, {c})")
    safe_t = np.where(live, targets, 0)
    total, probs = kernels.cross_entropy_forward(logits.data, safe_t, weights)
    loss = np.asarray(total / count, dtype=logits.dtype)

    def grad_fn(g):
        return (kernels.cross_entropy_backward(probs, safe_t, weights, float(g) / count),)

    return _make(loss, (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    The tape is consumed (reset) afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = get_tape()
    loss.grad = np.ones_like(loss.data)
    for inputs, output, grad_fn in reversed(tape.nodes):
        g = output.grad
        if g is None:
            continue
        grads = grad_fn(g)
        for t, gi in zip(inputs, grads):
            if not t.requires_grad or gi is None:
                continue
            gi = np.asarray(gi, dtype=t.dtype)
            if t.grad is None:
                t.grad = gi.copy() if gi.base is not None or not gi.flags.owndata else gi
            else:
                t.grad = t.grad + gi
        if output is not loss:
            output.grad = None
    tape.reset()
