"""Dense float64 tensors with reverse-mode automatic differentiation.

Inspired by micrograd-style define-by-run autodiff: every operation executed
while a tape is active records a backward closure on that tape, and
``Tape.backward`` replays the closures in reverse execution order. All values
are 64-bit floats; shapes follow numpy broadcasting with gradients summed back
to the operand shapes.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DomainError

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tape:
    """Ordered record of executed ops, enough to replay vector-Jacobian products.

    One tape is owned by exactly one thread; ops are recorded in execution
    order and visited exactly once, in reverse, during backward.
    """

    def __init__(self) -> None:
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def record(self, out: "Tensor", backward_fn: Callable[[np.ndarray], None]) -> None:
        self._ops.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate gradients of ``loss`` into every tensor that requires grad."""
        if not loss.requires_grad:
            raise ContractError("backward target does not require grad")
        loss._accum_grad(np.ones_like(loss.data))
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)


_ACTIVE_TAPE: Optional[Tape] = None


@contextmanager
def tape() -> Iterator[Tape]:
    """Activate a fresh tape for the duration of the block.

    Outside any tape, ops do not record and results never require grad, which
    doubles as inference mode for sampling.
    """
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = t = Tape()
    try:
        yield t
    finally:
        _ACTIVE_TAPE = prev


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


class Tensor:
    """A dense n-dimensional float64 array that can participate in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = "") -> None:
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False, name: str = "") -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad, name=name)

    @classmethod
    def ones(cls, *shape: int, requires_grad: bool = False, name: str = "") -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A view of the same values that does not require grad."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other): return add(self, _coerce(other))
    def __radd__(self, other): return add(_coerce(other), self)
    def __sub__(self, other): return sub(self, _coerce(other))
    def __rsub__(self, other): return sub(_coerce(other), self)
    def __mul__(self, other): return mul(self, _coerce(other))
    def __rmul__(self, other): return mul(_coerce(other), self)
    def __truediv__(self, other): return div(self, _coerce(other))
    def __rtruediv__(self, other): return div(_coerce(other), self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, _coerce(other))
    def __getitem__(self, idx): return slice_(self, idx)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: Iterable[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    t = _ACTIVE_TAPE
    if t is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        t.record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")


# -- elementwise binary ops ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g, b.shape))

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data - b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data * b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    if np.any(b.data == 0.0):
        idx = np.argwhere(b.data == 0.0)[0]
        raise DomainError(f"division by zero at index {tuple(int(i) for i in idx)}")
    out = Tensor(a.data / b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), backward)


# -- elementwise unary ops ----------------------------------------------------

def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward(g: np.ndarray) -> None:
        a._accum_grad(-g)

    return _record(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def backward(g: np.ndarray) -> None:
        a._accum_grad(g * out.data)

    return _record(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        idx = np.argwhere(a.data <= 0.0)[0]
        raise DomainError(f"log of non-positive value at index {tuple(int(i) for i in idx)}")
    out = Tensor(np.log(a.data))

    def backward(g: np.ndarray) -> None:
        a._accum_grad(g / a.data)

    return _record(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        idx = np.argwhere(a.data < 0.0)[0]
        raise DomainError(f"sqrt of negative value at index {tuple(int(i) for i in idx)}")
    out = Tensor(np.sqrt(a.data))

    def backward(g: np.ndarray) -> None:
        a._accum_grad(g * 0.5 / out.data)

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)

    def backward(g: np.ndarray) -> None:
        a._accum_grad(g * s * (1.0 - s))

    return _record(out, (a,), backward)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * s)

    def backward(g: np.ndarray) -> None:
        a._accum_grad(g * s * (1.0 + a.data * (1.0 - s)))

    return _record(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def backward(g: np.ndarray) -> None:
        a._accum_grad(g * (a.data > 0.0))

    return _record(out, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where the clamp engages."""
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data > lo) & (a.data < hi)

    def backward(g: np.ndarray) -> None:
        a._accum_grad(g * inside)

    return _record(out, (a,), backward)


# -- matmul and convolution ---------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_grad(g @ b.data.T)
        if b.requires_grad:
            b._accum_grad(a.data.T @ g)

    return _record(out, (a, b), backward)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Patch stack [B, C*k*k, Ho*Wo]; fills are contiguous (Ho,Wo) planes."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if pad:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
        xp[:, :, pad:pad + H, pad:pad + W] = x
    else:
        xp = x
    col = np.empty((B, C, k, k, Ho, Wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            col[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return col.reshape(B, C * k * k, Ho * Wo), Ho, Wo


def _col2im(col: np.ndarray, x_shape: tuple[int, ...], k: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x_shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    view = col.reshape(B, C, k, k, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += view[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of x[B,C,H,W] with w[O,C,k,k]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractError(f"conv2d expects 4-D operands, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, k, kw = w.shape
    if k != kw or k % 2 == 0:
        raise ContractError(f"kernel must be square with odd side, got {k}x{kw}")
    if Cw != C:
        raise ContractError(f"channel mismatch: input has {C}, kernel expects {Cw}")
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ContractError(
            f"non-integral output size for H={H}, W={W}, k={k}, stride={stride}, pad={pad}")
    if k == 1 and stride == 1 and pad == 0:
        col, Ho, Wo = x.data.reshape(B, C, H * W), H, W
    else:
        col, Ho, Wo = _im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(O, C * k * k)
    out_data = np.matmul(wmat[None, :, :], col)                 # [B, O, Ho*Wo]
    out = Tensor(out_data.reshape(B, O, Ho, Wo))

    def backward(g: np.ndarray) -> None:
        gmat = g.reshape(B, O, Ho * Wo)
        if w.requires_grad:
            gw = np.matmul(gmat, col.transpose(0, 2, 1)).sum(axis=0)
            w._accum_grad(gw.reshape(O, C, k, k))
        if x.requires_grad:
            gcol = np.matmul(wmat.T[None, :, :], gmat)          # [B, C*k*k, P]
            if k == 1 and stride == 1 and pad == 0:
                x._accum_grad(gcol.reshape(x.shape))
            else:
                x._accum_grad(_col2im(gcol, x.shape, k, stride, pad))

    return _record(out, (x, w), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of x[B,C,H,W]."""
    if x.data.ndim != 4:
        raise ContractError(f"upsample2x expects 4-D input, got {x.shape}")
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def backward(g: np.ndarray) -> None:
        B, C, H2, W2 = g.shape
        x._accum_grad(g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)))

    return _record(out, (x,), backward)


# -- reductions and reshapes --------------------------------------------------

def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % ndim for a in axes)
    for a in axes:
        if not 0 <= a < ndim:
            raise ContractError(f"axis {a} out of range for ndim {ndim}")
    return axes


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def backward(g: np.ndarray) -> None:
        if axes is None:
            a._accum_grad(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accum_grad(np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    if axes is None:
        count = a.data.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g: np.ndarray) -> None:
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        a._accum_grad(np.broadcast_to(g, a.shape) / count)

    return _record(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty sequence")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise ContractError("concat operands must share rank")
        for d in range(ndim):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise ContractError(
                    f"concat shapes incompatible off axis {axis}: {t.shape} vs {tensors[0].shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * ndim
                sl[axis] = slice(lo, hi)
                t._accum_grad(g[tuple(sl)])

    return _record(out, tuple(tensors), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def backward(g: np.ndarray) -> None:
        a._accum_grad(g.reshape(a.shape))

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inv = np.argsort(axes) if axes is not None else None

    def backward(g: np.ndarray) -> None:
        a._accum_grad(g.transpose(inv) if inv is not None else g.transpose())

    return _record(out, (a,), backward)


def slice_(a: Tensor, idx) -> Tensor:
    """Basic slicing; backward scatters the gradient into the sliced region."""
    out = Tensor(a.data[idx])

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        full[idx] = g.reshape(full[idx].shape)
        a._accum_grad(full)

    return _record(out, (a,), backward)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a [V, d] table by integer index array."""
    ids = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2:
        raise ContractError("embed expects a 2-D table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding index out of range: {int(ids.min())}..{int(ids.max())} "
            f"for table of {table.shape[0]} rows")
    out = Tensor(table.data[ids])

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accum_grad(full)

    return _record(out, (table,), backward)


# -- gradient checking helper ---------------------------------------------------

def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                      indices: Optional[Sequence[tuple]] = None,
                      step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at selected indices.

    Returns an array shaped like ``x`` with untested entries left at zero when
    ``indices`` is given, else the full numerical gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    if indices is None:
        indices = list(np.ndindex(*x.shape)) if x.shape else [()]
    for idx in indices:
        xp = x.copy(); xp[idx] += step
        xm = x.copy(); xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2.0 * step)
    return g
