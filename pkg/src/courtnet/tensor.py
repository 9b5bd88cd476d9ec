"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation is recorded when it executes.  Calling
:meth:`Tensor.backward` collects the records reachable from the output into a
:class:`Tape` ordered by execution and replays them in exact reverse.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_AXES = 4

_sequence = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Backward was requested on a consumed or currently executing graph."""


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference, parameter updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Record:
    __slots__ = ("seq", "op", "inputs", "output_id", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.output_id = 0
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """n-dimensional float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_record", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise ShapeError(f"tensors support at most {MAX_AXES} axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._record: _Record | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- backward -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into the ``grad`` of every reachable leaf."""
        Tape.from_output(self).backward(grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Execution-ordered records for one forward graph.

    Built from an output tensor; ``backward`` walks the records newest first.
    A graph may be differentiated once; its saved context is released after.
    """

    def __init__(self, output: Tensor, records: list[_Record]):
        self.output = output
        self.records = records
        self._running = False

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        found: dict[int, _Record] = {}
        stack = [output]
        seen: set[int] = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            rec = t._record
            if rec is None:
                continue
            if rec.consumed:
                raise TapeError(f"graph through '{rec.op}' was already differentiated")
            found[rec.seq] = rec
            stack.extend(rec.inputs)
        records = [found[k] for k in sorted(found)]
        return cls(output, records)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, grad=None) -> None:
        if self._running:
            raise TapeError("backward is not re-entrant")
        out = self.output
        if not out.requires_grad:
            raise TapeError("output does not require grad")
        if grad is None:
            if out.size != 1:
                raise ShapeError("implicit seed gradient only for single-element outputs")
            grad = np.ones_like(out.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != out.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != {out.shape}")
        self._running = True
        try:
            if out._record is None:
                _accumulate_leaf(out, grad)
                return
            grads: dict[int, np.ndarray] = {id(out): grad}
            for rec in reversed(self.records):
                if rec.consumed:
                    raise TapeError(f"graph through '{rec.op}' was already differentiated")
                g = grads.pop(rec.output_id, None)
                rec.consumed = True
                fn, inputs = rec.backward_fn, rec.inputs
                rec.backward_fn, rec.inputs = None, ()
                if g is None:
                    continue
                in_grads = fn(g)
                for t, gi in zip(inputs, in_grads):
                    if gi is None or not t.requires_grad:
                        continue
                    if t._record is None:
                        _accumulate_leaf(t, gi)
                    else:
                        prev = grads.get(id(t))
                        grads[id(t)] = gi if prev is None else prev + gi
        finally:
            self._running = False


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        rec = _Record(op, tuple(inputs), backward_fn)
        rec.output_id = id(out)
        out._record = rec
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = _as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power takes a constant exponent")
    p = float(exponent)
    out = np.power(a.data, p)

    def backward(g):
        if p == 0.0:
            return (np.zeros_like(a.data),)
        return (g * p * np.power(a.data, p - 1.0),)

    return _emit("pow", out, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)) without overflow; its derivative is sigmoid(a)."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _emit("softplus", out, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).

    Evaluated as x * sigmoid(2u) with u the tanh argument, which is the same
    function but needs one exp instead of a slower tanh.
    """
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    e = x2 * (-2.0 * _GELU_C * _GELU_K)
    e -= 2.0 * _GELU_C
    e *= x
    with np.errstate(over="ignore"):
        np.exp(e, out=e)
    e += 1.0
    s = np.reciprocal(e, out=e)
    out = x * s

    def backward(g):
        # d/dx = s + x s (1 - s) * 2c (1 + 3k x^2)
        d = 1.0 - s
        d *= s
        d *= x
        w = x2 * (6.0 * _GELU_C * _GELU_K)
        w += 2.0 * _GELU_C
        d *= w
        d += s
        d *= g
        return (d,)

    return _emit("gelu", out, (a,), backward)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the value was inside."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _emit("clamp", out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim} axes")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _emit("mean", out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    """Permute axes; default reverses the last two (matrix transpose)."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            return a
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def slice_(a, index) -> Tensor:
    """Basic indexing (ints and slices); gradient is scattered back."""
    a = _as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit("slice", np.array(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        parts = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _emit("concat", out, tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch axes differ: {a.shape} x {b.shape}") from None
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; weight is [D_in, D_out]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    inputs = [x, weight]
    d_in, d_out = weight.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (d_out,):
            raise ShapeError(f"linear: bias {bias.shape} != ({d_out},)")
        out += bias.data
        inputs.append(bias)
    out = out.reshape(lead + (d_out,))

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _emit("linear", out, inputs, backward)


def softmax(a, axis: int = -1, scale: float = 1.0) -> Tensor:
    """softmax(scale * a) along ``axis``, stabilized by max subtraction."""
    a = _as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    if scale != 1.0:
        out *= scale
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        s = gx.sum(axis=axis, keepdims=True)
        gx -= out * s
        if scale != 1.0:
            gx *= scale
        return (gx,)

    return _emit("softmax", out, (a,), backward)


def layernorm(x, axis: int = -1, eps: float = 1e-5, weight=None, bias=None) -> Tensor:
    """Normalize along one axis, optionally followed by an affine map on that axis."""
    x = _as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    shape = [1] * x.ndim
    shape[ax] = n
    inputs = [x]
    out = xhat
    if weight is not None:
        weight = _as_tensor(weight)
        out = out * weight.data.reshape(shape)
        inputs.append(weight)
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data.reshape(shape)
        inputs.append(bias)
    other = tuple(i for i in range(x.ndim) if i != ax)

    def backward(g):
        gh = g * weight.data.reshape(shape) if weight is not None else g
        gx = inv * (
            gh - gh.mean(axis=ax, keepdims=True) - xhat * (gh * xhat).mean(axis=ax, keepdims=True)
        )
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=other))
        if bias is not None:
            grads.append(g.sum(axis=other))
        return tuple(grads)

    return _emit("layernorm", out, inputs, backward)


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [B,Cin,H,W] with kernels [Cout,Cin,k,k]."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects 4-axis input and kernels, got {x.shape}, {kernels.shape}")
    B, cin, H, W = x.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernels expect {kcin}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: [B, Ho, Wo, kh*kw*Cin]; channels innermost so the backward scatter is contiguous
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1)).reshape(B, Ho, Wo, kh * kw * cin)
    kmat = kernels.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ kmat.T
    inputs = [x, kernels]
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data
        inputs.append(bias)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gt = g.transpose(0, 2, 3, 1).reshape(-1, cout)  # [B*Ho*Wo, Cout]
        gk = None
        if kernels.requires_grad:
            gk = (gt.T @ cols.reshape(-1, kh * kw * cin)).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (gt @ kmat).reshape(B, Ho, Wo, kh, kw, cin)
            gxp = np.zeros((B, Hp, Wp, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, i, j]
            gx = gxp.transpose(0, 3, 1, 2)
            if padding:
                gx = gx[:, :, padding:padding + H, padding:padding + W]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return _emit("conv2d", out, inputs, backward)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]


# ---------------------------------------------------------------------------
# image <-> patch grid
# ---------------------------------------------------------------------------
def unfold_patches(x, grid: int) -> Tensor:
    """[B,1,H,W] -> [B, grid*grid, (H/grid)*(W/grid)], patches in row-major grid order."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"unfold_patches expects [B,1,H,W], got {x.shape}")
    B, _, H, W = x.shape
    if H % grid or W % grid:
        raise ShapeError(f"grid {grid} does not divide image {H}x{W}")
    ph, pw = H // grid, W // grid
    out = x.data.reshape(B, grid, ph, grid, pw).transpose(0, 1, 3, 2, 4).reshape(B, grid * grid, ph * pw)

    def backward(g):
        return (g.reshape(B, grid, grid, ph, pw).transpose(0, 1, 3, 2, 4).reshape(B, 1, H, W),)

    return _emit("unfold_patches", out, (x,), backward)


def fold_patches(x, grid: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`unfold_patches`."""
    x = _as_tensor(x)
    B = x.shape[0]
    ph, pw = height // grid, width // grid
    if height % grid or width % grid or x.shape[1:] != (grid * grid, ph * pw):
        raise ShapeError(f"fold_patches: {x.shape} does not tile a {height}x{width} image on grid {grid}")
    out = x.data.reshape(B, grid, grid, ph, pw).transpose(0, 1, 3, 2, 4).reshape(B, 1, height, width)

    def backward(g):
        return (g.reshape(B, grid, ph, grid, pw).transpose(0, 1, 3, 2, 4).reshape(B, grid * grid, ph * pw),)

    return _emit("fold_patches", out, (x,), backward)


def attention(q, k, v, scale: float) -> tuple[Tensor, np.ndarray]:
    """Fused softmax(scale * q k^T) v over leading batch axes.

    Equivalent to ``matmul(softmax(matmul(q, k^T), scale=scale), v)`` but
    evaluated one batch entry at a time so the map stays cache resident.
    Returns the output and the (read-only) attention maps.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    lead = q.shape[:-2]
    Lq, d = q.shape[-2:]
    Lk, dv = v.shape[-2:]
    qs = q.data.reshape(-1, Lq, d)
    ks = k.data.reshape(-1, Lk, d)
    vs = v.data.reshape(-1, Lk, dv)
    n = qs.shape[0]
    # scaling the small q instead of the Lq x Lk scores saves a full pass over every map
    qscaled = qs * scale
    maps = np.empty((n, Lq, Lk))
    out = np.empty((n, Lq, dv))
    for i in range(n):
        s = maps[i]
        np.matmul(qscaled[i], ks[i].T, out=s)
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s *= 1.0 / s.sum(axis=-1, keepdims=True)
        np.matmul(s, vs[i], out=out[i])

    def backward(g):
        g = g.reshape(n, Lq, dv)
        # sum_j ds_ij a_ij = sum_j (g_i . v_j) a_ij = g_i . out_i
        row = np.einsum("nij,nij->ni", g, out)[..., None]
        gq = np.empty_like(qs)
        gk = np.empty_like(ks)
        gv = np.empty_like(vs)
        for i in range(n):
            a = maps[i]
            np.matmul(a.T, g[i], out=gv[i])
            ds = g[i] @ vs[i].T
            ds -= row[i]
            ds *= a
            np.matmul(ds, ks[i], out=gq[i])
            np.matmul(ds.T, qscaled[i], out=gk[i])
        gq *= scale
        return gq.reshape(q.shape), gk.reshape(k.shape), gv.reshape(v.shape)

    result = _emit("attention", out.reshape(lead + (Lq, dv)), (q, k, v), backward)
    return result, maps.reshape(lead + (Lq, Lk))
