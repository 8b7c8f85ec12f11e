"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: tensors wrap a numpy array, every
operation records its parents and a backward rule, and ``backward()``
walks the recorded graph once in reverse topological order.  Model math
is float32 throughout; broadcasting is restricted to scalar-against-tensor
plus the explicit :func:`expand` op, which keeps every backward rule
directly testable against finite differences.

Gradients accumulate additively: calling ``backward()`` twice without
``zero_grad()`` doubles every gradient.  This is relied on by the summed
multi-level distillation objective.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "CheckpointError",
    "no_grad",
    "float64_precision",
    "is_grad_enabled",
    "matmul",
    "maximum",
    "minimum",
    "concat",
    "softmax",
    "log_softmax",
    "bce_with_logits",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "upsample_nearest2x",
    "batch_norm",
    "expand",
    "narrow",
    "gather_cells",
    "graph_nodes",
    "graph_ops",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class CheckpointError(IOError):
    """Raised on malformed checkpoint files."""


_thread_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_thread_state, "grad_enabled", True)


def _dtype():
    return getattr(_thread_state, "dtype", np.float32)


class no_grad:
    """Context manager disabling graph recording on the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _thread_state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _thread_state.grad_enabled = self._prev
        return False


class float64_precision:
    """Run forward math in float64 on the current thread.

    Exists solely for the finite-difference oracle, which needs a noise
    floor well below the gradient tolerances; model math stays float32.
    """

    def __enter__(self):
        self._prev = _dtype()
        _thread_state.dtype = np.float64
        return self

    def __exit__(self, *exc):
        _thread_state.dtype = self._prev
        return False


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """N-dimensional float32 array with an optional gradient buffer.

    A tensor produced by an operation stores the operation name (``op``),
    references to its parent tensors and a backward rule.  Leaf tensors
    created directly from data have no parents.  Once a tensor has been
    recorded as the input of an operation its data must not be mutated.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_dtype())
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor initialised with non-finite values")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- constructors -------------------------------------------------------

    @staticmethod
    def zeros(*shape: int, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=_dtype()), requires_grad=requires_grad)

    @staticmethod
    def ones(*shape: int, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=_dtype()), requires_grad=requires_grad)

    @staticmethod
    def _from_op(
        data: np.ndarray,
        parents: tuple["Tensor", ...],
        op: str,
        backward: Callable[[np.ndarray], tuple],
    ) -> "Tensor":
        out = Tensor.__new__(Tensor)
        dt = _dtype()
        out.data = data if data.dtype == dt else data.astype(dt)
        out.grad = None
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.op = op
            out._parents = parents
            out._backward = backward
        else:
            out.op = op
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- gradient machinery -------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.op = None
        out._parents = ()
        out._backward = None
        return out

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires one.

        The loss must be scalar.  Each call propagates a fresh unit seed
        and adds the result into existing ``grad`` buffers.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = graph_nodes(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    def free_graph(self) -> None:
        """Drop recorded parents/backward rules reachable from this tensor.

        Breaks reference cycles so large activation buffers are reclaimed
        immediately after an optimisation step.
        """
        for node in graph_nodes(self):
            node._parents = ()
            node._backward = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _binary_ew(self, other, "add",
                          lambda a, b: a + b,
                          lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary_ew(self, other, "sub",
                          lambda a, b: a - b,
                          lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _wrap(other).__sub__(self)

    def __mul__(self, other):
        return _binary_ew(self, other, "mul",
                          lambda a, b: a * b,
                          lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary_ew(self, other, "div",
                          lambda a, b: a / b,
                          lambda g, a, b: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return _wrap(other).__truediv__(self)

    def __neg__(self):
        data = -self.data
        return Tensor._from_op(data, (self,), "neg", lambda g: (-g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self.data
        data = a ** p
        return Tensor._from_op(data, (self,), "pow",
                               lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary math ---------------------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return Tensor._from_op(out_data, (self,), "exp", lambda g: (g * out_data,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._from_op(np.log(a), (self,), "log", lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)
        return Tensor._from_op(out_data, (self,), "sqrt",
                               lambda g: (g * 0.5 / out_data,))

    def sigmoid(self) -> "Tensor":
        out_data = _sigmoid(self.data)
        return Tensor._from_op(out_data, (self,), "sigmoid",
                               lambda g: (g * out_data * (1.0 - out_data),))

    def silu(self) -> "Tensor":
        s = _sigmoid(self.data)
        a = self.data
        return Tensor._from_op(a * s, (self,), "silu",
                               lambda g: (g * (s + a * s * (1.0 - s)),))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._from_op(np.where(mask, self.data, 0.0), (self,), "relu",
                               lambda g: (np.where(mask, g, 0.0),))

    def softplus(self) -> "Tensor":
        a = self.data
        out_data = np.logaddexp(0.0, a).astype(a.dtype)
        return Tensor._from_op(out_data, (self,), "softplus",
                               lambda g: (g * _sigmoid(a),))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a_shape = self.data.shape
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            return (_spread_reduction_grad(g, a_shape, axis, keepdims),)

        return Tensor._from_op(np.asarray(data), (self,), "sum", bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a_shape = self.data.shape
        count = _reduction_count(a_shape, axis)
        data = self.data.mean(axis=axis, keepdims=keepdims)

        def bwd(g):
            return (_spread_reduction_grad(g, a_shape, axis, keepdims) / count,)

        return Tensor._from_op(np.asarray(data), (self,), "mean", bwd)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        a = self.data
        axis = _check_axis(axis, a.ndim, "max")
        idx = np.argmax(a, axis=axis)
        data = np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            data = np.squeeze(data, axis=axis)

        def bwd(g):
            gk = g if keepdims else np.expand_dims(g, axis)
            out = np.zeros_like(a)
            np.put_along_axis(out, np.expand_dims(idx, axis), gk, axis=axis)
            return (out,)

        return Tensor._from_op(data, (self,), "max", bwd)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        a_shape = self.data.shape
        data = self.data.reshape(shape)
        return Tensor._from_op(data, (self,), "reshape",
                               lambda g: (g.reshape(a_shape),))

    def transpose2d(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"transpose2d on shape {self.shape}")
        return Tensor._from_op(np.ascontiguousarray(self.data.T), (self,), "transpose",
                               lambda g: (g.T,))


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype()))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # exp overflow saturates to inf and the quotient to exactly 0/1, so the
    # unmasked form is both stable and much faster than masked evaluation
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


def _binary_ew(a: Tensor, b, op: str, fwd, bwd) -> Tensor:
    """Elementwise binary op; shapes must match or one operand is scalar."""
    b = _wrap(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} are neither equal "
            "nor scalar-broadcastable"
        )
    ad, bd = a.data, b.data
    data = fwd(ad, bd).astype(_dtype(), copy=False)

    def backward(g):
        ga, gb = bwd(g, ad, bd)
        if ga is not None and ga.shape != ad.shape:
            ga = ga.sum(dtype=np.float32).reshape(ad.shape)
        if gb is not None and gb.shape != bd.shape:
            gb = gb.sum(dtype=np.float32).reshape(bd.shape)
        return ga, gb

    return Tensor._from_op(data, (a, b), op, backward)


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _reduction_count(shape: tuple[int, ...], axis) -> float:
    if axis is None:
        return float(int(np.prod(shape))) if shape else 1.0
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for ax in axes:
        n *= shape[ax % len(shape)]
    return float(n)


def _spread_reduction_grad(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if shape else g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


# ---------------------------------------------------------------------------
# free-function ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    data = ad @ bd
    return Tensor._from_op(data, (a, b), "matmul",
                           lambda g: (g @ bd.T, ad.T @ g))


def maximum(a, b) -> Tensor:
    def bwd(g, ad, bd):
        mask = ad >= bd
        return np.where(mask, g, 0.0), np.where(mask, 0.0, g)
    return _binary_ew(_wrap(a), b, "maximum", np.maximum, bwd)


def minimum(a, b) -> Tensor:
    def bwd(g, ad, bd):
        mask = ad <= bd
        return np.where(mask, g, 0.0), np.where(mask, 0.0, g)
    return _binary_ew(_wrap(a), b, "minimum", np.minimum, bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ndim = tensors[0].data.ndim
    axis = _check_axis(axis, ndim, "concat")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tensors, "concat", bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(axis, x.data.ndim, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor._from_op(out_data, (x,), "softmax", bwd)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(axis, x.data.ndim, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    p = np.exp(out_data)

    def bwd(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out_data, (x,), "log_softmax", bwd)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (numerically stable).

    ``targets`` is a constant array in [0, 1]; no gradient flows to it.
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets,
                   dtype=_dtype())
    z = logits.data
    if t.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {t.shape}")
    out_data = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bwd(g):
        return (g * (_sigmoid(z) - t),)

    return Tensor._from_op(out_data.astype(z.dtype), (logits,), "bce_with_logits", bwd)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast size-1 axes of ``x`` up to ``shape`` (rank preserved)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.data.ndim:
        raise ShapeError(f"expand: rank mismatch {x.shape} -> {shape}")
    for din, dout in zip(x.data.shape, shape):
        if din != dout and din != 1:
            raise ShapeError(f"expand: cannot expand dim {din} to {dout}")
    axes = tuple(i for i, (din, dout) in enumerate(zip(x.data.shape, shape)) if din == 1 and dout != 1)
    data = np.broadcast_to(x.data, shape).copy()

    def bwd(g):
        return (g.sum(axis=axes, keepdims=True, dtype=np.float32) if axes else g,)

    return Tensor._from_op(data, (x,), "expand", bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    axis = _check_axis(axis, x.data.ndim, "narrow")
    dim = x.data.shape[axis]
    if start < 0 or start + length > dim:
        raise ShapeError(f"narrow: [{start}:{start + length}) out of range for dim {dim}")
    index = tuple(slice(None) if i != axis else slice(start, start + length)
                  for i in range(x.data.ndim))
    data = np.ascontiguousarray(x.data[index])
    x_shape = x.data.shape

    def bwd(g):
        gx = np.zeros(x_shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return Tensor._from_op(data, (x,), "narrow", bwd)


def gather_cells(x: Tensor, batch_idx: np.ndarray, cell_idx: np.ndarray) -> Tensor:
    """Select per-cell feature vectors: x[N,C,H,W] -> [M,C].

    ``cell_idx`` is the flattened spatial index (row-major over H, W).
    """
    n, c, h, w = x.data.shape
    bi = np.asarray(batch_idx, dtype=np.int64)
    ci = np.asarray(cell_idx, dtype=np.int64)
    flat = x.data.reshape(n, c, h * w)
    data = np.ascontiguousarray(flat[bi, :, ci])  # [M, C]

    def bwd(g):
        gx = np.zeros_like(flat)
        np.add.at(gx, (bi, slice(None), ci), g)
        return (gx.reshape(n, c, h, w),)

    return Tensor._from_op(data, (x,), "gather_cells", bwd)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> contiguous [B, C*kh*kw, oh*ow] patch matrix."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(patches.reshape(b, c * kh * kw, oh * ow))


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int,
            pad: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add [B, C*kh*kw, oh*ow] columns back onto the padded image."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    xg = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xg[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if pad:
        xg = xg[:, :, pad:hp - pad, pad:wp - pad]
    return xg


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation: x[N,C,H,W] * weight[K,C,kh,kw] -> [N,K,H',W']."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d, got shape {weight.shape}")
    n, c, h, w = x.data.shape
    k, ck, kh, kw = weight.data.shape
    if ck != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or pad {pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: spatial dims {h}x{w} (pad {pad}) smaller than kernel {kh}x{kw}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    one_by_one = kh == 1 and kw == 1 and stride == 1 and pad == 0
    if one_by_one:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        cols = _im2col(xp, kh, kw, stride, oh, ow)

    w2 = weight.data.reshape(k, c * kh * kw)
    out = np.matmul(w2[None], cols)  # [N, K, oh*ow]
    if bias is not None:
        if bias.data.shape != (k,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")
        out += bias.data[None, :, None]
    out = out.reshape(n, k, oh, ow)

    x_needs = x.requires_grad
    w_needs = weight.requires_grad

    def bwd(g):
        g2 = g.reshape(n, k, oh * ow)
        gw = None
        if w_needs:
            # batched GEMM against transposed views; avoids copying cols
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        gx = None
        if x_needs:
            gcols = np.matmul(w2.T[None], g2)
            if one_by_one:
                gx = gcols.reshape(n, c, h, w)
            else:
                gx = _col2im(gcols, (n, c, h, w), kh, kw, stride, pad, oh, ow)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out.astype(_dtype(), copy=False), parents, "conv2d", bwd)


def _pool_windows(x: Tensor, k: int, stride: int, pad: int, fill: float):
    n, c, h, w = x.data.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"pool: spatial dims {h}x{w} (pad {pad}) smaller than window {k}")
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                    constant_values=fill)
    else:
        xp = x.data
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    sb, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, oh, ow, k, k),
        strides=(sb, sc, stride * sh, stride * sw, sh, sw), writeable=False)
    return win, oh, ow


def max_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    n, c, h, w = x.data.shape
    win, oh, ow = _pool_windows(x, k, stride, pad, fill=-np.inf)
    flat = win.reshape(n, c, oh, ow, k * k)
    idx = np.argmax(flat, axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        hp, wp = h + 2 * pad, w + 2 * pad
        gx = np.zeros((n, c, hp, wp), dtype=np.float32)
        oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        ry = oy[None, None] * stride + idx // k
        rx = ox[None, None] * stride + idx % k
        bi = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (bi, ci, ry, rx), g)
        if pad:
            gx = gx[:, :, pad:hp - pad, pad:wp - pad]
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(data), (x,), "max_pool2d", bwd)


def avg_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    n, c, h, w = x.data.shape
    win, oh, ow = _pool_windows(x, k, stride, pad, fill=0.0)
    data = win.mean(axis=(4, 5))

    def bwd(g):
        cols = np.broadcast_to((g / (k * k))[:, :, :, :, None],
                               (n, c, oh, ow, k * k))
        cols = cols.reshape(n, c, oh * ow, k * k).transpose(0, 1, 3, 2)
        cols = cols.reshape(n, c * k * k, oh * ow)
        return (_col2im(cols, (n, c, h, w), k, k, stride, pad, oh, ow),)

    return Tensor._from_op(np.ascontiguousarray(data), (x,), "avg_pool2d", bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    data = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / (h * w), (n, c, h, w)).copy(),)

    return Tensor._from_op(data, (x,), "global_avg_pool", bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(data, (x,), "upsample_nearest2x", bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               momentum: float = 0.1, eps: float = 1e-5,
               training: bool = True) -> Tensor:
    """Per-channel batch normalisation on [N,C,H,W].

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used, making the
    forward pass a per-channel affine map.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: expected 4-d input, got {x.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm: scale/shift must have shape ({c},)")
    xd = x.data
    x3 = xd.reshape(n, c, h * w)
    m = n * h * w
    if training:
        mean = x3.mean(axis=(0, 2))
        xc = x3 - mean[None, :, None]
        var = np.einsum("ncl,ncl->c", xc, xc) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean
        var = running_var
        xc = x3 - np.asarray(mean, dtype=x3.dtype)[None, :, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.astype(x3.dtype)[None, :, None]
    data = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def bwd(g):
        g3 = g.reshape(n, c, h * w)
        ggamma = np.einsum("ncl,ncl->c", g3, xhat).astype(np.float32)
        gbeta = g3.sum(axis=(0, 2), dtype=np.float32)
        gs = (gamma.data * inv_std.astype(np.float32))[None, :, None]
        if training:
            gx = gs * (g3 - (gbeta / m)[None, :, None]
                       - xhat * (ggamma / m)[None, :, None])
        else:
            gx = gs * g3
        return gx.reshape(n, c, h, w).astype(np.float32), ggamma, gbeta

    return Tensor._from_op(data.reshape(n, c, h, w).astype(xd.dtype),
                           (x, gamma, beta), "batch_norm", bwd)


# ---------------------------------------------------------------------------
# graph inspection
# ---------------------------------------------------------------------------


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All tensors reachable from ``root``, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def graph_ops(root: Tensor) -> list[str]:
    """Names of recorded operations reachable from ``root``."""
    return [n.op for n in graph_nodes(root) if n.op is not None]


# ---------------------------------------------------------------------------
# checkpoint I/O ("MDT1" format)
# ---------------------------------------------------------------------------

_MAGIC = b"MDT1"


def save_checkpoint(path, tensors: dict[str, "Tensor | np.ndarray"]) -> None:
    """Write named float32 arrays to the binary "MDT1" container.

    Layout: magic "MDT1", u32 tensor count, then per tensor u32 name length,
    UTF-8 name, u32 rank, u32 dims, raw little-endian f32 data.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read an "MDT1" container back into a name -> float32 array mapping."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}, expected {_MAGIC!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"name length of tensor {i}"))
            name = _read_exact(fh, name_len, f"name of tensor {i}").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}"))
            n_items = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 4 * n_items, f"data of {name}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return out
