"""Dense float32 tensors with reverse-mode automatic differentiation.

Everything trainable in this package (U-Nets, the clinical MLPs, the 3D
conv encoder) runs on this module.  Values are numpy float32 arrays; each
differentiable op records its inputs and a backward closure, and
``backward()`` replays the closures in reverse topological order.

No general broadcasting: elementwise ops require equal shapes or a python
scalar.  Convolutions, normalization and activations accept an optional
leading batch axis; per-sample semantics are preserved (instance norm
normalizes each sample independently), batching only vectorizes the math.
"""

from __future__ import annotations

import math
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .rng import Rng

# When True, every op validates that its output is finite.  Costs a few
# percent of runtime; catching the first NaN at its source is worth it.
FINITE_CHECKS = True

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    """N-dimensional float32 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

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
        return float(self.data)

    def assert_finite(self) -> "Tensor":
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"non-finite values in output of op '{self.op}'")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, leaves: Sequence["Tensor"] | None = None) -> None:
        """Accumulate gradients of this scalar into every reachable input.

        ``leaves``, when given, are guaranteed a gradient afterwards; any
        leaf the loss never touched receives zeros of its own shape.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        self.assert_finite()
        tape = _build_tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward is not None:
                node._backward()
        if leaves is not None:
            for leaf in leaves:
                if leaf.requires_grad and leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)

    # -- operator sugar (spec-level ops live in module functions below) --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.shape), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        grad = "grad" if self.requires_grad else "nograd"
        return f"Tensor(shape={self.shape}, op={self.op}, {grad})"


def _build_tape(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root`` (iterative DFS)."""
    tape: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return tape


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Gradient arrays are never mutated in place, so sharing is safe here.
    if not t.requires_grad and not t._parents:
        return
    g = np.asarray(g, dtype=np.float32)
    t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
    if FINITE_CHECKS and not np.isfinite(out.data).all():
        raise FloatingPointError(f"non-finite values in output of op '{op}'")
    return out


def _as_tensor(x, like_shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float32)
    if like_shape is not None and arr.ndim == 0:
        arr = np.full(like_shape, float(arr), dtype=np.float32)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# creation
# ---------------------------------------------------------------------------


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"tensor extents must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=np.float32), requires_grad)


def constant(shape: Sequence[int], value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=np.float32), requires_grad)


def uniform(shape: Sequence[int], rng: Rng, lo: float, hi: float,
            requires_grad: bool = False) -> Tensor:
    data = rng.uniform(lo, hi, size=_check_shape(shape)).astype(np.float32)
    return Tensor(data, requires_grad)


def kaiming(shape: Sequence[int], rng: Rng, fan_in: int,
            requires_grad: bool = False) -> Tensor:
    """Kaiming-uniform init: entries drawn in +-sqrt(6 / fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = math.sqrt(6.0 / fan_in)
    return uniform(shape, rng, -bound, bound, requires_grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, float(b))
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def backward():
        _accum(a, out.grad)
        _accum(b, out.grad)

    out = _make(out_data, (a, b), backward, "add")
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, -float(b))
    _binary_shapes(a, b, "sub")
    out_data = a.data - b.data

    def backward():
        _accum(a, out.grad)
        _accum(b, -out.grad)

    out = _make(out_data, (a, b), backward, "sub")
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def backward():
        _accum(a, out.grad * b.data)
        _accum(b, out.grad * a.data)

    out = _make(out_data, (a, b), backward, "mul")
    return out


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    _binary_shapes(a, b, "div")
    out_data = a.data / b.data

    def backward():
        _accum(a, out.grad / b.data)
        _accum(b, -out.grad * a.data / (b.data * b.data))

    out = _make(out_data, (a, b), backward, "div")
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out_data = a.data * np.float32(factor)

    def backward():
        _accum(a, out.grad * np.float32(factor))

    out = _make(out_data, (a,), backward, "scale")
    return out


def add_scalar(a: Tensor, value: float) -> Tensor:
    out_data = a.data + np.float32(value)

    def backward():
        _accum(a, out.grad)

    out = _make(out_data, (a,), backward, "add_scalar")
    return out


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out_data = a.data.reshape(shape)

    def backward():
        _accum(a, out.grad.reshape(a.shape))

    out = _make(out_data, (a,), backward, "reshape")
    return out


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.size,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward():
        parts = np.split(out.grad, splits, axis=axis)
        for t, g in zip(tensors, parts):
            _accum(t, g)

    out = _make(out_data, tuple(tensors), backward, "concat")
    return out


def tsum(a: Tensor, axes: Iterable[int] | None = None, keepdims: bool = False) -> Tensor:
    """Sum reduction; accumulates in float64 before storing float32."""
    ax = tuple(axes) if axes is not None else None
    out_data = a.data.sum(axis=ax, dtype=np.float64, keepdims=keepdims).astype(np.float32)

    def backward():
        g = out.grad
        if not keepdims and ax is not None:
            g = np.expand_dims(g, ax)
        elif ax is None and not keepdims:
            g = np.asarray(g).reshape((1,) * a.ndim)
        _accum(a, np.broadcast_to(g, a.shape))

    out = _make(out_data, (a,), backward, "sum")
    return out


# ---------------------------------------------------------------------------
# linear layer
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = W x + b for x of shape [n] or a batch [B, n]."""
    m, n = w.shape
    batched = x.ndim == 2
    if x.shape[-1] != n or b.shape != (m,):
        raise ValueError(f"linear: x{x.shape} W{w.shape} b{b.shape} do not agree")
    xb = x.data if batched else x.data[None]
    out_data = xb @ w.data.T + b.data
    if not batched:
        out_data = out_data[0]

    def backward():
        g = out.grad if batched else out.grad[None]
        _accum(w, g.T @ xb)
        _accum(b, g.sum(axis=0))
        gx = g @ w.data
        _accum(x, gx if batched else gx[0])

    out = _make(out_data, (x, w, b), backward, "linear")
    return out


# ---------------------------------------------------------------------------
# convolution (rank 2 or 3, no bias; optional leading batch axis)
# ---------------------------------------------------------------------------


def _conv_geometry(in_sp, ksz, stride, pad):
    out_sp = []
    for d, k in zip(in_sp, ksz):
        o = (d + 2 * pad - k) // stride + 1
        if o < 1:
            raise ValueError(
                f"conv: output extent < 1 for input {in_sp}, kernel {ksz}, "
                f"stride {stride}, pad {pad}")
        out_sp.append(o)
    return tuple(out_sp)


def conv_nd(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with square kernel, shared stride/zero-pad per axis.

    x: [C_in, *spatial] or [B, C_in, *spatial]; w: [C_out, C_in, *kernel]
    with 2 or 3 spatial dims.  Output extent per axis is
    floor((in + 2*pad - k) / stride) + 1.
    """
    rank = w.ndim - 2
    if rank not in (2, 3):
        raise ValueError(f"conv: weights must have 2 or 3 spatial dims, got {w.shape}")
    batched = x.ndim == rank + 2
    if not batched and x.ndim != rank + 1:
        raise ValueError(f"conv: input rank {x.ndim} does not fit kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv: stride must be >= 1 and pad >= 0")
    xb = x.data if batched else x.data[None]
    c_out, c_in = w.shape[:2]
    if xb.shape[1] != c_in:
        raise ValueError(f"conv: input channels {xb.shape[1]} != weight C_in {c_in}")
    ksz = w.shape[2:]
    in_sp = xb.shape[2:]
    out_sp = _conv_geometry(in_sp, ksz, stride, pad)
    bsz = xb.shape[0]

    pad_spec = ((0, 0), (0, 0)) + ((pad, pad),) * rank
    xp = np.pad(xb, pad_spec) if pad else xb

    def _view(arr, off):
        idx = (slice(None), slice(None)) + tuple(
            slice(o, o + stride * d, stride) for o, d in zip(off, out_sp))
        return arr[idx]

    acc = np.zeros((c_out, bsz) + out_sp, dtype=np.float32)
    for off in product(*(range(k) for k in ksz)):
        w_off = w.data[(slice(None), slice(None)) + off]
        acc += np.tensordot(w_off, _view(xp, off), axes=([1], [1]))
    out_data = np.ascontiguousarray(np.moveaxis(acc, 1, 0))
    if not batched:
        out_data = out_data[0]

    def backward():
        g = out.grad if batched else out.grad[None]
        g_t = np.moveaxis(g, 0, 1)  # [C_out, B, *out_sp]
        contract = ([1] + list(range(2, 2 + rank)), [0] + list(range(2, 2 + rank)))
        if w.requires_grad or w._parents:
            dw = np.empty_like(w.data)
            for off in product(*(range(k) for k in ksz)):
                dw[(slice(None), slice(None)) + off] = np.tensordot(
                    g_t, _view(xp, off), axes=contract)
            _accum(w, dw)
        if x.requires_grad or x._parents:
            gxp = np.zeros((c_in, bsz) + xp.shape[2:], dtype=np.float32)
            for off in product(*(range(k) for k in ksz)):
                w_off = w.data[(slice(None), slice(None)) + off]
                _view(gxp, off)[...] += np.tensordot(w_off, g_t, axes=([0], [0]))
            gx = np.moveaxis(gxp, 1, 0)
            if pad:
                crop = (slice(None), slice(None)) + tuple(
                    slice(pad, pad + d) for d in in_sp)
                gx = gx[crop]
            _accum(x, gx if batched else gx[0])

    out = _make(out_data, (x, w), backward, "conv")
    return out


def transpose_conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-2, kernel-2 transposed convolution: each spatial extent doubles.

    x: [C_in, H, W] or [B, C_in, H, W]; w: [C_in, C_out, 2, 2].
    Adjoint of conv_nd with k=2, s=2, p=0; no overlap between output taps.
    """
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ValueError(f"transpose_conv2d: weights must be [C_in, C_out, 2, 2], got {w.shape}")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ValueError(f"transpose_conv2d: bad input rank {x.ndim}")
    xb = x.data if batched else x.data[None]
    bsz, c_in, h, wd = xb.shape
    if c_in != w.shape[0]:
        raise ValueError(f"transpose_conv2d: input channels {c_in} != weight C_in {w.shape[0]}")
    c_out = w.shape[1]

    t = np.tensordot(xb, w.data, axes=([1], [0]))      # [B, H, W, C_out, 2, 2]
    t = t.transpose(0, 3, 1, 4, 2, 5)                   # [B, C_out, H, 2, W, 2]
    out_data = np.ascontiguousarray(t).reshape(bsz, c_out, 2 * h, 2 * wd)
    if not batched:
        out_data = out_data[0]

    def backward():
        g = out.grad if batched else out.grad[None]
        g6 = g.reshape(bsz, c_out, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5)
        if w.requires_grad or w._parents:
            _accum(w, np.tensordot(xb, g6, axes=([0, 2, 3], [0, 1, 2])))
        if x.requires_grad or x._parents:
            gx = np.tensordot(g6, w.data, axes=([3, 4, 5], [1, 2, 3]))
            gx = gx.transpose(0, 3, 1, 2)
            _accum(x, gx if batched else gx[0])

    out = _make(out_data, (x, w), backward, "transpose_conv2d")
    return out


# ---------------------------------------------------------------------------
# normalization, activations, regularization
# ---------------------------------------------------------------------------


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
                  batched: bool = False) -> Tensor:
    """Per-channel normalization over the spatial dims of each sample.

    x: [C, *spatial], or [B, C, *spatial] with batched=True (the channel
    axis cannot be inferred from shapes alone); gamma, beta: [C].  Uses
    the population variance (divide by N).
    """
    xb = x.data if batched else x.data[None]
    c = xb.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"instance_norm: gamma/beta must be [{c}], got {gamma.shape}/{beta.shape}")
    sp_axes = tuple(range(2, xb.ndim))
    n_sp = int(np.prod(xb.shape[2:]))
    if n_sp < 1:
        raise ValueError("instance_norm: needs at least one spatial element")

    mu = xb.mean(axis=sp_axes, keepdims=True)
    var = xb.var(axis=sp_axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = (xb - mu) * inv
    gshape = (1, c) + (1,) * len(sp_axes)
    out_data = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)
    if not batched:
        out_data = out_data[0]

    def backward():
        g = out.grad if batched else out.grad[None]
        red = tuple([0] + list(sp_axes))
        _accum(beta, g.sum(axis=red))
        _accum(gamma, (g * xhat).sum(axis=red))
        if x.requires_grad or x._parents:
            gx = g * gamma.data.reshape(gshape)
            m1 = gx.mean(axis=sp_axes, keepdims=True)
            m2 = (gx * xhat).mean(axis=sp_axes, keepdims=True)
            dx = inv * (gx - m1 - xhat * m2)
            _accum(x, dx if batched else dx[0])

    out = _make(out_data, (x, gamma, beta), backward, "instance_norm")
    return out


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x where positive, slope * x elsewhere; slope is a learnable scalar."""
    if slope.size != 1:
        raise ValueError("prelu: slope must be a scalar tensor")
    a = float(slope.data)
    pos = x.data > 0
    out_data = np.where(pos, x.data, np.float32(a) * x.data)

    def backward():
        g = out.grad
        _accum(slope, np.array((x.data * g)[~pos].sum(dtype=np.float64),
                               dtype=np.float32).reshape(slope.shape))
        _accum(x, np.where(pos, g, np.float32(a) * g))

    out = _make(out_data, (x, slope), backward, "prelu")
    return out


def dropout(x: Tensor, p: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        out_data = x.data

        def backward():
            _accum(x, out.grad)

        out = _make(out_data, (x,), backward, "dropout")
        return out

    if rng is None:
        raise ValueError("dropout: rng required in training mode")
    keep = (rng.random(size=x.shape) >= p)
    factor = np.float32(1.0 / (1.0 - p))
    mask = keep.astype(np.float32) * factor
    out_data = x.data * mask

    def backward():
        _accum(x, out.grad * mask)

    out = _make(out_data, (x,), backward, "dropout")
    return out


def softmax(x: Tensor, axis: int) -> Tensor:
    """Softmax along one axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out.grad
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accum(x, p * (g - inner))

    out = _make(p, (x,), backward, "softmax")
    return out


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    logits: [K] with an int label, or [B, K] with labels of length B.
    Gradient per sample is softmax(logits) - onehot(label) (scaled 1/B).
    """
    batched = logits.ndim == 2
    lg = logits.data if batched else logits.data[None]
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    bsz, k = lg.shape
    if lab.shape != (bsz,):
        raise ValueError(f"softmax_cross_entropy: labels {lab.shape} do not match batch {bsz}")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError("softmax_cross_entropy: label out of range")

    m = lg.max(axis=1, keepdims=True)
    e = np.exp(lg - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    lse = m[:, 0] + np.log(z[:, 0])
    losses = lse - lg[np.arange(bsz), lab]
    out_data = np.float32(losses.mean(dtype=np.float64))

    def backward():
        g = p.copy()
        g[np.arange(bsz), lab] -= 1.0
        g *= float(out.grad) / bsz
        _accum(logits, g if batched else g[0])

    out = _make(np.asarray(out_data), (logits,), backward, "softmax_cross_entropy")
    return out
