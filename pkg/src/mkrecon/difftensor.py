"""Dense float64 tensors with reverse-mode differentiation.

A minimal tape: every operation returns a new Tensor holding the forward
value plus a closure that scatters the upstream gradient to its parents.
``Tensor.backward()`` topologically sorts the graph and runs the closures.
Everything is double precision; any NaN/Inf produced by an operation raises
NumericError immediately rather than propagating.

Convolution follows the cross-correlation convention: the output at v is
sum_u F[u] * P[v + (u - c)] with c the kernel centre, so kernels are applied
without flipping.  Network-style multi-channel convolutions use zero-same
padding; the fixed-kernel ``conv`` supports both "valid" and "zero-same".
"""

from __future__ import annotations

from itertools import product
from typing import Iterable, Optional, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A forward or backward value became NaN/Inf."""


def _check_finite(a: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """N-dimensional float64 grid, optionally participating in gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (), _backward=None,
                 _op: str = "tensor"):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, _op)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        _check_finite(g, "backward")
        if self.grad is None:
            self.grad = g.astype(np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate .grad on every reachable tensor with d(self)/d(tensor)."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar (1-element) loss tensor")
        order: list[Tensor] = []
        state: dict[int, int] = {}  # id -> 1 while on stack, 2 when done
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                state[id(node)] = 2
                order.append(node)
                continue
            mark = state.get(id(node))
            if mark == 2:
                continue
            if mark == 1:
                raise ValueError("cycle detected in computation graph")
            state[id(node)] = 1
            stack.append((node, True))
            for parent in node._parents:
                if state.get(id(parent)) != 2:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backprop(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss."""
    loss.backward()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# elementwise operations


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(out.grad)

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    """Elementwise product.  Shapes must match, except that one operand may
    carry a single channel (extent-1 axis) where the other has many: that is
    the broadcast the attention gate needs and the only one supported."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or any(
            sa != sb and sa != 1 and sb != 1
            for sa, sb in zip(a.shape, b.shape)):
        raise ValueError(f"mul: incompatible shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")

    def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
        return g.sum(axis=axes, keepdims=True) if axes else g

    def _bw():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = _bw
    return out


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    out = Tensor(x.data * s, _parents=(x,), _op="scale")

    def _bw():
        if x.requires_grad:
            x._accumulate(out.grad * s)

    out._backward = _bw
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,), _op="relu")

    def _bw():
        if x.requires_grad:
            x._accumulate(out.grad * (x.data > 0.0))

    out._backward = _bw
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign to keep exp() in the underflow-safe regime
    d = x.data
    pos = d >= 0
    y = np.empty_like(d)
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y, _parents=(x,), _op="sigmoid")

    def _bw():
        if x.requires_grad:
            x._accumulate(out.grad * out.data * (1.0 - out.data))

    out._backward = _bw
    return out


def clamp01(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.clip(x.data, 0.0, 1.0), _parents=(x,), _op="clamp01")

    def _bw():
        if x.requires_grad:
            inside = (x.data >= 0.0) & (x.data <= 1.0)
            x._accumulate(out.grad * inside)

    out._backward = _bw
    return out


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), _parents=(x,), _op="reshape")

    def _bw():
        if x.requires_grad:
            x._accumulate(out.grad.reshape(x.shape))

    out._backward = _bw
    return out


def concat_channels(a, b, axis: int = 0) -> Tensor:
    """Concatenate along a channel axis; all other extents must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise ValueError("concat_channels: rank mismatch")
    for i, (sa, sb) in enumerate(zip(a.shape, b.shape)):
        if i != (axis % a.ndim) and sa != sb:
            raise ValueError(
                f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=axis),
                 _parents=(a, b), _op="concat_channels")
    na = a.shape[axis % a.ndim]

    def _bw():
        sl_a = [slice(None)] * out.ndim
        sl_a[axis % out.ndim] = slice(0, na)
        sl_b = [slice(None)] * out.ndim
        sl_b[axis % out.ndim] = slice(na, None)
        if a.requires_grad:
            a._accumulate(out.grad[tuple(sl_a)])
        if b.requires_grad:
            b._accumulate(out.grad[tuple(sl_b)])

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# pooling / upsampling (2D spatial trailing axes)


def pool_avg(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    f = int(factor)
    if x.ndim < 2:
        raise ValueError("pool_avg needs at least 2 spatial dims")
    h, w = x.shape[-2], x.shape[-1]
    if h % f or w % f:
        raise ValueError(f"pool_avg: spatial dims {(h, w)} not divisible by {f}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (h // f, f, w // f, f))
    out = Tensor(blocks.mean(axis=(-3, -1)), _parents=(x,), _op="pool_avg")

    def _bw():
        if x.requires_grad:
            g = np.repeat(np.repeat(out.grad, f, axis=-2), f, axis=-1)
            x._accumulate(g / (f * f))

    out._backward = _bw
    return out


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    f = int(factor)
    if x.ndim < 2:
        raise ValueError("upsample_nearest needs at least 2 spatial dims")
    out = Tensor(np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1),
                 _parents=(x,), _op="upsample_nearest")

    def _bw():
        if x.requires_grad:
            lead = x.shape[:-2]
            h, w = x.shape[-2], x.shape[-1]
            g = out.grad.reshape(lead + (h, f, w, f)).sum(axis=(-3, -1))
            x._accumulate(g)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# fixed-kernel convolution (cross-correlation), used by the filtered losses

VALID = "valid"
ZERO_SAME = "zero-same"


def conv(x, kernel, padding: str = VALID, dims: Optional[int] = None) -> Tensor:
    """Apply one fixed spatial kernel over the trailing axes of ``x``.

    The kernel is 2D or 3D with odd extent in every axis; leading axes of
    ``x`` (batch, channel) are carried through unchanged.  "valid" shrinks
    each filtered axis by (k - 1); "zero-same" keeps the shape, reading
    out-of-range samples as zero.  Gradients flow to both input and kernel.
    """
    x, k = as_tensor(x), as_tensor(kernel)
    nd = k.ndim
    if nd not in (2, 3):
        raise ValueError("conv: kernel must be 2D or 3D")
    if dims is not None and dims != nd:
        raise ValueError(f"conv: dims={dims} but kernel is {nd}D")
    if any(s % 2 == 0 for s in k.shape):
        raise ValueError(f"conv: kernel extent must be odd, got {k.shape}")
    if x.ndim < nd:
        raise ValueError(f"conv: input rank {x.ndim} below kernel rank {nd}")
    if padding not in (VALID, ZERO_SAME):
        raise ValueError(f"conv: unknown padding {padding!r}")

    spatial = x.shape[-nd:]
    if any(s < ks for s, ks in zip(spatial, k.shape)):
        raise ValueError(f"conv: input {spatial} smaller than kernel {k.shape}")
    centre = tuple(s // 2 for s in k.shape)
    lead = x.ndim - nd

    if padding == ZERO_SAME:
        pad = [(0, 0)] * lead + [(c, c) for c in centre]
        xw = np.pad(x.data, pad)
        out_sp = spatial
    else:
        xw = x.data
        out_sp = tuple(s - ks + 1 for s, ks in zip(spatial, k.shape))

    taps = list(product(*(range(s) for s in k.shape)))
    lead_sl = (slice(None),) * lead
    acc = np.zeros(x.shape[:lead] + out_sp, dtype=np.float64)
    for u in taps:
        view = xw[lead_sl + tuple(
            slice(ui, ui + o) for ui, o in zip(u, out_sp))]
        acc += k.data[u] * view
    out = Tensor(acc, _parents=(x, k), _op="conv")

    def _bw():
        g = out.grad
        if x.requires_grad:
            gx = np.zeros_like(xw)
            for u in taps:
                gx[lead_sl + tuple(
                    slice(ui, ui + o) for ui, o in zip(u, out_sp))] += k.data[u] * g
            if padding == ZERO_SAME:
                crop = lead_sl + tuple(
                    slice(c, c + s) for c, s in zip(centre, spatial))
                gx = gx[crop]
            x._accumulate(gx)
        if k.requires_grad:
            gk = np.empty_like(k.data)
            for u in taps:
                view = xw[lead_sl + tuple(
                    slice(ui, ui + o) for ui, o in zip(u, out_sp))]
                gk[u] = np.sum(g * view)
            k._accumulate(gk)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# multi-channel network convolutions (zero-same padding)


def _conv_nn(x: Tensor, w: Tensor, b: Optional[Tensor], nd: int) -> Tensor:
    if x.ndim != nd + 2:
        raise ValueError(f"conv layer expects rank {nd + 2} input, got {x.ndim}")
    if w.ndim != nd + 2:
        raise ValueError(f"conv layer expects rank {nd + 2} weights, got {w.ndim}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv layer: input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    ks = w.shape[2:]
    if any(s % 2 == 0 for s in ks):
        raise ValueError(f"conv layer: kernel extent must be odd, got {ks}")
    spatial = x.shape[2:]
    centre = tuple(s // 2 for s in ks)
    pad = [(0, 0), (0, 0)] + [(c, c) for c in centre]
    xp = np.pad(x.data, pad)
    taps = list(product(*(range(s) for s in ks)))
    spec_in = "bi" + "dhw"[3 - nd:]
    spec_out = "bo" + "dhw"[3 - nd:]

    acc = np.zeros((x.shape[0], w.shape[0]) + spatial, dtype=np.float64)
    for u in taps:
        view = xp[(slice(None), slice(None)) + tuple(
            slice(ui, ui + s) for ui, s in zip(u, spatial))]
        acc += np.einsum(f"oi,{spec_in}->{spec_out}",
                         w.data[(slice(None), slice(None)) + u],
                         view, optimize=True)
    if b is not None:
        acc += b.data.reshape((1, -1) + (1,) * nd)
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(acc, _parents=parents, _op="conv_layer")

    def _bw():
        g = out.grad
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for u in taps:
                view = xp[(slice(None), slice(None)) + tuple(
                    slice(ui, ui + s) for ui, s in zip(u, spatial))]
                gw[(slice(None), slice(None)) + u] = np.einsum(
                    f"{spec_out},{spec_in}->oi", g, view, optimize=True)
            w._accumulate(gw)
        if x.requires_grad:
            gx = np.zeros_like(xp)
            for u in taps:
                gx[(slice(None), slice(None)) + tuple(
                    slice(ui, ui + s) for ui, s in zip(u, spatial))] += np.einsum(
                    f"oi,{spec_out}->{spec_in}",
                    w.data[(slice(None), slice(None)) + u], g, optimize=True)
            crop = (slice(None), slice(None)) + tuple(
                slice(c, c + s) for c, s in zip(centre, spatial))
            x._accumulate(gx[crop])

    out._backward = _bw
    return out


def conv_nn2d(x, w, b=None) -> Tensor:
    """(B, Cin, H, W) x (Cout, Cin, kh, kw) -> (B, Cout, H, W), zero-same."""
    return _conv_nn(as_tensor(x), as_tensor(w),
                    None if b is None else as_tensor(b), 2)


def conv_nn3d(x, w, b=None) -> Tensor:
    """(B, Cin, D, H, W) x (Cout, Cin, kd, kh, kw) -> same spatial, zero-same."""
    return _conv_nn(as_tensor(x), as_tensor(w),
                    None if b is None else as_tensor(b), 3)


# ---------------------------------------------------------------------------
# reductions


def reduce_mean_abs(a, b, weight_map=None) -> Tensor:
    """(1/N) * sum w |a - b| over all cells; w defaults to 1 everywhere.

    Differentiable in a and b with subgradient 0 where a == b.
    """
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "reduce_mean_abs")
    if weight_map is not None:
        weight_map = as_tensor(weight_map)
        _same_shape(a, weight_map, "reduce_mean_abs weight_map")
        if np.any(weight_map.data < 0.0):
            raise ValueError("reduce_mean_abs: negative weight")
    n = a.data.size
    diff = a.data - b.data
    w = weight_map.data if weight_map is not None else None
    contrib = np.abs(diff) if w is None else w * np.abs(diff)
    out = Tensor(contrib.sum() / n, _parents=(a, b), _op="reduce_mean_abs")

    def _bw():
        g = float(out.grad.reshape(()))
        s = np.sign(diff) * (g / n)
        if w is not None:
            s = s * w
        if a.requires_grad:
            a._accumulate(s)
        if b.requires_grad:
            b._accumulate(-s)

    out._backward = _bw
    return out
