"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tape`` is a Wengert list: operations are appended in forward evaluation
order, and ``backward`` walks the list in exact reverse, accumulating adjoints
into per-node gradient slots.  ``DiffTensor`` is a handle to one recorded
value.  All values are C-contiguous float64 arrays; there is no broadcasting
beyond scalar constants and the explicit bias/normalization ops below.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tape",
    "DiffTensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "shift",
    "add_bias",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "sum_axes",
    "mean_all",
    "sqrt",
    "absolute",
    "gelu",
    "leaky_relu",
    "softmax_last_axis",
    "layer_norm_channels",
    "conv2d",
    "upsample_nearest2",
    "fft2_stack",
    "fft2",
    "backward",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_array(x) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    return a


class Tape:
    """Ordered record of operations; recording order equals forward order."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._pullbacks: list = []
        self._grads: list | None = None

    def __len__(self) -> int:
        return len(self._parents)

    def _record(self, parents: tuple[int, ...], pullback) -> int:
        self._parents.append(parents)
        self._pullbacks.append(pullback)
        return len(self._parents) - 1

    def leaf(self, value) -> "DiffTensor":
        """Record an input node (parameter or data constant)."""
        node_id = self._record((), None)
        return DiffTensor(_as_array(value), self, node_id)

    def backward(self, root: "DiffTensor") -> None:
        """Populate gradients of every node reachable from a scalar root.

        The reverse sweep releases each pullback as it goes, freeing the
        forward intermediates its closure captured; a tape therefore supports
        exactly one backward pass.
        """
        if root.tape is not self:
            raise ValueError("root was not recorded on this tape")
        if root.value.size != 1:
            raise ValueError(
                f"backward root must be a scalar, got shape {root.value.shape}"
            )
        if self._grads is not None:
            raise ValueError("tape already ran backward; record a fresh tape")
        grads: list = [None] * len(self._parents)
        grads[root.node_id] = np.ones_like(root.value)
        for nid in range(len(self._parents) - 1, -1, -1):
            pullback = self._pullbacks[nid]
            self._pullbacks[nid] = None
            g = grads[nid]
            if nid > root.node_id or g is None or pullback is None:
                continue
            contribs = pullback(g)
            for pid, contrib in zip(self._parents[nid], contribs):
                if contrib is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = contrib
                else:
                    grads[pid] = grads[pid] + contrib
        self._grads = grads

    def grad_at(self, node_id: int, like: np.ndarray) -> np.ndarray:
        if self._grads is None or self._grads[node_id] is None:
            return np.zeros_like(like)
        return self._grads[node_id]


class DiffTensor:
    """A value on the tape together with its accumulated-gradient slot."""

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value: np.ndarray, tape: Tape, node_id: int):
        self.value = value
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        return self.tape.grad_at(self.node_id, self.value)

    def backward(self) -> None:
        self.tape.backward(self)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"DiffTensor(shape={self.value.shape}, node={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _unary(a: DiffTensor, value: np.ndarray, pullback) -> DiffTensor:
    nid = a.tape._record((a.node_id,), pullback)
    return DiffTensor(value, a.tape, nid)


def _binary(a: DiffTensor, b: DiffTensor, value: np.ndarray, pullback) -> DiffTensor:
    if a.tape is not b.tape:
        raise ValueError("operands live on different tapes")
    nid = a.tape._record((a.node_id, b.node_id), pullback)
    return DiffTensor(value, a.tape, nid)


def add(a: DiffTensor, b) -> DiffTensor:
    """Elementwise sum; `b` may be a DiffTensor of equal shape or a constant."""
    if isinstance(b, DiffTensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
        return _binary(a, b, a.value + b.value, lambda g: (g, g))
    return _unary(a, a.value + _as_array(b), lambda g: (g,))


def shift(a: DiffTensor, c: float) -> DiffTensor:
    """Add a python-float constant."""
    return _unary(a, a.value + float(c), lambda g: (g,))


def sub(a: DiffTensor, b) -> DiffTensor:
    if isinstance(b, DiffTensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch in sub: {a.shape} vs {b.shape}")
        return _binary(a, b, a.value - b.value, lambda g: (g, -g))
    return _unary(a, a.value - _as_array(b), lambda g: (g,))


def neg(a: DiffTensor) -> DiffTensor:
    return _unary(a, -a.value, lambda g: (-g,))


def mul(a: DiffTensor, b) -> DiffTensor:
    """Elementwise product; `b` may be a DiffTensor of equal shape or a constant."""
    if isinstance(b, DiffTensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch in mul: {a.shape} vs {b.shape}")
        av, bv = a.value, b.value
        return _binary(a, b, av * bv, lambda g: (g * bv, g * av))
    bc = _as_array(b)
    return _unary(a, a.value * bc, lambda g: (g * bc,))


def scale(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)
    return _unary(a, a.value * c, lambda g: (g * c,))


def add_bias(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Add a rank-1 bias along the last axis of `a`."""
    if b.value.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"bias shape {b.shape} incompatible with {a.shape}")
    lead = tuple(range(a.value.ndim - 1))
    return _binary(a, b, a.value + b.value, lambda g: (g, g.sum(axis=lead)))


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Matrix product; supports equal leading batch dimensions."""
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.ndim != bv.ndim:
        raise ValueError(f"matmul needs equal-rank operands >=2D: {av.shape} x {bv.shape}")
    if av.shape[-1] != bv.shape[-2] or av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} x {bv.shape}")

    def pullback(g):
        return (g @ bv.swapaxes(-1, -2), av.swapaxes(-1, -2) @ g)

    return _binary(a, b, av @ bv, pullback)


def reshape(a: DiffTensor, shape) -> DiffTensor:
    shape = tuple(shape)
    old = a.value.shape
    return _unary(a, a.value.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: DiffTensor, axes) -> DiffTensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _unary(
        a, np.ascontiguousarray(a.value.transpose(axes)), lambda g: (g.transpose(inv),)
    )


def concat(parts: list[DiffTensor], axis: int) -> DiffTensor:
    if not parts:
        raise ValueError("concat of zero tensors")
    tape = parts[0].tape
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    count = len(parts)  # closure must not capture the operand tensors

    def pullback(g):
        return tuple(
            np.ascontiguousarray(
                g.take(range(offsets[i], offsets[i + 1]), axis=axis)
            )
            for i in range(count)
        )

    value = np.concatenate([p.value for p in parts], axis=axis)
    nid = tape._record(tuple(p.node_id for p in parts), pullback)
    return DiffTensor(value, tape, nid)


def narrow(a: DiffTensor, axis: int, start: int, length: int) -> DiffTensor:
    """Contiguous slice `[start, start+length)` along one axis."""
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    full_shape = a.value.shape

    def pullback(g):
        out = np.zeros(full_shape)
        out[idx] = g
        return (out,)

    return _unary(a, np.ascontiguousarray(a.value[idx]), pullback)


def sum_axes(a: DiffTensor, axes) -> DiffTensor:
    """Sum over the given axes (not kept)."""
    axes = tuple(sorted(ax % a.value.ndim for ax in axes))
    in_shape = a.value.shape
    expand = [1 if i in axes else n for i, n in enumerate(in_shape)]

    def pullback(g):
        return (np.broadcast_to(g.reshape(expand), in_shape) + 0.0,)

    return _unary(a, a.value.sum(axis=axes), pullback)


def mean_all(a: DiffTensor) -> DiffTensor:
    n = a.value.size
    in_shape = a.value.shape

    def pullback(g):
        return (np.full(in_shape, float(g) / n),)

    return _unary(a, np.asarray(a.value.mean()), pullback)


def sqrt(a: DiffTensor) -> DiffTensor:
    y = np.sqrt(a.value)
    return _unary(a, y, lambda g: (g * (0.5 / y),))


def absolute(a: DiffTensor) -> DiffTensor:
    s = np.sign(a.value)
    return _unary(a, np.abs(a.value), lambda g: (g * s,))


def gelu(a: DiffTensor) -> DiffTensor:
    """Exact (erf-based) GELU."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * cdf

    def pullback(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _unary(a, y, pullback)


def leaky_relu(a: DiffTensor, slope: float = 0.1) -> DiffTensor:
    x = a.value
    factor = np.where(x >= 0, 1.0, slope)
    return _unary(a, x * factor, lambda g: (g * factor,))


def softmax_last_axis(a: DiffTensor) -> DiffTensor:
    """Row-stochastic softmax over the last axis, computed with max-subtraction."""
    x = a.value
    if x.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last axis")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def pullback(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _unary(a, y, pullback)


def layer_norm_channels(
    a: DiffTensor, gamma: DiffTensor, beta: DiffTensor, eps: float = 1e-5
) -> DiffTensor:
    """Normalize the last (channel) axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer norm eps must be positive, got {eps}")
    x = a.value
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"affine params must have shape ({c},), got {gamma.shape}/{beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.value + beta.value
    lead = tuple(range(x.ndim - 1))

    def pullback(g):
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.value
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        return (dx, dgamma, dbeta)

    nid = a.tape._record((a.node_id, gamma.node_id, beta.node_id), pullback)
    return DiffTensor(y, a.tape, nid)


def _same_pad(extent: int, stride: int, k: int) -> tuple[int, int, int]:
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    return out, total // 2, total - total // 2


def conv2d(
    x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None, stride: int = 1
) -> DiffTensor:
    """Cross-correlation with zero padding sized so output extents are ceil(H/s), ceil(W/s).

    `x` is [H,W,Cin] or [T,H,W,Cin]; `w` is [k,k,Cin,Cout]; optional bias [Cout].
    """
    squeeze = x.value.ndim == 3
    xv = x.value[None] if squeeze else x.value
    wv = w.value
    k = wv.shape[0]
    if wv.ndim != 4 or wv.shape[1] != k:
        raise ValueError(f"kernel must be [k,k,Cin,Cout], got {wv.shape}")
    if k % 2 != 1:
        raise ValueError(f"kernel extent must be odd, got {k}")
    t, h, wd, cin = xv.shape
    if wv.shape[2] != cin:
        raise ValueError(
            f"kernel input channels {wv.shape[2]} do not match input channels {cin}"
        )
    cout = wv.shape[3]
    ho, pt, pb = _same_pad(h, stride, k)
    wo, pl, pr = _same_pad(wd, stride, k)
    xpad = np.pad(xv, ((0, 0), (pt, pb), (pl, pr), (0, 0)))

    y = np.zeros((t * ho * wo, cout))
    for ki in range(k):
        for kj in range(k):
            sl = xpad[:, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride, :]
            y += sl.reshape(t * ho * wo, cin) @ wv[ki, kj]
    has_bias = b is not None  # closure must not capture the bias tensor
    if has_bias:
        y += b.value
    y = y.reshape(t, ho, wo, cout)

    def pullback(g):
        gm = g.reshape(t * ho * wo, cout)
        dw = np.empty_like(wv)
        dxpad = np.zeros_like(xpad)
        for ki in range(k):
            for kj in range(k):
                sl = xpad[
                    :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride, :
                ]
                dw[ki, kj] = sl.reshape(t * ho * wo, cin).T @ gm
                dxpad[
                    :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride, :
                ] += (gm @ wv[ki, kj].T).reshape(t, ho, wo, cin)
        dx = dxpad[:, pt : pt + h, pl : pl + wd, :]
        if squeeze:
            dx = dx[0]
        grads = (np.ascontiguousarray(dx), dw)
        if has_bias:
            return grads + (gm.sum(axis=0),)
        return grads

    parents = (x.node_id, w.node_id) + (() if b is None else (b.node_id,))
    nid = x.tape._record(parents, pullback)
    out = y[0] if squeeze else y
    return DiffTensor(np.ascontiguousarray(out), x.tape, nid)


def upsample_nearest2(a: DiffTensor) -> DiffTensor:
    """Nearest-neighbor 2x upsampling of [T,H,W,C] along H and W."""
    t, h, w, c = a.value.shape
    y = a.value.repeat(2, axis=1).repeat(2, axis=2)

    def pullback(g):
        return (g.reshape(t, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _unary(a, y, pullback)


def fft2_stack(a: DiffTensor) -> DiffTensor:
    """Unnormalized 2-D DFT over the last two axes, returned as [..., H, W, 2] (re, im)."""
    spec = np.fft.fft2(a.value, axes=(-2, -1))
    y = np.ascontiguousarray(np.stack([spec.real, spec.imag], axis=-1))
    n = a.value.shape[-2] * a.value.shape[-1]

    def pullback(g):
        gc = g[..., 0] + 1j * g[..., 1]
        return (np.fft.ifft2(gc, axes=(-2, -1)).real * n,)

    return _unary(a, y, pullback)


def fft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2-D DFT of a real image (full complex spectrum)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"need at least a 1x1 image, got shape {x.shape}")
    return np.fft.fft2(x, axes=(-2, -1))


def backward(root: DiffTensor) -> None:
    """Run reverse-mode accumulation from a scalar root."""
    root.tape.backward(root)
