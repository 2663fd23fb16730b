"""Dense float64 tensors with reverse-mode autodiff on an append-order tape.

The tape is rebuilt on every forward pass (define-by-run). Each recorded op
stores a closure that maps the output gradient to input gradients; backward
walks the tape in reverse append order from the loss node, so topological
order is implicit. Disjoint subgraphs on one tape (e.g. a discriminator pass
over detached inputs) can be backpropagated independently; each node is
consumed at most once.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, DimensionError, NumericFaultError, TapeError


class Tensor:
    """A float64 array that optionally participates in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node = -1  # index of producing tape node; -1 for leaves

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and arrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    consumed: bool = False


class GradTape:
    """Ordered op record; reverse append order is a valid backward order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def reset(self) -> None:
        self.nodes.clear()


class _TapeState(threading.local):
    """Per-thread tape and recording flag, so concurrent workers (e.g. clients
    training in parallel) build and consume fully independent graphs."""

    def __init__(self):
        self.tape = GradTape()
        self.grad_enabled = True


_STATE = _TapeState()


def active_tape() -> GradTape:
    return _STATE.tape


def reset_tape() -> None:
    """Drop all nodes recorded by this thread; call between training iterations."""
    _STATE.tape.reset()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (current thread only)."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def _record(out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _STATE.grad_enabled and any(t.requires_grad for t in inputs):
        tape = _STATE.tape
        out.requires_grad = True
        out._node = len(tape.nodes)
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    Accumulates into existing grads. Re-running backward on the same loss
    without a fresh forward raises TapeError.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    if loss._node < 0:
        if not loss.requires_grad:
            raise ContractError("loss is not connected to the tape")
        # A bare leaf: gradient of itself is 1.
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
        return
    tape = _STATE.tape
    root = tape.nodes[loss._node]
    if root.consumed:
        raise TapeError("backward already ran for this loss; re-run the forward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for idx in range(loss._node, -1, -1):
        node = tape.nodes[idx]
        dout = grads.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if dout is None or node.consumed:
            continue
        node.consumed = True
        for t, g in zip(node.inputs, node.backward_fn(dout)):
            if g is None or not t.requires_grad:
                continue
            if t._node >= 0:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    holders[key] = t
            else:
                t.grad = g if t.grad is None else t.grad + g
    # Anything left in `grads` belongs to leaves that were recorded before the
    # walk window; flush them.
    for key, g in grads.items():
        t = holders[key]
        if t._node < 0 and t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericFaultError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _record(out, (a, b), lambda d: (_unbroadcast(d, a.data.shape), _unbroadcast(d, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _record(
        out,
        (a, b),
        lambda d: (_unbroadcast(d * b.data, a.data.shape), _unbroadcast(d * a.data, b.data.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda d: (-d,))


def scale(a: Tensor, s: float) -> Tensor:
    return _record(a.data * s, (a,), lambda d: (d * s,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _record(out, (a,), lambda d: (d * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda d: (d * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _record(out, (a,), lambda d: (d / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500.0, 500.0)))
    return _record(out, (a,), lambda d: (d * out * (1.0 - out),))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(d):
        if axis is None:
            return (np.broadcast_to(d, a.data.shape).copy(),)
        dd = d if keepdims else np.expand_dims(d, axis)
        return (np.broadcast_to(dd, a.data.shape).copy(),)

    return _record(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(d):
        if axis is None:
            return (np.broadcast_to(d / n, a.data.shape).copy(),)
        dd = d if keepdims else np.expand_dims(d, axis)
        return (np.broadcast_to(dd / n, a.data.shape).copy(),)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record(a.data.reshape(shape), (a,), lambda d: (d.reshape(a.data.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda d: (np.transpose(d, inv),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries along `axis` starting at `start`."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(d):
        g = np.zeros_like(a.data)
        g[sl] = d
        return (g,)

    return _record(a.data[sl].copy(), (a,), bwd)


def index_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(d):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, d)
        return (g,)

    return _record(a.data[idx], (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(d):
        outs = []
        for i in range(len(datas)):
            sl = [slice(None)] * d.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(d[tuple(sl)])
        return outs

    return _record(np.concatenate(datas, axis=axis), tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _record(out, (a, b), lambda d: (d @ b.data.T, a.data.T @ d))


def l2_normalize(a: Tensor, eps: float = 0.0) -> Tensor:
    """Normalize along the last axis. Zero-norm rows raise NumericFaultError."""
    norm = np.sqrt((a.data**2).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps) or not np.all(np.isfinite(norm)):
        raise NumericFaultError("l2_normalize on a zero or non-finite vector")
    out = a.data / norm

    def bwd(d):
        dot = (d * out).sum(axis=-1, keepdims=True)
        return ((d - out * dot) / norm,)

    return _record(out, (a,), bwd)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between flattened a and b (scalar output)."""
    av = a.data.ravel()
    bv = b.data.ravel()
    if av.size != bv.size:
        raise DimensionError("cosine_similarity operands differ in size")
    na = np.sqrt(av @ av)
    nb = np.sqrt(bv @ bv)
    if na == 0.0 or nb == 0.0:
        raise NumericFaultError("cosine_similarity with a zero vector")
    c = float(av @ bv / (na * nb))

    def bwd(d):
        da = (bv / (na * nb) - c * av / (na * na)) * d
        db = (av / (na * nb) - c * bv / (nb * nb)) * d
        return (da.reshape(a.data.shape), db.reshape(b.data.shape))

    return _record(np.float64(c), (a, b), bwd)


# ---------------------------------------------------------------------------
# Convolution and spatial ops
# ---------------------------------------------------------------------------

def _im2col(xpad: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Patch matrix in batched layout (n, c*kh*kw, oh*ow)."""
    n, c, _, _ = xpad.shape
    s0, s1, s2, s3 = xpad.strides
    view = as_strided(
        xpad,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW cross-correlation with odd square-ish kernels; floor output sizing."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    n, cin, h, wd = x.data.shape
    cout, cin_k, kh, kw = w.data.shape
    if cin != cin_k:
        raise DimensionError(f"conv2d channel mismatch: input {cin} vs kernel {cin_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError("conv2d requires odd kernel sizes")
    if padding < 0 or stride < 1:
        raise ContractError("conv2d requires padding >= 0 and stride >= 1")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError("conv2d output would be empty")

    wmat = w.data.reshape(cout, cin * kh * kw)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(n, cin, oh * ow)
    else:
        if padding:
            xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            xpad = x.data
        cols = _im2col(xpad, kh, kw, stride, oh, ow)  # (n, cin*kh*kw, oh*ow)
    out = np.matmul(wmat, cols).reshape(n, cout, oh, ow)

    def bwd(d):
        dmat = d.reshape(n, cout, oh * ow)
        dw = np.matmul(dmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, dmat)  # (n, cin*kh*kw, oh*ow)
            if pointwise:
                dx = dcols.reshape(n, cin, h, wd)
            else:
                dcols = dcols.reshape(n, cin, kh, kw, oh, ow)
                hp, wp = h + 2 * padding, wd + 2 * padding
                dxp = np.zeros((n, cin, hp, wp))
                for ki in range(kh):
                    for kj in range(kw):
                        dxp[
                            :, :, ki : ki + (oh - 1) * stride + 1 : stride, kj : kj + (ow - 1) * stride + 1 : stride
                        ] += dcols[:, :, ki, kj]
                dx = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + wd]) if padding else dxp
        return (dx, dw)

    return _record(out, (x, w), bwd)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    if b.data.ndim != 1 or b.data.shape[0] != x.data.shape[1]:
        raise DimensionError("bias length must equal channel count")
    out = x.data + b.data[None, :, None, None]
    return _record(out, (x, b), lambda d: (d, d.sum(axis=(0, 2, 3))))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour integer-factor spatial upsampling of an NCHW tensor."""
    if x.data.ndim != 4:
        raise DimensionError("upsample_nearest expects NCHW")
    if factor < 1:
        raise ContractError("upsample factor must be >= 1")
    n, c, h, w = x.data.shape
    f = factor
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, f, w, f)).reshape(n, c, f * h, f * w)

    def bwd(d):
        return (d.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _record(np.ascontiguousarray(out), (x,), bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NCHW tensor."""
    return upsample_nearest(x, 2)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> (N, C) spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError("global_avg_pool expects NCHW")
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# Softmax-family losses
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(d):
        dot = (d * out).sum(axis=axis, keepdims=True)
        return (out * (d - dot),)

    return _record(out, (a,), bwd)


def softmax_cross_entropy(logits: Tensor, target: np.ndarray, ignore_label: int = -1) -> Tensor:
    """Mean pixel-wise cross-entropy of NCHW logits against an integer mask.

    Pixels whose target equals `ignore_label` contribute neither loss nor
    gradient. With every pixel ignored the loss is exactly 0.
    """
    if logits.data.ndim != 4:
        raise DimensionError("softmax_cross_entropy expects NCHW logits")
    n, c, h, w = logits.data.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise DimensionError(f"target shape {target.shape} mismatches logits {(n, h, w)}")
    valid = target != ignore_label
    if np.any((target[valid] < 0) | (target[valid] >= c)):
        raise ContractError("target labels out of range")
    count = int(valid.sum())

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(z)
    if count == 0:
        return _record(np.float64(0.0), (logits,), lambda d: (np.zeros_like(logits.data),))
    safe_t = np.where(valid, target, 0)
    picked = np.take_along_axis(log_probs, safe_t[:, None], axis=1)[:, 0]
    loss = -float(picked[valid].sum()) / count

    def bwd(d):
        p = e / z
        # (batch, pixel) index pairs are unique, so direct fancy indexing works
        flat = p.reshape(n, c, h * w)
        flat[np.arange(n)[:, None], safe_t.reshape(n, h * w), np.arange(h * w)[None]] -= 1.0
        p *= valid[:, None] * (d / count)
        return (p,)

    return _record(np.float64(loss), (logits,), bwd)


def softmax_cross_entropy_soft(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean position-wise cross-entropy of NCHW logits against per-position
    class distributions q: mean over positions of logsumexp(z) − Σ_c q_c·z_c.

    With q = the one-hot (or block-histogram) encoding of an integer mask this
    equals softmax_cross_entropy of the nearest-upsampled logits exactly.
    """
    if logits.data.ndim != 4:
        raise DimensionError("softmax_cross_entropy_soft expects NCHW logits")
    q = np.asarray(target_probs, dtype=np.float64)
    if q.shape != logits.data.shape:
        raise DimensionError("target_probs shape mismatch")
    if np.any(q < 0) or not np.allclose(q.sum(axis=1), 1.0, atol=1e-9):
        raise ContractError("target_probs rows must be distributions")
    n, c, h, w = logits.data.shape
    npos = n * h * w
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    lse = np.log(z) + m
    loss = float((lse[:, 0] - (q * logits.data).sum(axis=1)).sum()) / npos

    def bwd(d):
        return ((e / z - q) * (d / npos),)

    return _record(np.float64(loss), (logits,), bwd)


def kl_divergence(p_logits: Tensor, q_logits: Tensor, axis: int = 1) -> Tensor:
    """KL(softmax(p) || softmax(q)) averaged over all non-`axis` positions."""
    if p_logits.data.shape != q_logits.data.shape:
        raise DimensionError("kl_divergence operands must share a shape")

    def _log_softmax(x):
        s = x - x.max(axis=axis, keepdims=True)
        return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))

    logp = _log_softmax(p_logits.data)
    logq = _log_softmax(q_logits.data)
    p = np.exp(logp)
    per_pos = (p * (logp - logq)).sum(axis=axis)
    npos = per_pos.size if per_pos.size else 1
    loss = float(per_pos.sum()) / npos

    def bwd(d):
        q = np.exp(logq)
        dq = (q - p) / npos * d if q_logits.requires_grad else None
        dp = None
        if p_logits.requires_grad:
            inner = logp - logq
            kl_pos = np.expand_dims(per_pos, axis)
            dp = p * (inner - kl_pos) / npos * d
        return (dp, dq)

    return _record(np.float64(loss), (p_logits, q_logits), bwd)


def binary_cross_entropy(p_hat: Tensor, target: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities against {0,1} targets; inputs clamped away from 0/1."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != p_hat.data.shape:
        raise DimensionError("binary_cross_entropy target shape mismatch")
    p = np.clip(p_hat.data, clamp, 1.0 - clamp)
    n = p.size
    loss = -float((t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum()) / n
    inside = (p_hat.data > clamp) & (p_hat.data < 1.0 - clamp)

    def bwd(d):
        return (np.where(inside, (p - t) / (p * (1.0 - p)), 0.0) / n * d,)

    return _record(np.float64(loss), (p_hat,), bwd)


def info_nce(anchor: Tensor, positives: Tensor, negatives: Tensor, tau: float) -> Tensor:
    """InfoNCE over unit vectors: mean over positives of the (1+n_neg)-way
    softmax cross-entropy with the positive in slot 0.

    anchor: (K,); positives: (P, K) with P >= 1; negatives: (N, K), N may be 0.
    With no negatives the loss is exactly 0.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    a = anchor.data.ravel()
    pos = positives.data.reshape(-1, a.size)
    neg = negatives.data.reshape(-1, a.size) if negatives.data.size else np.zeros((0, a.size))
    n_pos, n_neg = pos.shape[0], neg.shape[0]
    if n_pos < 1:
        raise ContractError("info_nce requires at least one positive")

    s_pos = pos @ a / tau  # (P,)
    s_neg = neg @ a / tau  # (N,)
    # rows: [s_pos_i, s_neg_1 .. s_neg_N]
    rows = np.concatenate([s_pos[:, None], np.broadcast_to(s_neg, (n_pos, n_neg))], axis=1)
    m = rows.max(axis=1, keepdims=True)
    e = np.exp(rows - m)
    z = e.sum(axis=1, keepdims=True)
    loss = float((np.log(z) + m - rows[:, :1]).sum()) / n_pos

    def bwd(d):
        p = e / z  # (P, 1+N)
        p[:, 0] -= 1.0
        p *= d / (n_pos * tau)
        da = p[:, 0] @ pos + p[:, 1:].sum(axis=0) @ neg if anchor.requires_grad else None
        dpos = p[:, :1] * a[None] if positives.requires_grad else None
        dneg = p[:, 1:].sum(axis=0)[:, None] * a[None] if negatives.requires_grad else None
        return (
            None if da is None else da.reshape(anchor.data.shape),
            None if dpos is None else dpos.reshape(positives.data.shape),
            None if dneg is None else dneg.reshape(negatives.data.shape),
        )

    return _record(np.float64(loss), (anchor, positives, negatives), bwd)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class SgdConfig:
    learning_rate: float = 0.05
    weight_decay: float = 5e-4
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive when set")


def global_grad_norm(params: Iterable[Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    return float(np.sqrt(sq))


def sgd_step(params: Sequence[Tensor], cfg: SgdConfig) -> None:
    """p <- p - lr * (grad + wd * p), after optional global-norm clipping.

    Grads are zeroed afterwards. A parameter without a grad is a contract
    violation (its loss graph did not reach it).
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step on a parameter with no gradient")
    scale_f = 1.0
    if cfg.clip_norm is not None:
        norm = global_grad_norm(params)
        if norm > cfg.clip_norm:
            scale_f = cfg.clip_norm / norm
    for p in params:
        g = p.grad if scale_f == 1.0 else p.grad * scale_f
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        p.data -= cfg.learning_rate * g
        p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
