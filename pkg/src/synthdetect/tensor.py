"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and an adjoint closure on the output
tensor; ``backward`` on a scalar loss replays the adjoints in reverse
topological order (the computation tape) and deposits ``.grad`` on every
requires_grad leaf exactly once. The tape is consumed by ``backward``:
a second call on the same graph raises, and double-backward is unsupported.

Layout convention is NCHW for 4-D tensors. Set ``SYNTHDETECT_DEBUG_NAN=1``
to make every op raise on non-finite outputs.

Tensors are treated as immutable once created (ops allocate new outputs),
so read-only tensors such as eval-mode weights can be shared freely across
threads; the grad-mode flag is thread-local and each forward/backward pass
owns its own graph, so batch-parallel evaluation is safe as long as each
worker builds its own loss.
"""

import os
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def enable_grad():
    """Force tape recording, overriding an enclosing no_grad block."""
    prev = _grad_enabled()
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _debug_nan() -> bool:
    return os.environ.get("SYNTHDETECT_DEBUG_NAN", "") == "1"


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs, backward, op: str) -> Tensor:
    if _debug_nan() and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by '{op}'")
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _toposort(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every requires_grad leaf.

    ``loss`` must be scalar. Consumes the tape; the graph cannot be
    replayed and double-backward is not supported.
    """
    if loss.size != 1:
        raise ValueError("backward requires a scalar loss, got shape "
                         f"{loss.shape}")
    if loss._node is None and loss._consumed:
        raise RuntimeError("tape already consumed: double-backward is "
                           "not supported")
    if loss._node is None and not loss.requires_grad:
        raise RuntimeError("loss is not attached to a computation tape")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi
    for t in order:
        if t._node is not None:
            t._node = None
            t._consumed = True


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd, "mul")


def scale(a, s: float) -> Tensor:
    a = _t(a)
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,), "scale")


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError("matmul supports 1-D and 2-D operands only")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        a2 = a.data[None, :] if a.ndim == 1 else a.data
        b2 = b.data[:, None] if b.ndim == 1 else b.data
        g2 = np.asarray(g)
        if a.ndim == 1 and b.ndim == 1:
            g2 = g2.reshape(1, 1)
        elif a.ndim == 1:
            g2 = g2[None, :]
        elif b.ndim == 1:
            g2 = g2[:, None]
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return _record(out, (a, b), bwd, "matmul")


def relu(a) -> Tensor:
    a = _t(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,), "relu")


def relu_guided(a) -> Tensor:
    """ReLU whose adjoint also zeroes negative upstream gradients."""
    a = _t(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask * (g > 0),), "relu_guided")


def sigmoid(a) -> Tensor:
    a = _t(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def logsigmoid(a) -> Tensor:
    """log(sigmoid(x)) computed without overflow or log(0)."""
    a = _t(a)
    x = a.data
    out = Tensor(np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x))))
    sneg = np.where(x >= 0, np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
                    1.0 / (1.0 + np.exp(-np.abs(x))))
    return _record(out, (a,), lambda g: (g * sneg,), "logsigmoid")


def power(a, p: float) -> Tensor:
    a = _t(a)
    p = float(p)
    out = Tensor(a.data ** p)

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),) if p != 0.0 else (g * 0.0,)

    return _record(out, (a,), bwd, "power")


def _check_axis(axis, ndim, op):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"{op}: axis {ax} out of range for ndim {ndim}")
    return tuple(ax % ndim for ax in axes)


def softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    (ax,) = _check_axis(axis, a.ndim, "softmax")
    x = a.data
    e = np.exp(x - x.max(axis=ax, keepdims=True))
    s = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _record(out, (a,), bwd, "softmax")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _check_axis(axis, a.ndim, "sum")
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def bwd(g):
        g = np.asarray(g)
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bwd, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _check_axis(axis, a.ndim, "mean")
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    count = (a.size if axes is None
             else int(np.prod([a.shape[ax] for ax in axes])))

    def bwd(g):
        g = np.asarray(g) / count
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = _t(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    (ax,) = _check_axis(axis, tensors[0].ndim, "concat")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p)
                     for p in np.split(g, bounds, axis=ax))

    return _record(out, tuple(tensors), bwd, "concat")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _t(a)
    (ax,) = _check_axis(axis, a.ndim, "narrow")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def bwd(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _record(out, (a,), bwd, "narrow")


def broadcast_to(a, shape) -> Tensor:
    a = _t(a)
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),),
                   "broadcast")


def channel_max(a, axis: int = 1, keepdims: bool = True) -> Tensor:
    """Max along one axis; ties send the gradient to the first maximum."""
    a = _t(a)
    (ax,) = _check_axis(axis, a.ndim, "max")
    out_data = a.data.max(axis=ax, keepdims=True)
    am = np.argmax(a.data, axis=ax)

    def bwd(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(a.shape)
        np.put_along_axis(full, np.expand_dims(am, ax), g, axis=ax)
        return (full,)

    out = Tensor(out_data if keepdims else out_data.squeeze(ax))
    return _record(out, (a,), bwd, "max")


# ---------------------------------------------------------------------------
# convolution


def _as_dilation_map(dilation, N, Ho, Wo):
    d = dilation.data if isinstance(dilation, Tensor) else np.asarray(
        dilation, dtype=np.float64)
    if d.ndim == 4:
        if d.shape[1] != 1:
            raise ValueError("dilation map must have a single channel")
        d = d[:, 0]
    elif d.ndim == 2:
        d = d[None]
    elif d.ndim != 3:
        raise ValueError("dilation map must be 2-D, 3-D or 4-D")
    if d.shape[-2:] != (Ho, Wo):
        raise ValueError(f"dilation map spatial shape {d.shape[-2:]} does "
                         f"not match output {(Ho, Wo)}")
    return np.ascontiguousarray(np.broadcast_to(d, (N, Ho, Wo)))


def conv2d(x, w, bias=None, stride: int = 1, dilation=1) -> Tensor:
    """2-D convolution (correlation) with same-padding at stride 1.

    ``dilation`` may be a positive scalar or a per-position map; fractional
    or spatially varying dilation fetches taps by bilinear interpolation
    with zero outside the image. Integer dilation takes an exact lattice
    path whose accumulation order matches a naive nested-loop reference.
    """
    x, w = _t(x), _t(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weights")
    if w.shape[2] != w.shape[3]:
        raise ValueError("conv2d supports square kernels only")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, "
                         f"weights expect {w.shape[1]}")
    stride = int(stride)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    N, C, H, W = x.shape
    O, _, K, _ = w.shape
    b = _t(bias) if bias is not None else None
    if b is not None and b.shape != (O,):
        raise ValueError("bias must have shape (O,)")

    map_mode = isinstance(dilation, (Tensor, np.ndarray))
    if not map_mode:
        dval = float(dilation)
        if dval <= 0:
            raise ValueError("dilation must be positive")
        if dval == int(dval):
            return _conv2d_int(x, w, b, stride, int(dval))
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    if K % 2 == 0:
        raise ValueError("fractional dilation requires an odd kernel")
    if map_mode:
        dil_t = dilation if isinstance(dilation, Tensor) else Tensor(dilation)
        dmap = _as_dilation_map(dil_t, N, Ho, Wo)
        if np.any(dmap < 0):
            raise ValueError("dilation map values must be >= 0")
    else:
        dil_t = None
        dmap = np.full((N, Ho, Wo), dval)
    return _conv2d_frac(x, w, b, stride, dmap, dil_t)


def _conv2d_int(x, w, b, stride, dil):
    N, C, H, W = x.shape
    O, _, K, _ = w.shape
    ext = (K - 1) * dil + 1
    pad = ((K - 1) * dil) // 2
    if H + 2 * pad < ext or W + 2 * pad < ext:
        raise ValueError("kernel does not fit the padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - ext) // stride + 1
    Wo = (W + 2 * pad - ext) // stride + 1
    out_data = np.empty((N, O, Ho, Wo))
    kernels.conv_int_forward(xp, w.data, stride, dil, out_data)
    if b is not None:
        out_data += b.data[None, :, None, None]
    out = Tensor(out_data)

    def bwd(g):
        need_dx = x.requires_grad
        need_dw = w.requires_grad
        dxp, dw = kernels.conv_int_backward(xp, w.data, stride, dil, g,
                                            need_dx, need_dw)
        dx = None
        if need_dx:
            dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd, "conv2d")


def _conv2d_frac(x, w, b, stride, dmap, dil_t):
    N, C, H, W = x.shape
    O, _, K, _ = w.shape
    Ho, Wo = dmap.shape[1], dmap.shape[2]
    L = Ho * Wo
    P = np.empty((N, C, K * K, L))
    kernels.frac_gather(x.data, dmap, stride, K, P)
    w2 = w.data.reshape(O, C * K * K)
    out_data = np.matmul(w2, P.reshape(N, C * K * K, L)).reshape(N, O, Ho, Wo)
    if b is not None:
        out_data += b.data[None, :, None, None]
    out = Tensor(out_data)

    def bwd(g):
        g2 = g.reshape(N, O, L)
        dP = np.matmul(w2.T, g2)  # (N, C*K*K, L)
        dw = np.einsum('nol,nkl->ok', g2, P.reshape(N, C * K * K, L),
                       optimize=True).reshape(w.shape)
        dx = np.zeros((N, C, H, W))
        want_ddil = dil_t is not None and dil_t.requires_grad
        ddil = np.zeros((N, Ho, Wo)) if want_ddil else None
        kernels.frac_backward(x.data, dmap, stride, K,
                              dP.reshape(N, C, K * K, L), dx, ddil)
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        if dil_t is not None:
            dd = ddil if ddil is not None else np.zeros((N, Ho, Wo))
            grads.append(_unbroadcast(dd.reshape(N, 1, Ho, Wo)
                                      if dil_t.ndim == 4 else dd,
                                      dil_t.shape))
        return tuple(grads)

    inputs = [x, w]
    if b is not None:
        inputs.append(b)
    if dil_t is not None:
        inputs.append(dil_t)
    return _record(out, tuple(inputs), bwd, "conv2d_frac")


def modulated_frac_conv2d(x, w_low, w_high, lam, dilation) -> Tensor:
    """conv(x, w_low, dil) + lam * conv(x, w_high, dil) with one shared
    bilinear patch gather; the workhorse of the frequency-adaptive conv.

    ``lam`` is a per-position (N,1,H,W) modulation map and ``dilation`` a
    per-position map as in conv2d. Equivalent to composing two conv2d calls
    but samples and scatters the taps once.
    """
    x, w_low, w_high, lam = _t(x), _t(w_low), _t(w_high), _t(lam)
    if x.ndim != 4 or w_low.ndim != 4 or w_low.shape != w_high.shape:
        raise ValueError("expected NCHW input and two OIKK weight tensors "
                         "of the same shape")
    if x.shape[1] != w_low.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, "
                         f"weights expect {w_low.shape[1]}")
    N, C, H, W = x.shape
    O, _, K, _ = w_low.shape
    if K % 2 == 0:
        raise ValueError("fractional dilation requires an odd kernel")
    if lam.shape != (N, 1, H, W):
        raise ValueError(f"lam must have shape {(N, 1, H, W)}")
    dil_t = dilation if isinstance(dilation, Tensor) else Tensor(dilation)
    dmap = _as_dilation_map(dil_t, N, H, W)
    if np.any(dmap < 0):
        raise ValueError("dilation map values must be >= 0")
    L = H * W
    P = np.empty((N, C, K * K, L))
    kernels.frac_gather(x.data, dmap, 1, K, P)
    Pf = P.reshape(N, C * K * K, L)
    w2l = w_low.data.reshape(O, C * K * K)
    w2h = w_high.data.reshape(O, C * K * K)
    low = np.matmul(w2l, Pf)
    high = np.matmul(w2h, Pf)
    lam_flat = lam.data.reshape(N, 1, L)
    out = Tensor((low + lam_flat * high).reshape(N, O, H, W))

    def bwd(g):
        g2 = g.reshape(N, O, L)
        gh = g2 * lam_flat
        dlam = (g2 * high).sum(axis=1).reshape(N, 1, H, W)
        # one shared transpose of the patches, then plain GEMMs
        pmat = np.ascontiguousarray(Pf.transpose(1, 0, 2)).reshape(
            C * K * K, N * L)
        g2m = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(O, N * L)
        ghm = np.ascontiguousarray(gh.transpose(1, 0, 2)).reshape(O, N * L)
        dwl = (g2m @ pmat.T).reshape(w_low.shape)
        dwh = (ghm @ pmat.T).reshape(w_high.shape)
        dP = np.matmul(w2l.T, g2) + np.matmul(w2h.T, gh)
        dx = np.zeros((N, C, H, W))
        want_ddil = dil_t.requires_grad
        ddil = np.zeros((N, H, W)) if want_ddil else None
        kernels.frac_backward(x.data, dmap, 1, K,
                              dP.reshape(N, C, K * K, L), dx, ddil)
        dd = ddil if ddil is not None else np.zeros((N, H, W))
        return (dx, dwl, dwh, dlam,
                _unbroadcast(dd.reshape(N, 1, H, W)
                             if dil_t.ndim == 4 else dd, dil_t.shape))

    return _record(out, (x, w_low, w_high, lam, dil_t), bwd,
                   "modulated_frac_conv2d")


def depthwise_conv2d(x, w, bias=None) -> Tensor:
    """Per-channel 2-D convolution (one KxK kernel per channel), stride 1,
    same padding."""
    x, w = _t(x), _t(w)
    if x.ndim != 4 or w.ndim != 3:
        raise ValueError("depthwise_conv2d expects NCHW input and CKK "
                         "weights")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, "
                         f"weights expect {w.shape[0]}")
    if w.shape[1] != w.shape[2] or w.shape[1] % 2 == 0:
        raise ValueError("depthwise kernel must be square and odd")
    N, C, H, W = x.shape
    K = w.shape[1]
    pad = (K - 1) // 2
    b = _t(bias) if bias is not None else None
    if b is not None and b.shape != (C,):
        raise ValueError("bias must have shape (C,)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_data = np.zeros((N, C, H, W))
    for di in range(K):
        for dj in range(K):
            out_data += w.data[None, :, di, dj, None, None] \
                * xp[:, :, di:di + H, dj:dj + W]
    if b is not None:
        out_data += b.data[None, :, None, None]
    out = Tensor(out_data)

    def bwd(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for di in range(K):
            for dj in range(K):
                win = xp[:, :, di:di + H, dj:dj + W]
                dw[:, di, dj] = (g * win).sum(axis=(0, 2, 3))
                dxp[:, :, di:di + H, dj:dj + W] += \
                    w.data[None, :, di, dj, None, None] * g
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# normalization and regularization


def batchnorm_train(x, gamma, beta, eps: float = 1e-5):
    """Batch-statistics normalization. Returns (out, batch_mean, batch_var);
    the mean/var are plain arrays for the caller's running-average update."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    if x.ndim != 4:
        raise ValueError("batchnorm expects NCHW input")
    axes = (0, 2, 3)
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    sigma = np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) / sigma[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat
                 + beta.data[None, :, None, None])

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        m1 = dxhat.mean(axis=axes, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) / sigma[None, :, None, None]
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), bwd, "batchnorm"), mu, var


def batchnorm_inference(x, gamma, beta, mean, var, eps: float = 1e-5):
    """Normalization with frozen running statistics."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    if x.ndim != 4:
        raise ValueError("batchnorm expects NCHW input")
    sigma = np.sqrt(np.asarray(var) + eps)
    xhat = (x.data - np.asarray(mean)[None, :, None, None]) \
        / sigma[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat
                 + beta.data[None, :, None, None])

    def bwd(g):
        return (g * gamma.data[None, :, None, None] / sigma[None, :, None,
                                                            None],
                (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _record(out, (x, gamma, beta), bwd, "batchnorm_inference")


def dropout(x, p: float, seed: int, training: bool) -> Tensor:
    """Inverted dropout with a deterministic seeded mask; identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    x = _t(x)
    if not training or p == 0.0:
        return x
    from .rng import substream
    mask = (substream(seed, "dropout").random(x.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * mask)
    return _record(out, (x,), lambda g: (g * mask,), "dropout")
