"""Low-level convolution and sampling kernels.

Two implementations of each kernel: a numba-jitted one (default) and a pure
numpy fallback (``SYNTHDETECT_NO_NUMBA=1``). Both accumulate in the same
(c, ki, kj) order per output element, so they produce bit-identical results
and match a naive nested-loop reference exactly in 64-bit floats.

Bilinear sampling uses zero outside the image: out-of-range corners
contribute nothing, and a corner exactly on the border blends with zero.
"""

import os

import numpy as np

_USE_NUMBA = os.environ.get("SYNTHDETECT_NO_NUMBA", "") != "1"

if _USE_NUMBA:
    try:
        from numba import njit, prange
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _USE_NUMBA = False


# ---------------------------------------------------------------------------
# integer-dilation convolution


def _conv_int_np(xp, w, stride, dil, out):
    K = w.shape[2]
    Ho, Wo = out.shape[2], out.shape[3]
    out[:] = 0.0
    hi = (Ho - 1) * stride + 1
    wi = (Wo - 1) * stride + 1
    for c in range(w.shape[1]):
        for di in range(K):
            for dj in range(K):
                win = xp[:, c, di * dil:di * dil + hi:stride,
                         dj * dil:dj * dil + wi:stride]
                out += w[None, :, c, di, dj, None, None] * win[:, None]


if _USE_NUMBA:

    @njit(parallel=True, cache=True)
    def _conv_int_nb(xp, w, stride, dil, out):  # pragma: no cover - jitted
        N = xp.shape[0]
        C = w.shape[1]
        K = w.shape[2]
        O = w.shape[0]
        Ho, Wo = out.shape[2], out.shape[3]
        for n in prange(N):
            for o in range(O):
                for i in range(Ho):
                    for j in range(Wo):
                        acc = 0.0
                        for c in range(C):
                            for di in range(K):
                                for dj in range(K):
                                    acc += w[o, c, di, dj] * xp[
                                        n, c, i * stride + di * dil,
                                        j * stride + dj * dil]
                        out[n, o, i, j] = acc


def conv_int_forward(xp, w, stride, dil, out):
    """out[n,o,i,j] = sum_{c,di,dj} w[o,c,di,dj] * xp[n,c,i*s+di*d, j*s+dj*d].

    ``xp`` is the already zero-padded input. Accumulation order per output
    element is (c, di, dj), identical between both backends.
    """
    if _USE_NUMBA:
        _conv_int_nb(xp, w, stride, dil, out)
    else:
        _conv_int_np(xp, w, stride, dil, out)


# ---------------------------------------------------------------------------
# fractional-dilation bilinear patch sampling


def _frac_gather_np(x, dil, stride, K, P):
    N, C, H, W = x.shape
    r = (K - 1) // 2
    Ho, Wo = dil.shape[1], dil.shape[2]
    # padded copy with one zero ring; clamped indices land on zero cells
    xp = np.zeros((N, C, H + 2, W + 2))
    xp[:, :, 1:H + 1, 1:W + 1] = x
    ii = np.arange(Ho)[:, None] * stride
    jj = np.arange(Wo)[None, :] * stride
    for di in range(K):
        for dj in range(K):
            k = di * K + dj
            y = ii + (di - r) * dil  # (N, Ho, Wo)
            xc = jj + (dj - r) * dil
            y0 = np.floor(y)
            x0 = np.floor(xc)
            fy = y - y0
            fx = xc - x0
            y0 = y0.astype(np.int64)
            x0 = x0.astype(np.int64)
            y0c = np.clip(y0, -1, H)
            y1c = np.clip(y0 + 1, -1, H)
            x0c = np.clip(x0, -1, W)
            x1c = np.clip(x0 + 1, -1, W)
            narr = np.arange(N)[:, None, None]
            v00 = xp[narr, :, y0c + 1, x0c + 1]  # (N,Ho,Wo,C)
            v01 = xp[narr, :, y0c + 1, x1c + 1]
            v10 = xp[narr, :, y1c + 1, x0c + 1]
            v11 = xp[narr, :, y1c + 1, x1c + 1]
            w00 = ((1 - fy) * (1 - fx))[..., None]
            w01 = ((1 - fy) * fx)[..., None]
            w10 = (fy * (1 - fx))[..., None]
            w11 = (fy * fx)[..., None]
            val = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
            P[:, :, k, :] = np.moveaxis(val, -1, 1).reshape(N, C, Ho * Wo)


def _frac_backward_np(x, dil, stride, K, dP, dx, ddil):
    N, C, H, W = x.shape
    r = (K - 1) // 2
    Ho, Wo = dil.shape[1], dil.shape[2]
    L = Ho * Wo
    xp = np.zeros((N, C, H + 2, W + 2))
    xp[:, :, 1:H + 1, 1:W + 1] = x
    dxp = np.zeros((N * C, (H + 2) * (W + 2)))
    ii = np.arange(Ho)[:, None] * stride
    jj = np.arange(Wo)[None, :] * stride
    nc = np.arange(N * C)[:, None]
    for di in range(K):
        for dj in range(K):
            k = di * K + dj
            y = ii + (di - r) * dil
            xc = jj + (dj - r) * dil
            y0 = np.floor(y)
            x0 = np.floor(xc)
            fy = y - y0
            fx = xc - x0
            y0 = y0.astype(np.int64)
            x0 = x0.astype(np.int64)
            y0c = np.clip(y0, -1, H) + 1
            y1c = np.clip(y0 + 1, -1, H) + 1
            x0c = np.clip(x0, -1, W) + 1
            x1c = np.clip(x0 + 1, -1, W) + 1
            g = dP[:, :, k, :].reshape(N, C, Ho, Wo)
            w00 = (1 - fy) * (1 - fx)
            w01 = (1 - fy) * fx
            w10 = fy * (1 - fx)
            w11 = fy * fx
            Wp = W + 2
            for (yc, xcl, wt) in ((y0c, x0c, w00), (y0c, x1c, w01),
                                  (y1c, x0c, w10), (y1c, x1c, w11)):
                idx = (yc * Wp + xcl)[:, None, :, :].repeat(C, axis=1)
                np.add.at(dxp, (nc, idx.reshape(N * C, L)),
                          (g * wt[:, None]).reshape(N * C, L))
            if ddil is not None:
                narr = np.arange(N)[:, None, None]
                v00 = np.moveaxis(xp[narr, :, y0c, x0c], -1, 1)
                v01 = np.moveaxis(xp[narr, :, y0c, x1c], -1, 1)
                v10 = np.moveaxis(xp[narr, :, y1c, x0c], -1, 1)
                v11 = np.moveaxis(xp[narr, :, y1c, x1c], -1, 1)
                dvy = (-(1 - fx)[:, None] * v00 - fx[:, None] * v01
                       + (1 - fx)[:, None] * v10 + fx[:, None] * v11)
                dvx = (-(1 - fy)[:, None] * v00 + (1 - fy)[:, None] * v01
                       - fy[:, None] * v10 + fy[:, None] * v11)
                ddil += ((g * dvy).sum(axis=1) * (di - r)
                         + (g * dvx).sum(axis=1) * (dj - r))
    # strip the zero ring
    dxp = dxp.reshape(N, C, H + 2, W + 2)
    dx += dxp[:, :, 1:H + 1, 1:W + 1]


if _USE_NUMBA:

    @njit(parallel=True, cache=True)
    def _frac_gather_nb(x, dil, stride, K, P):  # pragma: no cover - jitted
        N, C, H, W = x.shape
        r = (K - 1) // 2
        Ho, Wo = dil.shape[1], dil.shape[2]
        for n in prange(N):
            for i in range(Ho):
                for j in range(Wo):
                    l = i * Wo + j
                    D = dil[n, i, j]
                    for di in range(K):
                        for dj in range(K):
                            k = di * K + dj
                            y = i * stride + (di - r) * D
                            xc = j * stride + (dj - r) * D
                            y0 = int(np.floor(y))
                            x0 = int(np.floor(xc))
                            fy = y - y0
                            fx = xc - x0
                            w00 = (1 - fy) * (1 - fx)
                            w01 = (1 - fy) * fx
                            w10 = fy * (1 - fx)
                            w11 = fy * fx
                            in00 = 0 <= y0 < H and 0 <= x0 < W
                            in01 = 0 <= y0 < H and 0 <= x0 + 1 < W
                            in10 = 0 <= y0 + 1 < H and 0 <= x0 < W
                            in11 = 0 <= y0 + 1 < H and 0 <= x0 + 1 < W
                            for c in range(C):
                                v00 = x[n, c, y0, x0] if in00 else 0.0
                                v01 = x[n, c, y0, x0 + 1] if in01 else 0.0
                                v10 = x[n, c, y0 + 1, x0] if in10 else 0.0
                                v11 = x[n, c, y0 + 1, x0 + 1] if in11 else 0.0
                                P[n, c, k, l] = (w00 * v00 + w01 * v01
                                                 + w10 * v10 + w11 * v11)

    @njit(parallel=True, cache=True)
    def _frac_backward_nb(x, dil, stride, K, dP, dx, ddil,
                          want_ddil):  # pragma: no cover - jitted
        N, C, H, W = x.shape
        r = (K - 1) // 2
        Ho, Wo = dil.shape[1], dil.shape[2]
        for n in prange(N):
            for i in range(Ho):
                for j in range(Wo):
                    l = i * Wo + j
                    D = dil[n, i, j]
                    dD = 0.0
                    for di in range(K):
                        for dj in range(K):
                            k = di * K + dj
                            y = i * stride + (di - r) * D
                            xc = j * stride + (dj - r) * D
                            y0 = int(np.floor(y))
                            x0 = int(np.floor(xc))
                            fy = y - y0
                            fx = xc - x0
                            in00 = 0 <= y0 < H and 0 <= x0 < W
                            in01 = 0 <= y0 < H and 0 <= x0 + 1 < W
                            in10 = 0 <= y0 + 1 < H and 0 <= x0 < W
                            in11 = 0 <= y0 + 1 < H and 0 <= x0 + 1 < W
                            for c in range(C):
                                g = dP[n, c, k, l]
                                if in00:
                                    dx[n, c, y0, x0] += g * (1 - fy) * (1 - fx)
                                if in01:
                                    dx[n, c, y0, x0 + 1] += g * (1 - fy) * fx
                                if in10:
                                    dx[n, c, y0 + 1, x0] += g * fy * (1 - fx)
                                if in11:
                                    dx[n, c, y0 + 1, x0 + 1] += g * fy * fx
                                if want_ddil:
                                    v00 = x[n, c, y0, x0] if in00 else 0.0
                                    v01 = x[n, c, y0, x0 + 1] if in01 else 0.0
                                    v10 = x[n, c, y0 + 1, x0] if in10 else 0.0
                                    v11 = (x[n, c, y0 + 1, x0 + 1]
                                           if in11 else 0.0)
                                    dvy = (-(1 - fx) * v00 - fx * v01
                                           + (1 - fx) * v10 + fx * v11)
                                    dvx = (-(1 - fy) * v00 + (1 - fy) * v01
                                           - fy * v10 + fy * v11)
                                    dD += g * (dvy * (di - r) + dvx * (dj - r))
                    if want_ddil:
                        ddil[n, i, j] += dD


def frac_gather(x, dil, stride, K, P):
    """Fill P[n,c,k,l] with bilinear taps at p + offset_k * dil(p).

    ``dil`` has shape (N, Ho, Wo); taps outside the image read zero. K odd.
    """
    if _USE_NUMBA:
        _frac_gather_nb(x, dil, stride, K, P)
    else:
        _frac_gather_np(x, dil, stride, K, P)


def frac_backward(x, dil, stride, K, dP, dx, ddil=None):
    """Accumulate dL/dx (and dL/ddil if requested) from patch grads dP."""
    if _USE_NUMBA:
        dd = ddil if ddil is not None else np.zeros((1, 1, 1))
        _frac_backward_nb(x, dil, stride, K, dP, dx, dd, ddil is not None)
    else:
        _frac_backward_np(x, dil, stride, K, dP, dx, ddil)


def conv_int_backward(xp, w, stride, dil, gout, need_dx=True, need_dw=True):
    """Gradients of the integer-dilation conv: returns (dxp, dw); either
    half can be skipped when the corresponding input is not tracked."""
    K = w.shape[2]
    Ho, Wo = gout.shape[2], gout.shape[3]
    hi = (Ho - 1) * stride + 1
    wi = (Wo - 1) * stride + 1
    dxp = np.zeros_like(xp) if need_dx else None
    dw = np.zeros_like(w) if need_dw else None
    for di in range(K):
        for dj in range(K):
            if need_dw:
                win = xp[:, :, di * dil:di * dil + hi:stride,
                         dj * dil:dj * dil + wi:stride]
                dw[:, :, di, dj] = np.einsum('nohw,nchw->oc', gout, win,
                                             optimize=True)
            if need_dx:
                dxp[:, :, di * dil:di * dil + hi:stride,
                    dj * dil:dj * dil + wi:stride] += np.einsum(
                        'oc,nohw->nchw', w[:, :, di, dj], gout,
                        optimize=True)
    return dxp, dw
