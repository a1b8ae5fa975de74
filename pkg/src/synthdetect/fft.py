"""Iterative radix-2 FFT over the last two axes of power-of-two grids.

The forward transform is unnormalized; the inverse divides by the number of
transformed samples, so ``ifft2_complex(fft2_complex(x)) == x`` up to
rounding. The default backend is a fused in-place numba kernel (rows and
columns per batch item); the numpy fallback performs the same butterflies
in the same order, so both produce identical bits.

These are plain numeric routines: gradient flow through spectral filtering
is provided by the band-filter ops in ``freq_blocks``, whose adjoint is the
filter itself.
"""

import os

import numpy as np

from .tensor import Tensor

_USE_NUMBA = os.environ.get("SYNTHDETECT_NO_NUMBA", "") != "1"

if _USE_NUMBA:
    try:
        from numba import njit, prange
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _USE_NUMBA = False

_bitrev_cache: dict = {}
_twiddle_cache: dict = {}


def _bitrev(n: int) -> np.ndarray:
    perm = _bitrev_cache.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        perm = np.zeros(n, dtype=np.int64)
        for i in range(n):
            r = 0
            v = i
            for _ in range(bits):
                r = (r << 1) | (v & 1)
                v >>= 1
            perm[i] = r
        _bitrev_cache[n] = perm
    return perm


def _twiddles(n: int, inverse: bool) -> np.ndarray:
    # all stages packed into one array: the stage with half-size h covers
    # indices [h-1, 2h-1)
    key = (n, inverse)
    tw = _twiddle_cache.get(key)
    if tw is None:
        sign = 2j if inverse else -2j
        tw = np.empty(max(n - 1, 1), dtype=np.complex128)
        size = 2
        while size <= n:
            half = size // 2
            tw[half - 1:2 * half - 1] = np.exp(
                sign * np.pi * np.arange(half) / size)
            size *= 2
        _twiddle_cache[key] = tw
    return tw


def _check_pow2(n: int, what: str):
    if n < 1 or n & (n - 1):
        raise ValueError(f"{what} must be a power of two, got {n} "
                         "(use pad_to_pow2 first)")


if _USE_NUMBA:

    @njit(parallel=True, cache=True)
    def _fft2_nb(a, perm_h, perm_w, tw_h, tw_w,
                 scale):  # pragma: no cover - jitted
        M, H, W = a.shape
        for m in prange(M):
            rbuf = np.empty(W, np.complex128)
            for i in range(H):
                for j in range(W):
                    rbuf[j] = a[m, i, perm_w[j]]
                size = 2
                while size <= W:
                    half = size // 2
                    off = half - 1
                    for start in range(0, W, size):
                        for k in range(half):
                            t = rbuf[start + half + k] * tw_w[off + k]
                            e = rbuf[start + k]
                            rbuf[start + k] = e + t
                            rbuf[start + half + k] = e - t
                    size *= 2
                for j in range(W):
                    a[m, i, j] = rbuf[j]
            cbuf = np.empty(H, np.complex128)
            for j in range(W):
                for i in range(H):
                    cbuf[i] = a[m, perm_h[i], j]
                size = 2
                while size <= H:
                    half = size // 2
                    off = half - 1
                    for start in range(0, H, size):
                        for k in range(half):
                            t = cbuf[start + half + k] * tw_h[off + k]
                            e = cbuf[start + k]
                            cbuf[start + k] = e + t
                            cbuf[start + half + k] = e - t
                    size *= 2
                for i in range(H):
                    a[m, i, j] = cbuf[i] * scale
    _NB_COMPILED = False


def _fft_axis_np(a: np.ndarray, tw: np.ndarray) -> np.ndarray:
    # vectorized butterflies over the last axis; a is already bit-reversed
    n = a.shape[-1]
    size = 2
    while size <= n:
        half = size // 2
        stage = tw[half - 1:2 * half - 1]
        v = a.reshape(a.shape[:-1] + (n // size, size))
        t = v[..., half:] * stage
        e = v[..., :half].copy()
        v[..., :half] = e + t
        v[..., half:] = e - t
        size *= 2
    return a


def _fft2_np(x: np.ndarray, inverse: bool, scale: float) -> np.ndarray:
    H, W = x.shape[-2], x.shape[-1]
    a = np.ascontiguousarray(x[..., _bitrev(W)], dtype=np.complex128)
    a = _fft_axis_np(a, _twiddles(W, inverse))
    a = a.swapaxes(-1, -2)
    a = np.ascontiguousarray(a[..., _bitrev(H)])
    a = _fft_axis_np(a, _twiddles(H, inverse))
    a = a.swapaxes(-1, -2)
    if scale != 1.0:
        a = a * scale
    return np.ascontiguousarray(a)


def _fft2_dispatch(x: np.ndarray, inverse: bool,
                   overwrite: bool = False) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError("fft2 needs at least 2 dimensions")
    H, W = x.shape[-2], x.shape[-1]
    _check_pow2(H, "height")
    _check_pow2(W, "width")
    # 1/(H*W) is a power of two, so multiplying by it equals dividing
    scale = 1.0 / (H * W) if inverse else 1.0
    if not _USE_NUMBA:
        return _fft2_np(x, inverse, scale)
    if overwrite and x.dtype == np.complex128 and x.flags.c_contiguous:
        a = x
    else:
        a = x.astype(np.complex128)  # copies into contiguous layout
    _fft2_nb(a.reshape(-1, H, W), _bitrev(H), _bitrev(W),
             _twiddles(H, inverse), _twiddles(W, inverse), scale)
    return a


def fft2_complex(x: np.ndarray, overwrite: bool = False) -> np.ndarray:
    """Unnormalized 2-D DFT over the last two axes.

    ``overwrite=True`` permits transforming a complex128 input in place.
    """
    return _fft2_dispatch(x, inverse=False, overwrite=overwrite)


def ifft2_complex(X: np.ndarray, overwrite: bool = False) -> np.ndarray:
    """Inverse of :func:`fft2_complex` (normalized by H*W)."""
    return _fft2_dispatch(X, inverse=True, overwrite=overwrite)


def fft2(x: Tensor) -> tuple:
    """Spectrum of a real tensor as a (real, imag) pair of tensors."""
    X = fft2_complex(x.data)
    return Tensor(X.real.copy()), Tensor(X.imag.copy())


def ifft2(re: Tensor, im: Tensor) -> tuple:
    """Inverse transform of a (real, imag) spectrum pair."""
    x = ifft2_complex(re.data + 1j * im.data)
    return Tensor(x.real.copy()), Tensor(x.imag.copy())


def pad_to_pow2(x: np.ndarray) -> np.ndarray:
    """Zero-pad the last two axes up to the next power of two."""
    h, w = x.shape[-2], x.shape[-1]
    th = 1 << max(h - 1, 0).bit_length() if h > 1 else 1
    tw = 1 << max(w - 1, 0).bit_length() if w > 1 else 1
    if (th, tw) == (h, w):
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, th - h), (0, tw - w)]
    return np.pad(x, pad)
