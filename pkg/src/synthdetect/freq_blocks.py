"""Frequency-aware building blocks.

One-level orthonormal Haar split, radial Fourier band decomposition with
spatially varying recombination, frequency-adaptive dilated convolution
(position-dependent kernel and dilation), and a spatial attention gate.
All blocks preserve H x W at stride 1 so they can be stacked residually.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fft import fft2_complex, ifft2_complex
from .tensor import Tensor, _record


# ---------------------------------------------------------------------------
# Haar DWT

_HAAR_SIGNS = {
    "ll": (1.0, 1.0, 1.0, 1.0),
    "dh": (1.0, -1.0, 1.0, -1.0),
    "dv": (1.0, 1.0, -1.0, -1.0),
    "dd": (1.0, -1.0, -1.0, 1.0),
}


def _haar_band(x: Tensor, name: str) -> Tensor:
    sa, sb, sc, sd = _HAAR_SIGNS[name]
    d = x.data
    out = Tensor(0.5 * (sa * d[..., 0::2, 0::2] + sb * d[..., 0::2, 1::2]
                        + sc * d[..., 1::2, 0::2] + sd * d[..., 1::2, 1::2]))

    def bwd(g):
        dx = np.zeros(x.shape)
        dx[..., 0::2, 0::2] = 0.5 * sa * g
        dx[..., 0::2, 1::2] = 0.5 * sb * g
        dx[..., 1::2, 0::2] = 0.5 * sc * g
        dx[..., 1::2, 1::2] = 0.5 * sd * g
        return (dx,)

    return _record(out, (x,), bwd, f"haar_{name}")


def haar_dwt(x: Tensor):
    """One orthonormal Haar level: (approx, (detail_h, detail_v, detail_d)).

    The transform matrix is symmetric orthonormal, so the inverse applies
    the same +-1/2 combinations and energy is preserved exactly.
    """
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError("Haar DWT requires even spatial dimensions")
    return (_haar_band(x, "ll"),
            (_haar_band(x, "dh"), _haar_band(x, "dv"), _haar_band(x, "dd")))


def haar_idwt(ll: Tensor, dh: Tensor, dv: Tensor, dd: Tensor) -> Tensor:
    shp = list(ll.shape)
    shp[-2] *= 2
    shp[-1] *= 2
    out_data = np.empty(shp)
    l, h, v, d = ll.data, dh.data, dv.data, dd.data
    out_data[..., 0::2, 0::2] = 0.5 * (l + h + v + d)
    out_data[..., 0::2, 1::2] = 0.5 * (l - h + v - d)
    out_data[..., 1::2, 0::2] = 0.5 * (l + h - v - d)
    out_data[..., 1::2, 1::2] = 0.5 * (l - h - v + d)
    out = Tensor(out_data)

    def bwd(g):
        a = g[..., 0::2, 0::2]
        b = g[..., 0::2, 1::2]
        c = g[..., 1::2, 0::2]
        e = g[..., 1::2, 1::2]
        return (0.5 * (a + b + c + e), 0.5 * (a - b + c - e),
                0.5 * (a + b - c - e), 0.5 * (a - b - c + e))

    return _record(out, (ll, dh, dv, dd), bwd, "haar_idwt")


# ---------------------------------------------------------------------------
# Fourier band decomposition


@dataclass
class BandSpec:
    """Binary masks partitioning the frequency plane into radial bands."""

    masks: np.ndarray  # (B, H, W), values in {0, 1}

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        total = self.masks.sum(axis=0)
        if not np.array_equal(total, np.ones_like(total)):
            raise ValueError("band masks must partition the frequency "
                             "plane exactly")
        B, H, W = self.masks.shape
        flipped = self.masks[:, (-np.arange(H)) % H][:, :, (-np.arange(W)) % W]
        if not np.array_equal(self.masks, flipped):
            raise ValueError("band masks must be symmetric under frequency "
                             "negation")

    @property
    def count(self) -> int:
        return self.masks.shape[0]


def make_band_spec(h: int, w: int, bands: int) -> BandSpec:
    """Equal-width annuli in normalized frequency radius (DC in band 0)."""
    fi = np.minimum(np.arange(h), h - np.arange(h)) / (h / 2)
    fj = np.minimum(np.arange(w), w - np.arange(w)) / (w / 2)
    r = np.sqrt(fi[:, None] ** 2 + fj[None, :] ** 2) / np.sqrt(2.0)
    idx = np.minimum((r * bands).astype(np.int64), bands - 1)
    masks = np.stack([(idx == b).astype(np.float64) for b in range(bands)])
    return BandSpec(masks)


def band_filter(x: Tensor, mask: np.ndarray) -> Tensor:
    """Keep one frequency band: real(IFFT(mask * FFT(x))).

    The mask is real and conjugate-symmetric, so the operator is real,
    symmetric and its adjoint is itself; the backward pass applies the same
    filter to the upstream gradient.
    """
    y = ifft2_complex(fft2_complex(x.data) * mask)
    lim = 1e-10 * max(1.0, float(np.abs(y.real).max()))
    if np.abs(y.imag).max() > lim:
        raise ValueError("band filter produced a non-negligible imaginary "
                         "part; mask is not conjugate-symmetric")
    out = Tensor(np.ascontiguousarray(y.real))

    def bwd(g):
        gy = ifft2_complex(fft2_complex(g) * mask)
        return (np.ascontiguousarray(gy.real),)

    return _record(out, (x,), bwd, "band_filter")


def band_decompose(x: Tensor, spec: BandSpec) -> list:
    """Split into per-band components; their sum reconstructs the input."""
    if x.shape[-2:] != spec.masks.shape[-2:]:
        raise ValueError(f"spec masks {spec.masks.shape[-2:]} do not match "
                         f"input {x.shape[-2:]}")
    return [band_filter(x, m) for m in spec.masks]


def band_stack(x: Tensor, spec: BandSpec) -> Tensor:
    """All band components at once, band-major: (B, N, C, H, W).

    One forward FFT and one batched inverse; equivalent to stacking
    band_filter outputs. The adjoint batches the same masks over the
    upstream gradient.
    """
    if x.ndim != 4:
        raise ValueError("band_stack expects NCHW input")
    if x.shape[-2:] != spec.masks.shape[-2:]:
        raise ValueError(f"spec masks {spec.masks.shape[-2:]} do not match "
                         f"input {x.shape[-2:]}")
    masks = spec.masks[:, None, None]  # (B, 1, 1, H, W)
    y = ifft2_complex(fft2_complex(x.data)[None] * masks, overwrite=True)
    lim = 1e-10 * max(1.0, float(np.abs(y.real).max()))
    if np.abs(y.imag).max() > lim:
        raise ValueError("band filtering produced a non-negligible "
                         "imaginary part")
    out = Tensor(np.ascontiguousarray(y.real))

    def bwd(g):
        dx = ifft2_complex((fft2_complex(g) * masks).sum(axis=0),
                           overwrite=True)
        return (np.ascontiguousarray(dx.real),)

    return _record(out, (x,), bwd, "band_stack")


def frequency_select(x: Tensor, spec: BandSpec, head_w: Tensor,
                     head_b: Tensor) -> Tensor:
    """Per-position convex reweighting of the band components.

    A 1x1 conv over x produces B logits per position; a softmax across
    bands yields weights A_b(p), and the output is sum_b A_b(p) * X_b(p).
    """
    bands = band_stack(x, spec)  # (B, N, C, H, W)
    logits = T.conv2d(x, head_w, head_b)
    weights = T.softmax(logits, axis=1)  # (N, B, H, W)
    n, b, h, w = weights.shape
    wt = T.transpose(T.reshape(weights, (n, b, 1, h, w)), (1, 0, 2, 3, 4))
    return T.tsum(T.mul(bands, wt), axis=0)


# ---------------------------------------------------------------------------
# frequency-adaptive dilated convolution


@dataclass
class FadcParams:
    """Weights for one FADC unit.

    ``w`` decomposes into a spatially flat part (per-(o,c) kernel mean) and
    its residual; the residual is modulated per position by the lambda head
    (1x1 conv + 2*sigmoid, range (0, 2) with 1 reachable at zero logits).
    The dilation predictor is a depth-wise conv pooled over channels whose
    rectified output scales the base dilation and may reach zero, where all
    taps collapse onto the center pixel.
    """

    w: Tensor        # (O, C, K, K)
    pred_w: Tensor   # (C, Kp, Kp) depth-wise
    pred_b: Tensor   # (C,)
    lam_w: Tensor    # (1, C, 1, 1)
    lam_b: Tensor    # (1,)
    d_base: float = 2.0

    def __post_init__(self):
        if self.w.shape[2] % 2 == 0:
            raise ValueError("FADC kernel size must be odd")
        if self.d_base <= 0:
            raise ValueError("base dilation must be positive")


def fadc_dilation(x: Tensor, params: FadcParams) -> Tensor:
    """Adaptive per-position dilation: ReLU(predictor(x)) * d_base."""
    raw = T.depthwise_conv2d(x, params.pred_w, params.pred_b)
    pooled = T.tmean(raw, axis=1, keepdims=True)
    return T.scale(T.relu(pooled), params.d_base)


def fadc_modulation(x: Tensor, params: FadcParams) -> Tensor:
    """Per-position high-frequency weight factor in (0, 2)."""
    return T.scale(T.sigmoid(T.conv2d(x, params.lam_w, params.lam_b)), 2.0)


def fadc_apply(x: Tensor, w: Tensor, lam, dil) -> Tensor:
    """Core FADC combination with explicit modulation and dilation maps:
    conv(x, w_mean, dil) + lam * conv(x, w - w_mean, dil)."""
    w_mean = T.tmean(w, axis=(2, 3), keepdims=True)
    w_low = T.broadcast_to(w_mean, w.shape)
    w_high = T.sub(w, w_low)
    return T.modulated_frac_conv2d(x, w_low, w_high, lam, dil)


def fadc_forward(x: Tensor, params: FadcParams) -> Tensor:
    """Position-adaptive dilated convolution (the high-frequency path)."""
    if x.shape[1] != params.w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, "
                         f"FADC weights expect {params.w.shape[1]}")
    lam = fadc_modulation(x, params)
    dil = fadc_dilation(x, params)
    return fadc_apply(x, params.w, lam, dil)


@dataclass
class FadcBlockParams:
    fadc: FadcParams
    band_w: Tensor  # (B, C, 1, 1)
    band_b: Tensor  # (B,)
    spec: BandSpec


def fadc_block(x: Tensor, bp: FadcBlockParams) -> Tensor:
    """ReLU(FADC(x) + x + frequency_select(x)); channel-preserving."""
    if bp.fadc.w.shape[0] != x.shape[1]:
        raise ValueError("FADC block requires output channels == input "
                         "channels")
    y = fadc_forward(x, bp.fadc)
    xhat = frequency_select(x, bp.spec, bp.band_w, bp.band_b)
    return T.relu(T.add(T.add(y, x), xhat))


# ---------------------------------------------------------------------------
# spatial attention


def spatial_attention(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Sigmoid gate from a 7x7 conv over (channel mean, channel max),
    multiplied into every channel."""
    stats = T.concat([T.tmean(x, axis=1, keepdims=True),
                      T.channel_max(x, axis=1, keepdims=True)], axis=1)
    gate = T.sigmoid(T.conv2d(stats, w, b))
    return T.mul(x, gate)
