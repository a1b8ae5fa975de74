"""Deterministic post-processing perturbations and robustness sweeps.

The JPEG-style codec keeps the distortion source that matters for detection
(block DCT quantization) and drops the bitstream: RGB -> BT.601 YCbCr in
float, 8x8 orthonormal DCT-II, quantization with the standard tables scaled
by the IJG quality rule, dequantization, inverse DCT, and rounding pinned to
half-away-from-zero. No chroma subsampling, no entropy coding. All
perturbations are pure functions of (image, spec, seed) and byte-identical
across runs and platforms.
"""

from dataclasses import dataclass

import numpy as np

from .image_io import ImageU8
from .rng import substream
from .training import SplitData, accuracy, average_precision, prepare_split, \
    scores_for

# ITU T.81 Annex K reference quantization tables
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99]], dtype=np.float64)


@dataclass
class PerturbSpec:
    kind: str      # "jpeg" | "blur" | "noise"
    level: float   # quality in [1, 100] for jpeg, sigma >= 0 otherwise
    seed: int = 0

    def __post_init__(self):
        if self.kind == "jpeg":
            if not 1 <= self.level <= 100:
                raise ValueError("jpeg quality must lie in [1, 100]")
        elif self.kind in ("blur", "noise"):
            if self.level < 0:
                raise ValueError(f"{self.kind} sigma must be >= 0")
        else:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def scaled_quant_table(table: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling: S = 5000/q below 50, else 200 - 2q."""
    q = int(quality)
    s = 5000 // q if q < 50 else 200 - 2 * q
    return np.clip(np.floor((table * s + 50) / 100), 1, 255)


_DCT_M = None


def _dct_matrix() -> np.ndarray:
    global _DCT_M
    if _DCT_M is None:
        i = np.arange(8, dtype=np.float64)
        m = np.cos((2 * i[None, :] + 1) * i[:, None] * np.pi / 16)
        m[0] *= np.sqrt(1 / 8)
        m[1:] *= np.sqrt(2 / 8)
        _DCT_M = m
    return _DCT_M


def dct2_8x8(blocks: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II of stacked 8x8 blocks (..., 8, 8)."""
    m = _dct_matrix()
    return np.einsum('ui,...ij,vj->...uv', m, blocks, m, optimize=True)


def idct2_8x8(coefs: np.ndarray) -> np.ndarray:
    m = _dct_matrix()
    return np.einsum('ui,...uv,vj->...ij', m, coefs, m, optimize=True)


def _rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def _ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _blockwise_quantize(channel: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = channel.shape
    blocks = channel.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    coefs = dct2_8x8(blocks)
    quant = _round_half_away(coefs / table) * table
    back = idct2_8x8(quant)
    return back.transpose(0, 2, 1, 3).reshape(h, w)


def jpeg_like(img: ImageU8, quality) -> ImageU8:
    """Block-DCT quantization round trip at the given IJG quality."""
    spec = PerturbSpec("jpeg", quality)
    q = int(spec.level)
    h, w = img.height, img.width
    ph = (8 - h % 8) % 8
    pw = (8 - w % 8) % 8
    rgb = img.pixels.astype(np.float64)
    if ph or pw:
        rgb = np.pad(rgb, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    ycc = _rgb_to_ycbcr(rgb) - 128.0
    tables = (scaled_quant_table(LUMA_TABLE, q),
              scaled_quant_table(CHROMA_TABLE, q),
              scaled_quant_table(CHROMA_TABLE, q))
    out = np.stack([_blockwise_quantize(ycc[..., c], tables[c])
                    for c in range(3)], axis=-1) + 128.0
    rgb_back = _ycbcr_to_rgb(out)[:h, :w]
    pixels = _round_half_away(np.clip(rgb_back, 0.0, 255.0))
    return ImageU8(w, h, pixels.astype(np.uint8))


def gaussian_blur(img: ImageU8, sigma: float) -> ImageU8:
    """Separable Gaussian blur, radius ceil(3 sigma), reflect padding.
    sigma=0 is the identity."""
    PerturbSpec("blur", sigma)
    if sigma == 0:
        return ImageU8(img.width, img.height, img.pixels.copy())
    radius = int(np.ceil(3 * sigma))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    out = img.pixels.astype(np.float64)
    for axis in (0, 1):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0)
                              for a in range(3)], mode="reflect")
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            sl = [slice(None)] * 3
            sl[axis] = slice(i, i + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    pixels = _round_half_away(np.clip(out, 0.0, 255.0)).astype(np.uint8)
    return ImageU8(img.width, img.height, pixels)


def gaussian_noise(img: ImageU8, sigma: float, seed: int) -> ImageU8:
    """Additive N(0, sigma) noise (0-255 units) from a seeded Box-Muller
    transform; clamp and round back to bytes."""
    PerturbSpec("noise", sigma, seed)
    if sigma == 0:
        return ImageU8(img.width, img.height, img.pixels.copy())
    n = img.pixels.size
    rng = substream(seed, "noise")
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]: keeps the log finite
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2),
                        r * np.sin(2 * np.pi * u2)])[:n]
    noisy = img.pixels.astype(np.float64) + sigma * z.reshape(
        img.pixels.shape)
    pixels = _round_half_away(np.clip(noisy, 0.0, 255.0)).astype(np.uint8)
    return ImageU8(img.width, img.height, pixels)


def perturb_image(img: ImageU8, spec: PerturbSpec,
                  image_index: int = 0) -> ImageU8:
    """Apply one perturbation; noise derives a per-image seed from the
    spec seed and the image's position so sweeps are reproducible."""
    if spec.kind == "jpeg":
        return jpeg_like(img, spec.level)
    if spec.kind == "blur":
        return gaussian_blur(img, spec.level)
    return gaussian_noise(img, spec.level, seed=spec.seed + image_index)


@dataclass
class RobustnessReport:
    rows: list  # (kind, level, acc, ap), levels ascending within kind


def robustness_sweep(det, images, labels, specs, threshold: float,
                     batch: int = 32, progress=None) -> RobustnessReport:
    """Per-spec ACC (at the calibrated threshold) and AP over the test
    images; rows come out sorted by (kind, level)."""
    if len(images) == 0:
        raise ValueError("empty test split")
    if det.config.use_semantic and det.config.semantic_source != "stub":
        raise ValueError("robustness sweeps need semantic_source=stub; "
                         "file embeddings do not cover perturbed pixels")
    rows = []
    for spec in sorted(specs, key=lambda s: (s.kind, s.level)):
        perturbed = [perturb_image(im, spec, i)
                     for i, im in enumerate(images)]
        data = prepare_split(det, perturbed, labels)
        scores = scores_for(det, data, batch=batch)
        rows.append((spec.kind, float(spec.level),
                     accuracy(scores, data.labels, threshold),
                     average_precision(scores, data.labels)))
        if progress:
            progress(f"{spec.kind}:{spec.level:g} acc={rows[-1][2]:.4f} "
                     f"ap={rows[-1][3]:.4f}")
    return RobustnessReport(rows)


def report_csv(report: RobustnessReport) -> str:
    lines = ["kind,level,acc,ap"]
    lines += [f"{k},{lv:g},{a:.10g},{p:.10g}" for k, lv, a, p in report.rows]
    return "\n".join(lines) + "\n"


DEFAULT_SPECS = ("jpeg:95,jpeg:80,jpeg:65,jpeg:50,"
                 "blur:0,blur:1,blur:2,blur:3,"
                 "noise:0,noise:1,noise:2,noise:3")


def parse_specs(text: str, seed: int = 0) -> list:
    """Parse 'kind:level[,kind:level...]' into PerturbSpec items."""
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ValueError(f"bad spec {part!r}, expected kind:level")
        kind, level = part.split(":", 1)
        specs.append(PerturbSpec(kind.strip(), float(level), seed=seed))
    return specs


def evaluate_split(det, data: SplitData, threshold: float,
                   batch: int = 32):
    """Unperturbed reference row for consistency checks."""
    scores = scores_for(det, data, batch=batch)
    return (accuracy(scores, data.labels, threshold),
            average_precision(scores, data.labels))
