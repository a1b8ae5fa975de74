"""Synthetic texture corpus for desk-scale experiments.

'Real' images are seeded noise textures with per-image random smoothing and
contrast, so no single spectral statistic separates the classes. 'Fake'
images render the same texture recipe at half resolution and up-sample it
2x, reproducing the pixel-duplication artifact that generator up-sampling
layers leave behind: nearest-neighbor for the in-distribution fakes, and
bilinear for a held-out unseen fake type.
"""

import os

import numpy as np

from .image_io import DatasetManifest, ImageU8, ManifestEntry, save_manifest, \
    save_ppm
from .rng import substream


def _gauss_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return arr
    radius = max(1, int(np.ceil(3 * sigma)))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    out = arr
    for axis in (0, 1):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0)
                              for a in range(out.ndim)], mode="reflect")
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(i, i + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


# texture recipe bounds: blob smoothing sigma and fine-grain mix fraction
SIGMA_RANGE = (0.3, 0.8)
MIX_RANGE = (0.35, 0.6)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """One noise texture in [0, 1]: smoothed blobs plus fine grain, with
    random contrast/brightness.

    The grain keeps the texture scale fine relative to the render size, so
    a half-resolution render (the fake recipe) is intrinsically coarser
    after up-sampling, not just artifact-marked.
    """
    sigma = rng.uniform(*SIGMA_RANGE)
    base = _gauss_blur(rng.random((size, size, 3)), sigma)
    grain = rng.random((size, size, 3))
    mix = rng.uniform(*MIX_RANGE)
    img = (1 - mix) * base + mix * grain
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    gain = rng.uniform(0.6, 1.0)
    offset = rng.uniform(0.0, 1.0 - gain)
    return gain * img + offset


def _to_u8(arr: np.ndarray) -> ImageU8:
    pix = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return ImageU8(pix.shape[1], pix.shape[0], pix)


def _upsample_nearest(arr: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(arr, 2, axis=0), 2, axis=1)


def _upsample_bilinear(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[0], arr.shape[1]
    oh, ow = 2 * h, 2 * w
    # pixel-center mapping with edge clamping
    ys = np.clip((np.arange(oh) + 0.5) / 2.0 - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) / 2.0 - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = arr[y0][:, x0]
    b = arr[y0][:, x1]
    c = arr[y1][:, x0]
    d = arr[y1][:, x1]
    return ((1 - fy) * (1 - fx) * a + (1 - fy) * fx * b
            + fy * (1 - fx) * c + fy * fx * d)


def make_real(seed: int, size: int = 64) -> ImageU8:
    return _to_u8(_texture(substream(seed, "toy/real"), size))


def make_fake(seed: int, size: int = 64, kind: str = "nearest") -> ImageU8:
    small = _texture(substream(seed, f"toy/fake-{kind}"), size // 2)
    if kind == "nearest":
        up = _upsample_nearest(small)
    elif kind == "bilinear":
        up = _upsample_bilinear(small)
    else:
        raise ValueError(f"unknown fake kind {kind!r}")
    return _to_u8(up)


def generate_corpus(root, seed: int = 1, size: int = 64,
                    n_train: int = 400, n_val: int = 80,
                    n_test_id: int = 160, n_test_ood: int = 60) -> str:
    """Write the toy corpus under ``root`` and return the manifest path.

    Train/val hold real and nearest-up-sampled fake images; the test split
    additionally carries ``n_test_ood`` bilinear-up-sampled fakes (paths
    prefixed ``ood_``) never seen in training.
    """
    os.makedirs(root, exist_ok=True)
    entries = []
    uid = 0

    def emit(img, label, split, prefix):
        nonlocal uid
        name = f"{prefix}_{uid:05d}.ppm"
        save_ppm(img, os.path.join(root, name))
        entries.append(ManifestEntry(name, label, split))
        uid += 1

    base = seed * 1_000_000
    for split, count in (("train", n_train), ("val", n_val),
                         ("test", n_test_id)):
        for i in range(count // 2):
            emit(make_real(base + uid, size), 0, split, "real")
            emit(make_fake(base + uid + 1, size, "nearest"), 1, split,
                 "fake")
    for i in range(n_test_ood):
        emit(make_fake(base + uid, size, "bilinear"), 1, "test", "ood")
    manifest = DatasetManifest(entries)
    path = os.path.join(root, "manifest.csv")
    save_manifest(manifest, path)
    return path
