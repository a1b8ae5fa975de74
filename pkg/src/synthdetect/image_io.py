"""Image ingestion: strict binary PPM, dataset manifests, tensor conversion.

PPM (P6, maxval 255) is the bit-exact fixture format; parsing is strict and
never coerces malformed input. Manifests are UTF-8 CSV with the header
``path,label,split``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class ImageFormatError(ValueError):
    pass


class UnsupportedFormat(ImageFormatError):
    pass


class MalformedHeader(ImageFormatError):
    pass


class Truncated(ImageFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class ImageU8:
    """Decoded 8-bit RGB image; pixels shaped (height, width, 3)."""

    width: int
    height: int
    pixels: np.ndarray
    channels: int = 3

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(f"pixel buffer shape {self.pixels.shape} does "
                             f"not match {self.height}x{self.width}x3")
        if self.width < 1 or self.height < 1:
            raise ValueError("degenerate image dimensions")

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other):
        return (isinstance(other, ImageU8) and self.width == other.width
                and self.height == other.height
                and np.array_equal(self.pixels, other.pixels))


def _read_header_token(buf: bytes, pos: int) -> tuple:
    # skip whitespace and '#' comments
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise MalformedHeader("unexpected end of header")
    return buf[start:pos], pos


def load_ppm(path) -> ImageU8:
    """Parse a binary PPM (P6) file with bit-exact pixel recovery."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 2:
        raise MalformedHeader("file too short for a PPM header")
    magic = buf[:2]
    if magic != b"P6":
        raise UnsupportedFormat(f"expected P6 magic, got {magic!r}")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(buf, pos)
        if not tok.isdigit():
            raise MalformedHeader(f"non-numeric header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedFormat(f"maxval {maxval} unsupported, must be 255")
    if width < 1 or height < 1:
        raise MalformedHeader("non-positive dimensions")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise MalformedHeader("missing whitespace after maxval")
    pos += 1
    need = width * height * 3
    payload = buf[pos:]
    if len(payload) < need:
        raise Truncated(f"payload has {len(payload)} bytes, needs {need}")
    if len(payload) > need:
        raise MalformedHeader(f"{len(payload) - need} trailing bytes after "
                              "pixel payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return ImageU8(width, height, pixels.copy())


def save_ppm(img: ImageU8, path) -> None:
    """Write the canonical P6 encoding; load_ppm(save_ppm(x)) == x."""
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
        f.write(img.tobytes())


def to_tensor(img: ImageU8) -> Tensor:
    """Channel-first 1x3xHxW tensor scaled into [0, 1] by /255."""
    arr = img.pixels.astype(np.float64) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None])


def to_image(t: Tensor) -> ImageU8:
    """Inverse of to_tensor: clamp to [0, 1], scale by 255, round."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    if arr.ndim == 4:
        arr = arr[0]
    arr = np.clip(arr, 0.0, 1.0) * 255.0
    pixels = np.floor(arr + 0.5).astype(np.uint8).transpose(1, 2, 0)
    return ImageU8(pixels.shape[1], pixels.shape[0], pixels)


def center_crop_resize(img: ImageU8, size: int) -> ImageU8:
    """Center crop to a square, then nearest-neighbor resize to size x size.

    Nearest-neighbor uses the pixel-center rule src = ((2*i+1)*S) // (2*T),
    all in integer arithmetic, so results are identical on every platform.
    """
    if min(img.height, img.width) < 8:
        raise ValueError("degenerate dimensions: need at least 8x8")
    side = min(img.height, img.width)
    top = (img.height - side) // 2
    left = (img.width - side) // 2
    square = img.pixels[top:top + side, left:left + side]
    if side == size:
        return ImageU8(size, size, square.copy())
    src = ((2 * np.arange(size) + 1) * side) // (2 * size)
    resized = square[src][:, src]
    return ImageU8(size, size, resized.copy())


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    """Ordered dataset listing; iteration order is file order."""

    entries: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def labels(self, name: str) -> np.ndarray:
        return np.array([e.label for e in self.split(name)], dtype=np.int64)


_SPLITS = ("train", "val", "test")


def load_manifest(path) -> DatasetManifest:
    entries = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise ManifestError(f"bad manifest header {header!r}, expected "
                                "path,label,split")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"line {ln}: expected 3 fields")
            p, label, split = row
            if label not in ("0", "1"):
                raise ManifestError(f"line {ln}: label must be 0 or 1, "
                                    f"got {label!r}")
            if split not in _SPLITS:
                raise ManifestError(f"line {ln}: unknown split {split!r}")
            entries.append(ManifestEntry(p, int(label), split))
    return DatasetManifest(entries)


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label", "split"])
        for e in manifest.entries:
            writer.writerow([e.path, e.label, e.split])
