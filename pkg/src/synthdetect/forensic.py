"""Spatial forensic feature branches.

Neighboring-pixel grid differences expose the duplication artifacts left by
generator up-sampling layers; input-gradient maps from a frozen random CNN
capture complementary high-frequency signatures. Both are pure functions of
the image and are computed outside any training graph.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import substream
from .tensor import Tensor


@dataclass
class NprConfig:
    """Grid side length for pixel-difference extraction (2 matches the
    ubiquitous 2x up-sampling factor)."""

    l: int = 2

    def __post_init__(self):
        if self.l < 2:
            raise ValueError("grid side length must be >= 2")


def npr_extract(img: Tensor, cfg: NprConfig = NprConfig()) -> Tensor:
    """Per-grid pixel differences against the grid's top-left pixel.

    For every non-overlapping l x l grid and color channel, emits the
    l*l - 1 differences (remaining cells in row-major order minus the
    reference), tiled back over the grid footprint so the output keeps the
    input resolution: (N, C*(l*l-1), H, W).
    """
    l = cfg.l
    x = img.data if isinstance(img, Tensor) else np.asarray(img)
    if x.ndim != 4:
        raise ValueError("expected NCHW input")
    N, C, H, W = x.shape
    if H % l or W % l:
        raise ValueError(f"image dims {H}x{W} not divisible by grid size "
                         f"{l}")
    g = x.reshape(N, C, H // l, l, W // l, l)
    ref = g[:, :, :, 0, :, 0]
    nd = l * l - 1
    out = np.empty((N, C * nd, H, W))
    d = 0
    for pi in range(l):
        for pj in range(l):
            if pi == 0 and pj == 0:
                continue
            diff = g[:, :, :, pi, :, pj] - ref
            tiled = np.repeat(np.repeat(diff, l, axis=2), l, axis=3)
            for c in range(C):
                out[:, c * nd + d] = tiled[:, c]
            d += 1
    return Tensor(out)


class FixedBackbone:
    """Small frozen CNN used only as a gradient probe.

    Four 3x3 conv layers (3 -> 8 -> 16 -> 16 -> 16), ReLU between them, no
    nonlinearity after the last. Parameters are seeded-random, never
    updated, and identical across runs for a given seed.
    """

    PLAN = (3, 8, 16, 16, 16)

    def __init__(self, seed: int = 1):
        self.seed = seed
        self.weights = []
        for i, (cin, cout) in enumerate(zip(self.PLAN, self.PLAN[1:])):
            bound = np.sqrt(6.0 / (cin * 9))
            rng = substream(seed, f"fixed_backbone/conv{i}")
            w = rng.uniform(-bound, bound, (cout, cin, 3, 3))
            self.weights.append(Tensor(w))

    @property
    def out_channels(self) -> int:
        return self.PLAN[-1]

    def forward(self, x: Tensor, guided: bool = False) -> Tensor:
        act = T.relu_guided if guided else T.relu
        h = x
        for i, w in enumerate(self.weights):
            h = T.conv2d(h, w)
            if i < len(self.weights) - 1:
                h = act(h)
        return h


def gradient_extract(img: Tensor, backbone: FixedBackbone,
                     guided: bool = False) -> Tensor:
    """Gradient of the summed backbone response with respect to the input.

    Returns d(sum of all output channels)/d(img), same shape as the input.
    The backbone stays frozen; repeated calls are bit-identical.
    """
    x = Tensor(np.ascontiguousarray(img.data), requires_grad=True)
    with T.enable_grad():
        out = backbone.forward(x, guided=guided)
        T.backward(T.tsum(out))
    return Tensor(x.grad)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                     [-2.0, 0.0, 2.0],
                     [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()


def sobel_gradient(img: Tensor) -> Tensor:
    """Horizontal and vertical Sobel responses per channel (correlation,
    reflect padding): (N, 2C, H, W), ordered (c0x, c0y, c1x, c1y, ...)."""
    x = img.data if isinstance(img, Tensor) else np.asarray(img)
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    out = np.zeros((N, 2 * C, H, W))
    for di in range(3):
        for dj in range(3):
            win = xp[:, :, di:di + H, dj:dj + W]
            for c in range(C):
                out[:, 2 * c] += _SOBEL_X[di, dj] * win[:, c]
                out[:, 2 * c + 1] += _SOBEL_Y[di, dj] * win[:, c]
    return Tensor(out)
