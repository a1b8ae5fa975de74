"""Detector assembly and weight serialization.

Architecture: forensic branches -> cross-attention fusion -> Haar split with
a residual refinement of the approximation -> FADC stack -> spatial
attention -> two strided conv/batchnorm stages -> global average pool ->
single logit. Branches can be switched off individually for ablations.

Weights serialize to the FWTS container (little-endian): magic ``FWTS``,
u32 version=1, u32 tensor count, then per tensor a u32 name length, the
UTF-8 name, u32 ndim, the dims as u32, and the float64 payload.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .forensic import FixedBackbone, NprConfig, gradient_extract, \
    npr_extract, sobel_gradient
from .freq_blocks import FadcBlockParams, FadcParams, fadc_block, haar_dwt, \
    haar_idwt, make_band_spec, spatial_attention
from .image_io import ImageU8, center_crop_resize, to_tensor
from .rng import substream
from .semantic import CrossAttentionParams, fuse, stub_embed
from .tensor import Tensor

FWTS_MAGIC = b"FWTS"
FWTS_VERSION = 1


class InvalidConfig(ValueError):
    pass


class WeightsFormatError(ValueError):
    pass


@dataclass
class DetectorConfig:
    """Architecture hyperparameters and ablation switches."""

    use_npr: bool = True
    use_grad: bool = True
    use_semantic: bool = True
    npr_grid: int = 2
    grad_mode: str = "backbone"     # "backbone" (input gradients) | "sobel"
    guided_relu: bool = False
    semantic_source: str = "stub"   # "stub" | "file"
    embed_dim: int = 768
    attn_heads: int = 4
    attn_dk: int = 16
    attn_dv: int = 4
    n_fadc_blocks: int = 3
    bands: int = 4
    d_base: float = 2.0
    head_channels: tuple = (16, 24)
    dropout_p: float = 0.2
    image_size: int = 64

    def validate(self):
        if not (self.use_npr or self.use_grad or self.use_semantic):
            raise InvalidConfig("at least one feature branch must be "
                                "enabled")
        if self.grad_mode not in ("backbone", "sobel"):
            raise InvalidConfig(f"unknown grad_mode {self.grad_mode!r}")
        if self.semantic_source not in ("stub", "file"):
            raise InvalidConfig(
                f"unknown semantic_source {self.semantic_source!r}")
        if self.image_size % self.npr_grid:
            raise InvalidConfig("image_size must be divisible by the NPR "
                                "grid")
        s = self.image_size
        if s < 8 or s & (s - 1):
            raise InvalidConfig("image_size must be a power of two >= 8 "
                                "for the FFT/DWT stages")
        if self.use_semantic and (self.attn_dk % self.attn_heads
                                  or self.attn_dv % self.attn_heads):
            raise InvalidConfig("attention dims must be divisible by the "
                                "head count")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidConfig("dropout_p must be in [0, 1)")
        if self.n_fadc_blocks < 1 or self.bands < 1 or self.d_base <= 0:
            raise InvalidConfig("n_fadc_blocks, bands and d_base must be "
                                "positive")

    @property
    def local_channels(self) -> int:
        c = 0
        if self.use_npr:
            c += 3 * (self.npr_grid ** 2 - 1)
        if self.use_grad:
            c += 3 if self.grad_mode == "backbone" else 6
        return c

    @property
    def fused_channels(self) -> int:
        return self.local_channels + (self.attn_dv if self.use_semantic
                                      else 0)


class Detector:
    """A built detector: named parameters, batchnorm buffers, and the
    frozen gradient-probe backbone."""

    def __init__(self, config: DetectorConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        self.params: dict = {}
        self.buffers: dict = {}
        self.backbone = None
        self.embeddings = None
        self._build()

    # -- construction ------------------------------------------------------

    def _he(self, name, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        w = substream(self.seed, name).uniform(-bound, bound, shape)
        self.params[name] = Tensor(w, requires_grad=True)

    def _zeros(self, name, shape):
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def _build(self):
        cfg = self.config
        cf = cfg.fused_channels
        if cfg.use_semantic:
            cl = cfg.local_channels
            self._he("attn/w_q", (cfg.embed_dim, cfg.attn_dk), cfg.embed_dim)
            self._he("attn/w_k", (cl, cfg.attn_dk), cl)
            self._he("attn/w_v", (cl, cfg.attn_dv), cl)
        self._he("approx/conv1_w", (cf, cf, 3, 3), cf * 9)
        self._zeros("approx/conv1_b", (cf,))
        self._he("approx/conv2_w", (cf, cf, 3, 3), cf * 9)
        self._zeros("approx/conv2_b", (cf,))
        for i in range(cfg.n_fadc_blocks):
            p = f"fadc{i}"
            self._he(f"{p}/w", (cf, cf, 3, 3), cf * 9)
            self._he(f"{p}/pred_w", (cf, 3, 3), 9)
            self._zeros(f"{p}/pred_b", (cf,))
            self._he(f"{p}/lam_w", (1, cf, 1, 1), cf)
            self._zeros(f"{p}/lam_b", (1,))
            self._he(f"{p}/band_w", (cfg.bands, cf, 1, 1), cf)
            self._zeros(f"{p}/band_b", (cfg.bands,))
        self._he("sattn/w", (1, 2, 7, 7), 2 * 49)
        self._zeros("sattn/b", (1,))
        c1, c2 = cfg.head_channels
        self._he("head1/w", (c1, cf, 3, 3), cf * 9)
        self._zeros("head1/b", (c1,))
        self.params["head1/bn_gamma"] = Tensor(np.ones(c1),
                                               requires_grad=True)
        self._zeros("head1/bn_beta", (c1,))
        self.buffers["head1/bn_mean"] = np.zeros(c1)
        self.buffers["head1/bn_var"] = np.ones(c1)
        self._he("head2/w", (c2, c1, 3, 3), c1 * 9)
        self._zeros("head2/b", (c2,))
        self.params["head2/bn_gamma"] = Tensor(np.ones(c2),
                                               requires_grad=True)
        self._zeros("head2/bn_beta", (c2,))
        self.buffers["head2/bn_mean"] = np.zeros(c2)
        self.buffers["head2/bn_var"] = np.ones(c2)
        self._he("fc/w", (c2, 1), c2)
        self._zeros("fc/b", (1,))
        self.buffers["calibration/threshold"] = np.array([0.5])
        if cfg.use_grad and cfg.grad_mode == "backbone":
            self.backbone = FixedBackbone(seed=self.seed)
            for i, w in enumerate(self.backbone.weights):
                self.params[f"fixed_backbone/conv{i}_w"] = w  # frozen

        self._spec = make_band_spec(cfg.image_size, cfg.image_size,
                                    cfg.bands)
        if cfg.use_semantic:
            self._attn = CrossAttentionParams(
                w_q=self.params["attn/w_q"], w_k=self.params["attn/w_k"],
                w_v=self.params["attn/w_v"], heads=cfg.attn_heads)

    # -- bookkeeping -------------------------------------------------------

    def trainable(self) -> dict:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def n_parameters(self, trainable_only: bool = True) -> int:
        items = self.trainable() if trainable_only else self.params
        return sum(p.size for p in items.values())

    def census(self) -> dict:
        """Name -> shape map over every stored tensor (params + buffers)."""
        out = {n: tuple(p.shape) for n, p in self.params.items()}
        out.update({n: tuple(b.shape) for n, b in self.buffers.items()})
        return out

    def load_embeddings(self, mapping: dict) -> None:
        self.embeddings = mapping

    @property
    def threshold(self) -> float:
        return float(self.buffers["calibration/threshold"][0])

    @threshold.setter
    def threshold(self, value: float):
        self.buffers["calibration/threshold"] = np.array([float(value)])

    # -- feature extraction (pure functions of the image) -------------------

    def extract_local_features(self, x: np.ndarray) -> np.ndarray:
        """Branch features for a [0,1]-scaled image batch (N,3,H,W)."""
        cfg = self.config
        parts = []
        if cfg.use_npr:
            parts.append(npr_extract(Tensor(x),
                                     NprConfig(cfg.npr_grid)).data)
        if cfg.use_grad:
            if cfg.grad_mode == "backbone":
                parts.append(gradient_extract(Tensor(x), self.backbone,
                                              guided=cfg.guided_relu).data)
            else:
                parts.append(sobel_gradient(Tensor(x)).data)
        if not parts:
            raise InvalidConfig("no local feature branch enabled")
        return np.concatenate(parts, axis=1)

    def phi_for(self, image: ImageU8, path: str = None) -> np.ndarray:
        cfg = self.config
        if not cfg.use_semantic:
            return None
        if cfg.semantic_source == "stub":
            return stub_embed(image, cfg.embed_dim).vector
        if self.embeddings is None:
            raise ValueError("semantic_source=file requires embeddings to "
                             "be loaded first")
        rec = self.embeddings.get(path)
        if rec is None:
            raise ValueError(f"missing embedding for {path!r}")
        if rec.vector.shape != (cfg.embed_dim,):
            raise ValueError(f"embedding for {path!r} has dim "
                             f"{rec.vector.shape[0]}, expected "
                             f"{cfg.embed_dim}")
        return rec.vector

    # -- forward -----------------------------------------------------------

    def _fuse_batch(self, feats: np.ndarray, phis) -> Tensor:
        cfg = self.config
        if not cfg.use_semantic:
            return Tensor(feats)
        if phis is None:
            raise ValueError("missing embedding: the semantic branch is "
                             "enabled")
        fused = [fuse(Tensor(phis[n]), Tensor(feats[n:n + 1]), self._attn)
                 for n in range(feats.shape[0])]
        return fused[0] if len(fused) == 1 else T.concat(fused, axis=0)

    def forward_from_features(self, feats: np.ndarray, phis,
                              training: bool = False,
                              dropout_seed: int = 0) -> Tensor:
        """Logits (N,) from precomputed branch features."""
        cfg = self.config
        p = self.params
        x = self._fuse_batch(feats, phis)
        ll, (dh, dv, dd) = haar_dwt(x)
        h = T.relu(T.conv2d(ll, p["approx/conv1_w"], p["approx/conv1_b"]))
        h = T.conv2d(h, p["approx/conv2_w"], p["approx/conv2_b"])
        ll = T.relu(T.add(h, ll))
        x = haar_idwt(ll, dh, dv, dd)
        for i in range(cfg.n_fadc_blocks):
            bp = FadcBlockParams(
                fadc=FadcParams(w=p[f"fadc{i}/w"],
                                pred_w=p[f"fadc{i}/pred_w"],
                                pred_b=p[f"fadc{i}/pred_b"],
                                lam_w=p[f"fadc{i}/lam_w"],
                                lam_b=p[f"fadc{i}/lam_b"],
                                d_base=cfg.d_base),
                band_w=p[f"fadc{i}/band_w"], band_b=p[f"fadc{i}/band_b"],
                spec=self._spec)
            x = fadc_block(x, bp)
        x = spatial_attention(x, p["sattn/w"], p["sattn/b"])
        for si, stage in enumerate(("head1", "head2")):
            x = T.conv2d(x, p[f"{stage}/w"], p[f"{stage}/b"], stride=2)
            if training:
                x, mu, var = T.batchnorm_train(x, p[f"{stage}/bn_gamma"],
                                               p[f"{stage}/bn_beta"])
                m = 0.1
                self.buffers[f"{stage}/bn_mean"] = \
                    (1 - m) * self.buffers[f"{stage}/bn_mean"] + m * mu
                self.buffers[f"{stage}/bn_var"] = \
                    (1 - m) * self.buffers[f"{stage}/bn_var"] + m * var
            else:
                x = T.batchnorm_inference(x, p[f"{stage}/bn_gamma"],
                                          p[f"{stage}/bn_beta"],
                                          self.buffers[f"{stage}/bn_mean"],
                                          self.buffers[f"{stage}/bn_var"])
            x = T.relu(x)
            x = T.dropout(x, cfg.dropout_p, seed=dropout_seed * 2 + si,
                          training=training)
        pooled = T.tmean(x, axis=(2, 3))
        logits = T.add(T.matmul(pooled, p["fc/w"]),
                       T.broadcast_to(p["fc/b"], (pooled.shape[0], 1)))
        return T.reshape(logits, (pooled.shape[0],))

    def forward_batch(self, x: np.ndarray, phis=None, training: bool = False,
                      dropout_seed: int = 0) -> Tensor:
        cfg = self.config
        if x.shape[-1] != cfg.image_size or x.shape[-2] != cfg.image_size:
            raise ValueError(f"input {x.shape[-2]}x{x.shape[-1]} does not "
                             f"match configured size {cfg.image_size}")
        feats = self.extract_local_features(x)
        return self.forward_from_features(feats, phis, training,
                                          dropout_seed)

    def forward(self, img, phi=None) -> float:
        """Evaluation-mode scalar logit for one image.

        ``img`` is an ImageU8 (cropped/resized as needed) or a 1x3xHxW
        tensor already matching the configured size; ``phi`` must be given
        iff the semantic branch is on (ImageU8 inputs fall back to the
        configured semantic source when phi is omitted).
        """
        if isinstance(img, ImageU8):
            img = center_crop_resize(img, self.config.image_size)
            if phi is None and self.config.use_semantic:
                phi = self.phi_for(img)
            x = to_tensor(img).data
        else:
            x = img.data if isinstance(img, Tensor) else np.asarray(img)
        phis = None if phi is None else np.asarray(phi)[None]
        with T.no_grad():
            out = self.forward_batch(x, phis, training=False)
        return float(out.data[0])


def build(config: DetectorConfig, seed: int = 1) -> Detector:
    """Deterministically initialize a detector (He-uniform from seed)."""
    return Detector(config, seed)


def images_to_batch(images, size: int) -> np.ndarray:
    """Crop/resize ImageU8 items and stack them into a (N,3,H,W) batch."""
    arrs = [to_tensor(center_crop_resize(im, size)).data[0] for im in images]
    return np.stack(arrs, axis=0)


# ---------------------------------------------------------------------------
# FWTS serialization


def _write_tensor(f, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f8").tobytes())


def write_tensor_file(path, entries) -> None:
    """Write (name, array) pairs as an FWTS container."""
    with open(path, "wb") as f:
        f.write(FWTS_MAGIC)
        f.write(struct.pack("<II", FWTS_VERSION, len(entries)))
        for name, arr in entries:
            _write_tensor(f, name, np.asarray(arr, dtype=np.float64))


def save_weights(det: Detector, path) -> None:
    entries = [(n, p.data) for n, p in det.params.items()]
    entries += [(n, b) for n, b in det.buffers.items()]
    write_tensor_file(path, entries)


def read_weights_file(path) -> dict:
    """Parse an FWTS file into a name -> array map."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12:
        raise WeightsFormatError("file too short for an FWTS header")
    if buf[:4] != FWTS_MAGIC:
        raise WeightsFormatError(f"bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FWTS_VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        if pos + 4 > len(buf):
            raise WeightsFormatError("truncated tensor header")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        if pos + 8 * n > len(buf):
            raise WeightsFormatError(f"truncated payload for {name!r}")
        arr = np.frombuffer(buf, dtype="<f8", count=n,
                            offset=pos).reshape(dims)
        pos += 8 * n
        if name in out:
            raise WeightsFormatError(f"duplicate tensor {name!r}")
        out[name] = arr.copy()
    if pos != len(buf):
        raise WeightsFormatError(f"{len(buf) - pos} trailing bytes")
    return out


def load_weights(det: Detector, path) -> None:
    """Load an FWTS file; requires an exact name/shape census match."""
    loaded = read_weights_file(path)
    census = det.census()
    missing = sorted(set(census) - set(loaded))
    extra = sorted(set(loaded) - set(census))
    if missing or extra:
        raise WeightsFormatError(
            f"census mismatch: missing {missing}, unexpected {extra}")
    for name, arr in loaded.items():
        if tuple(arr.shape) != census[name]:
            raise WeightsFormatError(
                f"shape mismatch for {name!r}: file has {arr.shape}, "
                f"model expects {census[name]}")
    for name, p in det.params.items():
        p.data = loaded[name].copy()
    for name in det.buffers:
        det.buffers[name] = loaded[name].copy()
