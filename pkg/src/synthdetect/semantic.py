"""Semantic-prior branch: embedding files, a stub embedder, and the
cross-attention fusion of a global embedding with local forensic features.

Embedding files use the FEMB container (little-endian): magic ``FEMB``,
u32 version=1, u32 dim, u64 count, then per record a u32 id byte length,
the UTF-8 id, and dim float32 values.
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .image_io import ImageU8
from .rng import substream
from .tensor import Tensor

FEMB_MAGIC = b"FEMB"
FEMB_VERSION = 1


class EmbeddingFileError(ValueError):
    pass


@dataclass
class EmbeddingRecord:
    id: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError("embedding vector must be 1-D")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding vector must be finite")


def write_embedding_file(path, records, dim: int) -> None:
    """Serialize records (insertion order preserved) to an FEMB file."""
    seen = set()
    blob = bytearray()
    blob += FEMB_MAGIC
    blob += struct.pack("<II", FEMB_VERSION, dim)
    blob += struct.pack("<Q", len(records))
    for rec in records:
        if rec.id in seen:
            raise EmbeddingFileError(f"duplicate id {rec.id!r}")
        seen.add(rec.id)
        if rec.vector.shape != (dim,):
            raise EmbeddingFileError(
                f"record {rec.id!r} has dim {rec.vector.shape[0]}, "
                f"file dim is {dim}")
        ib = rec.id.encode("utf-8")
        blob += struct.pack("<I", len(ib))
        blob += ib
        blob += rec.vector.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(blob)


def read_embedding_file(path) -> dict:
    """Load an FEMB file into an id -> EmbeddingRecord map."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 20:
        raise EmbeddingFileError("file too short for an FEMB header")
    if buf[:4] != FEMB_MAGIC:
        raise EmbeddingFileError(f"bad magic {buf[:4]!r}")
    version, dim = struct.unpack_from("<II", buf, 4)
    if version != FEMB_VERSION:
        raise EmbeddingFileError(f"unsupported version {version}")
    (count,) = struct.unpack_from("<Q", buf, 12)
    pos = 20
    out = {}
    for _ in range(count):
        if pos + 4 > len(buf):
            raise EmbeddingFileError("truncated record header")
        (idlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + idlen + 4 * dim > len(buf):
            raise EmbeddingFileError("truncated record payload")
        rid = buf[pos:pos + idlen].decode("utf-8")
        pos += idlen
        vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
        if rid in out:
            raise EmbeddingFileError(f"duplicate id {rid!r}")
        out[rid] = EmbeddingRecord(rid, vec.astype(np.float64))
    if pos != len(buf):
        raise EmbeddingFileError(f"{len(buf) - pos} trailing bytes")
    return out


def stub_embed(img: ImageU8, dim: int = 768) -> EmbeddingRecord:
    """Deterministic pseudo-embedding from a hash of the image bytes.

    A stand-in for a pretrained encoder: same pixels give the same unit
    vector, and any pixel change reseeds the whole vector.
    """
    h = hashlib.sha256()
    h.update(b"stub-embed")
    h.update(struct.pack("<II", img.width, img.height))
    h.update(img.tobytes())
    seed_words = np.frombuffer(h.digest(), dtype=np.uint32)
    rng = np.random.default_rng(np.random.SeedSequence(seed_words.tolist()))
    v = rng.standard_normal(dim)
    v /= np.sqrt((v * v).sum())
    return EmbeddingRecord(h.hexdigest(), v)


@dataclass
class CrossAttentionParams:
    """Learnable projections of the global query and local keys/values."""

    w_q: Tensor  # (D, d_k)
    w_k: Tensor  # (C, d_k)
    w_v: Tensor  # (C, d_v)
    heads: int = 4

    def __post_init__(self):
        d_k = self.w_q.shape[1]
        if self.w_k.shape[1] != d_k:
            raise ValueError("w_q and w_k must share the projection dim")
        if d_k % self.heads or self.w_v.shape[1] % self.heads:
            raise ValueError("projection dims must be divisible by the "
                             "head count")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1]


def init_attention_params(embed_dim: int, local_channels: int,
                          d_k: int = 64, d_v: int = 64, heads: int = 4,
                          seed: int = 1) -> CrossAttentionParams:
    def he(rng, rows, cols):
        bound = np.sqrt(6.0 / rows)
        return Tensor(rng.uniform(-bound, bound, (rows, cols)),
                      requires_grad=True)

    return CrossAttentionParams(
        w_q=he(substream(seed, "attn/w_q"), embed_dim, d_k),
        w_k=he(substream(seed, "attn/w_k"), local_channels, d_k),
        w_v=he(substream(seed, "attn/w_v"), local_channels, d_v),
        heads=heads)


def cross_attention(phi: Tensor, f_local: Tensor,
                    params: CrossAttentionParams) -> Tensor:
    """Single global query attending over all local positions.

    phi: (D,) embedding; f_local: (L, C) flattened feature map. Returns the
    attention-weighted value vector of size d_v. With one head this is
    exactly softmax(q Kᵀ / sqrt(d_k)) V.
    """
    if phi.ndim != 1 or f_local.ndim != 2:
        raise ValueError("expected phi (D,) and f_local (L, C)")
    if phi.shape[0] != params.w_q.shape[0]:
        raise ValueError(f"embedding dim {phi.shape[0]} does not match "
                         f"w_q rows {params.w_q.shape[0]}")
    if f_local.shape[1] != params.w_k.shape[0]:
        raise ValueError(f"local channels {f_local.shape[1]} do not match "
                         f"w_k rows {params.w_k.shape[0]}")
    q = T.matmul(phi, params.w_q)        # (d_k,)
    k = T.matmul(f_local, params.w_k)    # (L, d_k)
    v = T.matmul(f_local, params.w_v)    # (L, d_v)
    h = params.heads
    dkh = params.d_k // h
    dvh = params.d_v // h
    outs = []
    for i in range(h):
        qi = T.narrow(q, 0, i * dkh, dkh)
        ki = T.narrow(k, 1, i * dkh, dkh)
        vi = T.narrow(v, 1, i * dvh, dvh)
        scores = T.scale(T.matmul(ki, qi), 1.0 / np.sqrt(dkh))
        attn = T.softmax(scores, axis=0)
        outs.append(T.matmul(attn, vi))
    return outs[0] if h == 1 else T.concat(outs, axis=0)


def fuse(phi: Tensor, f_local_map: Tensor,
         params: CrossAttentionParams) -> Tensor:
    """Broadcast the attention output over all positions and concatenate it
    with the local feature map: (1, C, H, W) -> (1, C + d_v, H, W)."""
    if f_local_map.ndim != 4 or f_local_map.shape[0] != 1:
        raise ValueError("expected a single-image 1xCxHxW feature map")
    _, C, H, W = f_local_map.shape
    flat = T.transpose(T.reshape(f_local_map, (C, H * W)), (1, 0))
    att = cross_attention(phi, flat, params)
    att_map = T.broadcast_to(T.reshape(att, (1, params.d_v, 1, 1)),
                             (1, params.d_v, H, W))
    return T.concat([f_local_map, att_map], axis=1)
