"""FEMB container writer.

Byte layout (little-endian): magic ``FEMB``, u32 version=1, u32 dim,
u64 record count, then per record a u32 id byte length, the UTF-8 id, and
dim float32 values. This mirrors the consumer's reader contract exactly.
"""

import struct

import numpy as np

MAGIC = b"FEMB"
VERSION = 1


def encode_records(ids, vectors, dim: int) -> bytes:
    if len(ids) != len(vectors):
        raise ValueError("ids and vectors must align")
    seen = set()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, dim)
    blob += struct.pack("<Q", len(ids))
    for rid, vec in zip(ids, vectors):
        if rid in seen:
            raise ValueError(f"duplicate id {rid!r}")
        seen.add(rid)
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (dim,):
            raise ValueError(f"vector for {rid!r} has shape {vec.shape}, "
                             f"expected ({dim},)")
        ib = rid.encode("utf-8")
        blob += struct.pack("<I", len(ib))
        blob += ib
        blob += vec.astype("<f4").tobytes()
    return bytes(blob)
