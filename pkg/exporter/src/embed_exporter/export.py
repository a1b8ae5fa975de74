"""Export job: manifest in, FEMB file out."""

import csv
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .femb import encode_records


@dataclass
class ExportJob:
    manifest: str
    out: str
    encoder: str = "clip-vit-l14"
    device: str = "cpu"
    batch: int = 8
    projected: bool = False
    pooling: str = "class"
    dim: int = None           # assert the encoder width when set
    tiny_dim: int = 64        # width of the tiny test encoder


def read_manifest_paths(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise ValueError(f"bad manifest header {header!r}")
        return [row[0] for row in reader if row]


def export(job: ExportJob, log=None) -> int:
    """Run the encoder over every manifest entry and write the FEMB file
    atomically (temp file + rename). Returns the record count."""
    from .encoders import make_encoder

    paths = read_manifest_paths(job.manifest)
    root = os.path.dirname(os.path.abspath(job.manifest))
    encoder = make_encoder(job.encoder, device=job.device,
                           projected=job.projected, pooling=job.pooling,
                           dim=job.tiny_dim)
    if job.dim is not None and encoder.dim != job.dim:
        raise ValueError(f"encoder {encoder.name} emits dim {encoder.dim}, "
                         f"requested {job.dim}")
    if log:
        log(f"encoder {encoder.name} (dim {encoder.dim}), "
            f"{len(paths)} images")
    ids, vectors = [], []
    for start in range(0, len(paths), job.batch):
        chunk = paths[start:start + job.batch]
        images = []
        for p in chunk:
            full = p if os.path.isabs(p) else os.path.join(root, p)
            if not os.path.exists(full):
                raise FileNotFoundError(f"missing image {full}")
            images.append(Image.open(full).convert("RGB"))
        vecs = encoder.encode_batch(images)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        vecs = vecs / norms
        ids.extend(chunk)
        vectors.extend(vecs)
        if log:
            log(f"encoded {min(start + job.batch, len(paths))}/"
                f"{len(paths)}")
    blob = encode_records(ids, vectors, encoder.dim)
    out_dir = os.path.dirname(os.path.abspath(job.out)) or "."
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".femb.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, job.out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(ids)
