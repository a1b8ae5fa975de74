"""Command line for the embedding exporter."""

import argparse
import sys

from .encoders import EncoderLoadError
from .export import ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="embed-export",
        description="export image embeddings to an FEMB container")
    p.add_argument("--manifest", required=True,
                   help="dataset CSV (path,label,split)")
    p.add_argument("--out", required=True, help="output FEMB path")
    p.add_argument("--encoder", default="clip-vit-l14",
                   choices=["clip-vit-l14", "tiny-deterministic"])
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--device", default="cpu")
    p.add_argument("--projected", action="store_true",
                   help="use the projected embedding instead of the "
                        "pre-projection features")
    p.add_argument("--pooling", default="class", choices=["class", "mean"])
    p.add_argument("--dim", type=int,
                   help="fail unless the encoder emits this width")
    p.add_argument("--tiny-dim", type=int, default=64,
                   help="width of the tiny test encoder")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(manifest=args.manifest, out=args.out,
                    encoder=args.encoder, device=args.device,
                    batch=args.batch, projected=args.projected,
                    pooling=args.pooling, dim=args.dim,
                    tiny_dim=args.tiny_dim)
    try:
        count = export(job, log=lambda m: print(m, file=sys.stderr))
    except (FileNotFoundError, ValueError, EncoderLoadError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"embeddings,{args.out}")
    print(f"count,{count}")
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
