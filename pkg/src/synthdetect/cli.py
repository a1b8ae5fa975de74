"""Operator command line: feature extraction, training, evaluation,
ablation sweeps, perturbation robustness, and artifact inspection.

Exit codes: 0 success, 1 usage/configuration error, 2 data error (bad
files or formats). Progress goes to stderr; machine-readable CSV and
artifact paths go to stdout. Every run logs its resolved configuration
and seed to stderr so it can be reproduced exactly.
"""

import argparse
import dataclasses
import sys

from . import perturb as P
from . import training as TR
from .image_io import ImageFormatError, ManifestError, load_manifest
from .model import Detector, DetectorConfig, InvalidConfig, \
    WeightsFormatError, build, load_weights, read_weights_file, \
    save_weights, write_tensor_file
from .semantic import EmbeddingFileError, read_embedding_file
from .training import FocalLossConfig, TrainConfig, TrainingDiverged


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


_DET_FIELDS = {f.name: f.type for f in dataclasses.fields(DetectorConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_FOCAL_FIELDS = {f.name: f.type for f in dataclasses.fields(FocalLossConfig)}
_KNOWN_KEYS = set(_DET_FIELDS) | set(_TRAIN_FIELDS) | set(_FOCAL_FIELDS)


def _coerce(key, raw):
    raw = raw.strip()
    if key == "head_channels":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def resolve_config(config_path, overrides):
    """Merge a key=value config file with --set overrides; unknown keys
    are rejected."""
    values = {}

    def put(key, raw, where):
        key = key.strip()
        if key not in _KNOWN_KEYS:
            raise CliUsageError(f"unknown config key {key!r} in {where}")
        values[key] = _coerce(key, raw)

    if config_path:
        with open(config_path, encoding="utf-8") as f:
            for ln, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise CliUsageError(
                        f"{config_path}:{ln}: expected key = value")
                k, v = line.split("=", 1)
                put(k, v, f"{config_path}:{ln}")
    for item in overrides or []:
        if "=" not in item:
            raise CliUsageError(f"--set needs key=value, got {item!r}")
        k, v = item.split("=", 1)
        put(k, v, "--set")
    det = DetectorConfig(**{k: v for k, v in values.items()
                            if k in _DET_FIELDS})
    tr = TrainConfig(**{k: v for k, v in values.items()
                        if k in _TRAIN_FIELDS})
    fl = FocalLossConfig(**{k: v for k, v in values.items()
                            if k in _FOCAL_FIELDS})
    det.validate()
    return det, tr, fl


def _log_config(det, tr, fl):
    parts = [f"{k}={v}" for k, v in sorted(vars(det).items())]
    parts += [f"{k}={v}" for k, v in sorted(vars(tr).items())]
    parts += [f"{k}={v}" for k, v in sorted(vars(fl).items())]
    print("resolved-config: " + " ".join(parts), file=sys.stderr)


def _progress(msg):
    print(msg, file=sys.stderr)


def _build_detector(det_cfg, tr_cfg, embeddings_path) -> Detector:
    det = build(det_cfg, seed=tr_cfg.seed)
    if det_cfg.use_semantic and det_cfg.semantic_source == "file":
        if not embeddings_path:
            raise CliUsageError("semantic_source=file requires "
                                "--embeddings")
        det.load_embeddings(read_embedding_file(embeddings_path))
    return det


def _cmd_train(args):
    det_cfg, tr_cfg, fl_cfg = resolve_config(args.config, args.set)
    _log_config(det_cfg, tr_cfg, fl_cfg)
    det = _build_detector(det_cfg, tr_cfg, args.embeddings)
    history, _, val_data = TR.train(det, args.manifest, tr_cfg, fl_cfg,
                                    log=_progress)
    scores = TR.scores_for(det, val_data, batch=tr_cfg.batch)
    det.threshold = TR.calibrate_threshold(scores, val_data.labels)
    save_weights(det, args.out_weights)
    with open(args.out_history, "w", encoding="utf-8") as f:
        f.write(TR.history_to_csv(history))
    report = TR.evaluate(det, val_data, threshold=det.threshold,
                         batch=tr_cfg.batch)
    print(f"weights,{args.out_weights}")
    print(f"history,{args.out_history}")
    sys.stdout.write(TR.report_to_csv(report))
    return 0


def _cmd_eval(args):
    det_cfg, tr_cfg, fl_cfg = resolve_config(args.config, args.set)
    _log_config(det_cfg, tr_cfg, fl_cfg)
    det = _build_detector(det_cfg, tr_cfg, args.embeddings)
    load_weights(det, args.weights)
    import os
    manifest = load_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    data = TR.load_split(det, manifest, args.split, root=root)
    report = TR.evaluate(det, data, threshold=det.threshold,
                         batch=tr_cfg.batch)
    sys.stdout.write(TR.report_to_csv(report))
    return 0


def _cmd_ablate(args):
    det_cfg, tr_cfg, fl_cfg = resolve_config(args.config, args.set)
    _log_config(det_cfg, tr_cfg, fl_cfg)
    drops = [d.strip() for d in args.drop.split(",") if d.strip()]
    valid = {"npr", "grad", "semantic"}
    bad = set(drops) - valid
    if bad:
        raise CliUsageError(f"unknown branches to drop: {sorted(bad)}")
    import os
    manifest = load_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    print("config,acc,ap")
    for name in ["full"] + [f"-{d}" for d in drops]:
        cfg = dataclasses.replace(det_cfg)
        if name != "full":
            setattr(cfg, f"use_{name[1:]}", False)
        cfg.validate()
        det = _build_detector(cfg, tr_cfg, args.embeddings)
        _progress(f"training configuration {name}")
        train_data = TR.load_split(det, manifest, "train", root=root)
        val_data = TR.load_split(det, manifest, "val", root=root)
        TR.train_on_features(det, train_data, val_data, tr_cfg, fl_cfg,
                             log=_progress)
        scores = TR.scores_for(det, val_data, batch=tr_cfg.batch)
        det.threshold = TR.calibrate_threshold(scores, val_data.labels)
        test_data = TR.load_split(det, manifest, "test", root=root)
        rep = TR.evaluate(det, test_data, threshold=det.threshold,
                          batch=tr_cfg.batch)
        print(f"{name},{rep.acc:.10g},{rep.ap:.10g}")
        if args.out_dir:
            os.makedirs(args.out_dir, exist_ok=True)
            save_weights(det, os.path.join(args.out_dir,
                                           f"weights_{name}.fwts"))
    return 0


def _cmd_perturb(args):
    det_cfg, tr_cfg, fl_cfg = resolve_config(args.config, args.set)
    _log_config(det_cfg, tr_cfg, fl_cfg)
    det = _build_detector(det_cfg, tr_cfg, None)
    load_weights(det, args.weights)
    import os
    from .image_io import load_ppm
    manifest = load_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    entries = manifest.split(args.split)
    if not entries:
        raise ManifestError(f"split {args.split!r} is empty")
    images = [load_ppm(os.path.join(root, e.path)) for e in entries]
    labels = [e.label for e in entries]
    specs = P.parse_specs(args.specs, seed=args.noise_seed)
    report = P.robustness_sweep(det, images, labels, specs, det.threshold,
                                batch=tr_cfg.batch, progress=_progress)
    sys.stdout.write(P.report_csv(report))
    return 0


def _cmd_extract(args):
    det_cfg, tr_cfg, fl_cfg = resolve_config(args.config, args.set)
    _log_config(det_cfg, tr_cfg, fl_cfg)
    det = _build_detector(det_cfg, tr_cfg, args.embeddings)
    import os
    from .image_io import center_crop_resize, load_ppm
    from .model import images_to_batch
    manifest = load_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    entries = manifest.entries if args.split == "all" \
        else manifest.split(args.split)
    if not entries:
        raise ManifestError(f"no entries for split {args.split!r}")
    size = det.config.image_size
    out_entries = []
    for e in entries:
        img = center_crop_resize(load_ppm(os.path.join(root, e.path)), size)
        x = images_to_batch([img], size)
        feats = det.extract_local_features(x)
        out_entries.append((f"features/{e.path}", feats[0]))
        if det.config.use_semantic:
            out_entries.append((f"embedding/{e.path}",
                                det.phi_for(img, e.path)))
        _progress(f"extracted {e.path}")
    write_tensor_file(args.out, out_entries)
    print(f"features,{args.out}")
    return 0


def _cmd_inspect(args):
    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == b"FWTS":
        tensors = read_weights_file(args.path)
        print("kind,name,shape")
        for name, arr in tensors.items():
            dims = "x".join(str(d) for d in arr.shape) or "scalar"
            print(f"tensor,{name},{dims}")
    elif magic == b"FEMB":
        records = read_embedding_file(args.path)
        dim = next(iter(records.values())).vector.shape[0] if records else 0
        print("kind,count,dim")
        print(f"embeddings,{len(records)},{dim}")
    else:
        raise WeightsFormatError(f"unrecognized file magic {magic!r}")
    return 0


def _make_parser() -> _Parser:
    parser = _Parser(prog="synthdetect",
                     description="frequency-aware synthetic-image detector")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, weights=False, manifest=True):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one configuration key")
        p.add_argument("--embeddings", help="FEMB file for "
                                            "semantic_source=file")
        if manifest:
            p.add_argument("--manifest", required=True,
                           help="dataset CSV (path,label,split)")
        if weights:
            p.add_argument("--weights", required=True,
                           help="trained FWTS weights file")

    p = sub.add_parser("train", help="train a detector")
    common(p)
    p.add_argument("--out-weights", default="weights.fwts")
    p.add_argument("--out-history", default="history.csv")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained detector")
    common(p, weights=True)
    p.add_argument("--split", default="test",
                   choices=["train", "val", "test"])
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="branch-removal comparison runs")
    common(p)
    p.add_argument("--drop", default="npr,grad,semantic",
                   help="comma list of branches to drop")
    p.add_argument("--out-dir", help="save per-configuration weights here")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("perturb", help="robustness sweep on perturbed "
                                       "images")
    common(p, weights=True)
    p.add_argument("--specs", default=P.DEFAULT_SPECS,
                   help="kind:level[,kind:level...] (default: the jpeg "
                        "quality and blur/noise sigma ladders)")
    p.add_argument("--split", default="test",
                   choices=["train", "val", "test"])
    p.add_argument("--noise-seed", type=int, default=0)
    p.set_defaults(fn=_cmd_perturb)

    p = sub.add_parser("extract", help="dump branch features to a tensor "
                                       "container")
    common(p)
    p.add_argument("--out", default="features.fwts")
    p.add_argument("--split", default="all",
                   choices=["all", "train", "val", "test"])
    p.set_defaults(fn=_cmd_extract)

    p = sub.add_parser("inspect", help="describe an FWTS or FEMB file")
    p.add_argument("path")
    p.set_defaults(fn=_cmd_inspect)
    return parser


def run(argv=None) -> int:
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliUsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except InvalidConfig as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except (ManifestError, ImageFormatError, WeightsFormatError,
            EmbeddingFileError, TrainingDiverged, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
