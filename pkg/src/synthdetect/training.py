"""Training and evaluation: class-balanced focal loss, warmup/cosine
schedule, Adam with decoupled weight decay, ACC/AP metrics, and validation
threshold calibration."""

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .image_io import DatasetManifest, load_manifest, load_ppm
from .model import Detector, images_to_batch
from .rng import substream
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FocalLossConfig:
    """gamma focuses on hard examples; alpha balances the classes and
    defaults to N_fake / (N_real + N_fake) over the training split."""

    gamma: float = 2.0
    alpha: float = None
    alt_negative_form: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 32
    epochs: int = 20
    warmup_iters: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    seed: int = 1
    optimizer: str = "adam"   # "adam" | "sgd" (momentum 0.9)
    momentum: float = 0.9

    def validate(self, total_iters: int):
        if min(self.lr, self.batch, self.epochs) <= 0:
            raise ValueError("lr, batch and epochs must be positive")
        if self.warmup_iters < 0 or self.warmup_iters > total_iters:
            raise ValueError(f"warmup ({self.warmup_iters}) must not "
                             f"exceed total iterations ({total_iters})")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EvalReport:
    acc: float
    ap: float
    threshold: float
    n_real: int
    n_fake: int


def balanced_alpha(labels) -> float:
    """Class-balance weight N_fake / (N_real + N_fake); label 1 is fake."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty label set")
    return float((labels == 1).sum() / labels.size)


def focal_loss(logits, labels, cfg: FocalLossConfig) -> Tensor:
    """Class-balanced focal loss over a batch of logits.

    L = -(1/N) sum[ alpha*y*(1-p)^g*log p + (1-alpha)*(1-y)*p^g*log(1-p) ]
    with p = sigmoid(logit). Log terms use log-sigmoid so no log(0) occurs.
    ``alt_negative_form`` swaps the negative-class modulating factor to
    (1-p)^g for comparison runs.
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("empty batch")
    if logits.shape != labels.shape:
        raise ValueError("logits and labels must have matching shapes")
    alpha = cfg.alpha if cfg.alpha is not None else balanced_alpha(labels)
    log_p = T.logsigmoid(logits)
    log_1mp = T.logsigmoid(T.scale(logits, -1.0))
    p = T.sigmoid(logits)
    one_mp = T.sigmoid(T.scale(logits, -1.0))
    pos = T.mul(Tensor(alpha * labels), T.mul(T.power(one_mp, cfg.gamma),
                                              log_p))
    neg_mod = T.power(one_mp if cfg.alt_negative_form else p, cfg.gamma)
    neg = T.mul(Tensor((1.0 - alpha) * (1.0 - labels)),
                T.mul(neg_mod, log_1mp))
    return T.scale(T.tmean(T.add(pos, neg)), -1.0)


def lr_at(iteration: int, total_iters: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then cosine decay to zero."""
    if not 0 <= iteration < total_iters:
        raise ValueError("iteration out of range")
    if iteration < cfg.warmup_iters:
        return cfg.lr * iteration / cfg.warmup_iters
    span = total_iters - cfg.warmup_iters
    if span <= 0:
        return cfg.lr
    t = (iteration - cfg.warmup_iters) / span
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * t))


class Optimizer:
    """Adam with decoupled weight decay (or SGD-momentum), stepping the
    named parameter set of a detector."""

    def __init__(self, params: dict, cfg: TrainConfig, eps: float = 1e-8):
        self.params = params
        self.cfg = cfg
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = ({n: np.zeros_like(p.data) for n, p in params.items()}
                  if cfg.optimizer == "adam" else None)

    def step(self, lr: float):
        self.t += 1
        c = self.cfg
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if c.optimizer == "adam":
                self.m[n] = c.beta1 * self.m[n] + (1 - c.beta1) * g
                self.v[n] = c.beta2 * self.v[n] + (1 - c.beta2) * g * g
                mhat = self.m[n] / (1 - c.beta1 ** self.t)
                vhat = self.v[n] / (1 - c.beta2 ** self.t)
                upd = mhat / (np.sqrt(vhat) + self.eps)
            else:
                self.m[n] = c.momentum * self.m[n] + g
                upd = self.m[n]
            p.data = p.data - lr * (upd + c.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# metrics


def average_precision(scores, labels) -> float:
    """AP over descending unique score thresholds, ties grouped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    npos = int((labels == 1).sum())
    if npos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == 1)
    # last index of each tie group = a distinct threshold
    boundary = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    ap = 0.0
    prev_recall = 0.0
    for k in boundary:
        precision = tp[k] / (k + 1)
        recall = tp[k] / npos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return float(ap)


def balanced_accuracy(scores, labels, threshold: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred = scores >= threshold
    tpr = ((pred == 1) & (labels == 1)).sum() / max((labels == 1).sum(), 1)
    tnr = ((pred == 0) & (labels == 0)).sum() / max((labels == 0).sum(), 1)
    return float((tpr + tnr) / 2)


def calibrate_threshold(scores, labels) -> float:
    """Decision threshold maximizing balanced accuracy on validation data.

    Candidates are the midpoints between adjacent distinct scores plus one
    point outside each extreme; ties prefer midpoints (then the lower
    extreme), so perfectly separated classes get the midpoint of the gap.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if (labels == 1).sum() == 0 or (labels == 0).sum() == 0:
        raise ValueError("threshold calibration needs both classes")
    uniq = np.unique(scores)
    cands = [(a + b) / 2 for a, b in zip(uniq[:-1], uniq[1:])]
    cands += [uniq[0] - 1.0, uniq[-1] + 1.0]
    best_t, best_ba = None, -1.0
    for t in cands:
        ba = balanced_accuracy(scores, labels, t)
        if ba > best_ba:
            best_t, best_ba = t, ba
    return float(best_t)


def accuracy(scores, labels, threshold: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return float(((scores >= threshold) == (labels == 1)).mean())


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class SplitData:
    """Cached model inputs for one manifest split."""

    feats: np.ndarray          # (N, C_local, H, W)
    phis: np.ndarray           # (N, D) or None
    labels: np.ndarray         # (N,)
    paths: list = field(default_factory=list)


def _resolve(root, path):
    return path if root is None or os.path.isabs(path) \
        else os.path.join(root, path)


def load_split(det: Detector, manifest: DatasetManifest, split: str,
               root=None, chunk: int = 64) -> SplitData:
    """Load a split's images and precompute every branch input.

    Branch features and embeddings depend only on the pixels, so they are
    extracted once (in chunks) and reused across epochs and ablations that
    share the branch configuration.
    """
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    images = [load_ppm(_resolve(root, e.path)) for e in entries]
    return prepare_split(det, images, [e.label for e in entries],
                         paths=[e.path for e in entries], chunk=chunk)


def prepare_split(det: Detector, images, labels, paths=None,
                  chunk: int = 64) -> SplitData:
    size = det.config.image_size
    from .image_io import center_crop_resize
    images = [center_crop_resize(im, size) for im in images]
    x = images_to_batch(images, size)
    feats = np.concatenate([det.extract_local_features(x[i:i + chunk])
                            for i in range(0, len(images), chunk)], axis=0)
    phis = None
    if det.config.use_semantic:
        if paths is None:
            paths = [None] * len(images)
        phis = np.stack([det.phi_for(im, p)
                         for im, p in zip(images, paths)], axis=0)
    return SplitData(feats=feats, phis=phis,
                     labels=np.asarray(labels, dtype=np.int64),
                     paths=list(paths) if paths else [])


@dataclass
class BranchCache:
    """Per-branch feature arrays shared across ablation variants.

    Branch outputs depend only on the image, the NPR grid, the backbone
    seed and the embedding source, so models differing only in their
    enabled-branch switches can slice the same cache."""

    npr: np.ndarray
    grad: np.ndarray
    phi: np.ndarray
    labels: np.ndarray
    paths: list


def extract_branches(det: Detector, images, labels, paths=None,
                     chunk: int = 64) -> BranchCache:
    """Extract every branch once (requires a detector with all branches
    enabled)."""
    cfg = det.config
    if not (cfg.use_npr and cfg.use_grad and cfg.use_semantic):
        raise ValueError("branch cache extraction needs all branches on")
    data = prepare_split(det, images, labels, paths=paths, chunk=chunk)
    n_npr = 3 * (cfg.npr_grid ** 2 - 1)
    return BranchCache(npr=data.feats[:, :n_npr],
                       grad=data.feats[:, n_npr:],
                       phi=data.phis,
                       labels=data.labels, paths=data.paths)


def split_from_cache(det: Detector, cache: BranchCache) -> SplitData:
    """Assemble the inputs for a (possibly ablated) detector from a cache
    built with all branches on."""
    cfg = det.config
    parts = []
    if cfg.use_npr:
        parts.append(cache.npr)
    if cfg.use_grad:
        parts.append(cache.grad)
    feats = np.ascontiguousarray(np.concatenate(parts, axis=1))
    phis = cache.phi if cfg.use_semantic else None
    return SplitData(feats=feats, phis=phis, labels=cache.labels,
                     paths=cache.paths)


def scores_for(det: Detector, data: SplitData, batch: int = 32) -> np.ndarray:
    """Eval-mode fake-probability scores, batched."""
    out = []
    with T.no_grad():
        for i in range(0, len(data.labels), batch):
            phis = None if data.phis is None else data.phis[i:i + batch]
            logits = det.forward_from_features(data.feats[i:i + batch],
                                               phis, training=False)
            out.append(1.0 / (1.0 + np.exp(-logits.data)))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# the training loop


def train_on_features(det: Detector, train_data: SplitData,
                      val_data: SplitData, tcfg: TrainConfig,
                      fcfg: FocalLossConfig, log=None):
    """Adam/focal training over precomputed branch features.

    Deterministic given the seed: data order comes from a seeded shuffle
    per epoch and dropout masks from the global step index. Returns the
    per-epoch history; weights are updated in place on the detector.
    """
    labels = train_data.labels
    if (labels == 1).sum() == 0 or (labels == 0).sum() == 0:
        raise ValueError("training split must contain both classes")
    if (val_data.labels == 1).sum() == 0 or (val_data.labels == 0).sum() == 0:
        raise ValueError("validation split must contain both classes")
    n = len(labels)
    steps_per_epoch = (n + tcfg.batch - 1) // tcfg.batch
    total_iters = steps_per_epoch * tcfg.epochs
    tcfg.validate(total_iters)
    if fcfg.alpha is None:
        fcfg = FocalLossConfig(gamma=fcfg.gamma,
                               alpha=balanced_alpha(labels),
                               alt_negative_form=fcfg.alt_negative_form)
    opt = Optimizer(det.trainable(), tcfg)
    history = []
    step = 0
    for epoch in range(tcfg.epochs):
        order = substream(tcfg.seed, f"shuffle/epoch{epoch}").permutation(n)
        losses = []
        hits = 0
        for b in range(steps_per_epoch):
            idx = order[b * tcfg.batch:(b + 1) * tcfg.batch]
            phis = None if train_data.phis is None else train_data.phis[idx]
            logits = det.forward_from_features(train_data.feats[idx], phis,
                                               training=True,
                                               dropout_seed=step)
            loss = focal_loss(logits, labels[idx], fcfg)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch} step {b} "
                    f"(lr={lr_at(step, total_iters, tcfg):.3g})")
            hits += int(((logits.data >= 0) == (labels[idx] == 1)).sum())
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr_at(step, total_iters, tcfg))
            losses.append(lval)
            step += 1
        # running accuracy over the epoch's own train-mode logits
        acc = hits / n
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "acc": acc})
        if log:
            log(f"epoch {epoch}: loss={history[-1]['loss']:.5f} "
                f"acc={acc:.4f}")
    return history


def train(det: Detector, manifest, tcfg: TrainConfig = None,
          fcfg: FocalLossConfig = None, root=None, log=None):
    """File-level entry point: loads the train/val splits from a manifest
    (paths resolved against ``root``) and runs train_on_features."""
    if isinstance(manifest, (str, os.PathLike)):
        if root is None:
            root = os.path.dirname(os.path.abspath(manifest))
        manifest = load_manifest(manifest)
    tcfg = tcfg or TrainConfig()
    fcfg = fcfg or FocalLossConfig()
    train_data = load_split(det, manifest, "train", root=root)
    val_data = load_split(det, manifest, "val", root=root)
    history = train_on_features(det, train_data, val_data, tcfg, fcfg,
                                log=log)
    return history, train_data, val_data


def evaluate(det: Detector, data: SplitData, threshold: float = None,
             batch: int = 32) -> EvalReport:
    """ACC/AP of a split; calibrates the threshold on this data when none
    is supplied."""
    scores = scores_for(det, data, batch=batch)
    if threshold is None:
        threshold = calibrate_threshold(scores, data.labels)
    return EvalReport(acc=accuracy(scores, data.labels, threshold),
                      ap=average_precision(scores, data.labels),
                      threshold=float(threshold),
                      n_real=int((data.labels == 0).sum()),
                      n_fake=int((data.labels == 1).sum()))


def history_to_csv(history) -> str:
    lines = ["epoch,loss,acc"]
    lines += [f"{h['epoch']},{h['loss']:.10g},{h['acc']:.10g}"
              for h in history]
    return "\n".join(lines) + "\n"


def report_to_csv(report: EvalReport) -> str:
    lines = ["metric,value",
             f"acc,{report.acc:.10g}",
             f"ap,{report.ap:.10g}",
             f"threshold,{report.threshold:.10g}",
             f"n_real,{report.n_real}",
             f"n_fake,{report.n_fake}"]
    return "\n".join(lines) + "\n"
