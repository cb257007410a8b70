"""Supervised (SL) and two-stage supervised-contrastive (SCL) training.

SCL stage 1 trains encoder + projection on [originals ; augmented views]
with duplicated labels. Stage 2 freezes both and fits only the classifier
head with cross-entropy on cached encoder features.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .autograd import ContractError, Tape, Tensor, backward
from .losses import cross_entropy_op, focal_op, supcon_op
from .metrics import MetricReport, scores_to_report
from .models import Checkpoint, EncoderConfig, FaceTouchModel, load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step
from .rng import make_rng


@dataclass
class AugmentSpec:
    flip_prob: float = 0.5
    translate: float = 0.1  # max shift, fraction of width / height
    scale: tuple[float, float] = (0.9, 1.1)
    brightness: float = 0.1  # additive, uniform in [-b, b]
    seed: int = 0

    def __post_init__(self):
        self.scale = tuple(float(s) for s in self.scale)
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ContractError(f"augment.flip_prob: must lie in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.translate < 0.5:
            raise ContractError(f"augment.translate: must lie in [0, 0.5), got {self.translate}")
        if len(self.scale) != 2 or not 0.0 < self.scale[0] <= self.scale[1]:
            raise ContractError(f"augment.scale: must be (lo, hi) with 0 < lo <= hi, got {self.scale}")
        if self.brightness < 0:
            raise ContractError(f"augment.brightness: must be >= 0, got {self.brightness}")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(flip_prob=0.0, translate=0.0, scale=(1.0, 1.0), brightness=0.0)


def _interp_matrices(n: int, size: int, scale, shift, flip) -> np.ndarray:
    """(N, size, size) bilinear resampling matrices with edge clamping."""
    u = np.arange(size, dtype=np.float64)
    c = size / 2.0
    src = (u[None, :] + 0.5 - c - shift[:, None]) / scale[:, None] + c - 0.5
    src = np.where(flip[:, None], size - 1 - src, src)
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    M = np.zeros((n, size, size))
    rows = np.broadcast_to(np.arange(size), (n, size))
    batch = np.broadcast_to(np.arange(n)[:, None], (n, size))
    np.add.at(M, (batch, rows, lo), 1.0 - frac)
    np.add.at(M, (batch, rows, hi), frac)
    return M


def augment_batch(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random flip / translate / scale / brightness for an (N, H, W) batch in [0, 1].

    Geometry is separable (no rotation or shear), so each view is Ry @ x @ Rx^T.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ContractError(f"augment_batch: expected (N, H, W), got {x.shape}")
    n, h, w = x.shape
    flip = rng.random(n) < spec.flip_prob
    s = rng.uniform(spec.scale[0], spec.scale[1], n)
    tx = rng.uniform(-spec.translate, spec.translate, n) * w
    ty = rng.uniform(-spec.translate, spec.translate, n) * h
    b = rng.uniform(-spec.brightness, spec.brightness, n)
    Ry = _interp_matrices(n, h, s, ty, np.zeros(n, dtype=bool))
    Rx = _interp_matrices(n, w, s, tx, flip)
    out = np.einsum("nij,njk,nlk->nil", Ry, x.astype(np.float64), Rx, optimize=True)
    out += b[:, None, None]
    return np.clip(out, 0.0, 1.0).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def augment_view(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """One augmented view of a single (H, W) image in [0, 1]."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ContractError(f"augment_view: expected (H, W), got {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ContractError("augment_view: image values must lie in [0, 1]")
    return augment_batch(x[None], spec, rng)[0]


# ---------------------------------------------------------------- config

def desk_encoder(**overrides) -> EncoderConfig:
    """Encoder used for CPU-scale runs: strided first conv, float32, and no
    projection dropout (at 0.2 or 0.5 stage 1 never leaves the uniform-similarity
    plateau on the synthetic crops)."""
    kw = dict(first_stride=2, dtype="float32", proj_dropout=0.0)
    kw.update(overrides)
    return EncoderConfig(**kw)


@dataclass
class TrainConfig:
    regime: str = "scl"  # scl | sl
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.001
    tau: float = 0.05
    loss: str = "ce"  # SL objective: ce | focal
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    supcon_variant: str = "in"  # in: mean inside the log; out: mean of logs
    stage2_epochs: int | None = None  # defaults to epochs
    seed: int = 0
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    max_skip_fraction: float = 0.1
    encoder: EncoderConfig = field(default_factory=lambda: desk_encoder())
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig.from_dict(self.encoder)
        if isinstance(self.augment, dict):
            self.augment = AugmentSpec(**self.augment)
        self.validate()

    def validate(self) -> None:
        if self.regime not in ("scl", "sl"):
            raise ContractError(f"regime: must be 'scl' or 'sl', got {self.regime!r}")
        if self.loss not in ("ce", "focal"):
            raise ContractError(f"loss: must be 'ce' or 'focal', got {self.loss!r}")
        if self.loss == "focal" and (self.focal_gamma < 0 or self.focal_alpha <= 0):
            raise ContractError(f"focal_gamma/focal_alpha: need gamma >= 0 and alpha > 0, got {self.focal_gamma}, {self.focal_alpha}")
        if self.supcon_variant not in ("in", "out"):
            raise ContractError(f"supcon_variant: must be 'in' or 'out', got {self.supcon_variant!r}")
        if self.epochs < 1 or (self.stage2_epochs is not None and self.stage2_epochs < 1):
            raise ContractError("epochs: must be >= 1")
        if self.batch_size < (2 if self.regime == "scl" else 1):
            raise ContractError(f"batch_size: must be >= 2 for SCL, got {self.batch_size}")
        if self.lr <= 0 or self.tau <= 0:
            raise ContractError("lr, tau: must be > 0")
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-12 or not 0 < self.train_fraction < 1:
            raise ContractError(f"train_fraction/test_fraction: must be in (0, 1) and sum to 1, got {self.train_fraction}, {self.test_fraction}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["augment"]["scale"] = list(self.augment.scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ContractError(f"{extra[0]}: unknown config field")
        return cls(**d)


@dataclass
class TrainResult:
    model: FaceTouchModel
    losses: list[tuple[int, int, float]]  # (epoch, step, loss)
    skipped: int = 0
    report: MetricReport | None = None
    scores: np.ndarray | None = None
    stage2_losses: list[tuple[int, int, float]] = field(default_factory=list)

    def epoch_means(self, stage: int = 1) -> list[float]:
        curve = self.losses if stage == 1 else self.stage2_losses
        epochs = sorted({e for e, _, _ in curve})
        return [float(np.mean([v for e, _, v in curve if e == k])) for k in epochs]


def _to_float(images: np.ndarray, dtype) -> np.ndarray:
    x = np.asarray(images)
    return x.astype(dtype) / 255.0 if x.dtype == np.uint8 else x.astype(dtype)


def _batches(n: int, size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _check_split(images, labels) -> tuple[np.ndarray, np.ndarray]:
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ContractError("training split is empty")
    if len(images) != len(labels):
        raise ContractError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


# ---------------------------------------------------------------- regimes

def train_sl(images, labels, cfg: TrainConfig, model: FaceTouchModel | None = None) -> TrainResult:
    """End-to-end encoder + classifier with cross-entropy or focal loss."""
    images, labels = _check_split(images, labels)
    model = model or FaceTouchModel(cfg.encoder)
    dt = np.dtype(cfg.encoder.dtype)
    x_all = _to_float(images, dt)
    opt = AdamState(lr=cfg.lr)
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        for step, idx in enumerate(_batches(len(x_all), cfg.batch_size, make_rng(cfg.seed, "sl", epoch))):
            with Tape() as tape:
                logits = model.logits(model.encode(x_all[idx]))
                if cfg.loss == "ce":
                    loss = cross_entropy_op(logits, labels[idx])
                else:
                    p = ops.take_column(ops.softmax(logits), 1)
                    loss = focal_op(p, labels[idx], cfg.focal_gamma, cfg.focal_alpha)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite SL loss at epoch {epoch} step {step}")
            adam_step(opt, model.params, backward(tape, loss, model.params))
            losses.append((epoch, step, value))
    return TrainResult(model, losses)


def train_scl_stage1(images, labels, cfg: TrainConfig, model: FaceTouchModel | None = None) -> TrainResult:
    """Encoder + projection trained with the supervised contrastive loss."""
    images, labels = _check_split(images, labels)
    model = model or FaceTouchModel(cfg.encoder)
    for prefix in ("enc.", "proj."):
        model.params.set_trainable(prefix, True)
    dt = np.dtype(cfg.encoder.dtype)
    x_all = _to_float(images, dt)
    opt = AdamState(lr=cfg.lr)
    losses, skipped, total = [], 0, 0
    for epoch in range(1, cfg.epochs + 1):
        aug_rng = make_rng(cfg.seed, "augment", cfg.augment.seed, epoch)
        drop_rng = make_rng(cfg.seed, "dropout", epoch)
        for step, idx in enumerate(_batches(len(x_all), cfg.batch_size, make_rng(cfg.seed, "scl", epoch))):
            total += 1
            xb = x_all[idx]
            views = augment_batch(xb, cfg.augment, aug_rng)
            y2 = np.concatenate([labels[idx], labels[idx]])
            with Tape() as tape:
                z = model.project(model.encode(np.concatenate([xb, views])), "train", drop_rng)
                try:
                    loss = supcon_op(z, y2, cfg.tau, cfg.supcon_variant)
                except ContractError as exc:
                    if "no positive pairs" not in str(exc):
                        raise
                    skipped += 1
                    warnings.warn(f"epoch {epoch} step {step}: batch has no positive pair, skipped")
                    continue
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite contrastive loss at epoch {epoch} step {step}")
            adam_step(opt, model.params, backward(tape, loss, model.params))
            losses.append((epoch, step, value))
    if skipped > cfg.max_skip_fraction * total:
        raise ContractError(f"{skipped} of {total} contrastive batches had no positive pair")
    return TrainResult(model, losses, skipped=skipped)


def train_scl_stage2(stage1, images, labels, cfg: TrainConfig) -> TrainResult:
    """Freeze encoder and projection; fit only the classifier head (cross-entropy).

    ``stage1`` is a :class:`Checkpoint`, a checkpoint path, or a model.
    Encoder features are computed once in eval mode and reused every epoch.
    """
    if stage1 is None:
        raise ContractError("stage 2 needs a stage-1 checkpoint")
    if isinstance(stage1, (str, Path)):
        if not Path(stage1).exists():
            raise ContractError(f"stage-1 checkpoint {stage1} not found")
        stage1 = load_checkpoint(stage1)
    model = stage1.model() if isinstance(stage1, Checkpoint) else stage1
    images, labels = _check_split(images, labels)
    model.params.set_trainable("enc.", False)
    model.params.set_trainable("proj.", False)
    model.params.set_trainable("head.", True)
    feats = model.embed(images)
    opt = AdamState(lr=cfg.lr)
    losses = []
    epochs = cfg.stage2_epochs or cfg.epochs
    for epoch in range(1, epochs + 1):
        for step, idx in enumerate(_batches(len(feats), cfg.batch_size, make_rng(cfg.seed, "stage2", epoch))):
            with Tape() as tape:
                loss = cross_entropy_op(model.logits(Tensor(feats[idx])), labels[idx])
            adam_step(opt, model.params, backward(tape, loss, model.params))
            losses.append((epoch, step, loss.item()))
    return TrainResult(model, losses)


def train(images, labels, cfg: TrainConfig) -> TrainResult:
    """Run the configured regime; SCL returns stage-1 losses plus stage-2 losses."""
    if cfg.regime == "sl":
        return train_sl(images, labels, cfg)
    s1 = train_scl_stage1(images, labels, cfg)
    s2 = train_scl_stage2(s1.model, images, labels, cfg)
    return TrainResult(s2.model, s1.losses, skipped=s1.skipped, stage2_losses=s2.losses)


def evaluate(model: FaceTouchModel, images, labels, threshold: float = 0.5) -> tuple[MetricReport, np.ndarray]:
    """Metric report and per-sample touch scores on a held-out split."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ContractError("evaluate: empty split")
    scores = model.predict_proba(images)
    return scores_to_report(np.asarray(labels, dtype=np.int64), scores, threshold), scores


# ---------------------------------------------------------------- outputs

def write_loss_csv(path, losses, stage2=()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "step", "loss"])
        for stage, curve in ((1, losses), (2, stage2)):
            for e, s, v in curve:
                w.writerow([stage, e, s, repr(float(v))])


def write_run(out, result: TrainResult, cfg: TrainConfig, dataset_hash: str | None = None,
              extra: dict | None = None) -> dict:
    """Checkpoint, loss curve and run manifest (no timestamps, so reruns match byte for byte)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "dataset_hash": dataset_hash,
                "skipped_batches": result.skipped}
    if result.report is not None:
        manifest["metrics"] = {k: v for k, v in result.report.to_dict().items()
                               if k in ("accuracy", "precision", "recall", "f1", "auc", "ap", "threshold")}
        result.report.write_json(out / "metrics.json")
        result.report.write_roc_csv(out / "roc.csv")
    manifest.update(extra or {})
    save_checkpoint(out / "model.ckpt", result.model, {"dataset_hash": dataset_hash, "regime": cfg.regime,
                                                       "seed": cfg.seed})
    write_loss_csv(out / "loss.csv", result.losses, result.stage2_losses)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
