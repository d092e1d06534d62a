"""Pretraining, risk-weighted fine-tuning and Dice evaluation.

Fine-tuning is source-free: it consumes a source :class:`ModelParams` and the
target dataset, never source data.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import segnet
from .autodiff import Tensor
from .dataio import SliceDataset
from .errors import DivergenceError, ShapeError, ValidationError
from .riskweight import (
    ORIENTATIONS,
    RiskMap,
    WeightingScheme,
    class_weights,
    normalize_map,
    risk_map,
    scheme_loss,
)
from .segnet import ModelParams, UNetConfig
from .transferability import MODES, TransferabilityMap, transferability_map

log = logging.getLogger(__name__)

ENCODE_CHUNK = 16


@dataclass
class TrainConfig:
    lr: float = 1e-4
    iterations: int = 5000
    batch_size: int = 8
    seed: int = 0
    freeze_encoder: bool = True
    scheme: str = "vanilla"
    mode: str = "global"
    orientation: str = "hardness"
    base: float = 10.0
    recompute_interval: int = 0
    depth: int = 3
    base_channels: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 0

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValidationError("iterations and batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.orientation not in ORIENTATIONS:
            raise ValidationError(f"orientation must be one of {ORIENTATIONS}")
        if self.recompute_interval < 0:
            raise ValidationError("recompute_interval must be >= 0 (0 = static map)")
        WeightingScheme(self.scheme)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config keys {sorted(unknown)}")
        mode = d.get("mode")
        if mode == "perloc":
            d = {**d, "mode": "per-location"}
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **kw})


@dataclass
class TrainRun:
    params: ModelParams
    losses: list[float] = field(default_factory=list)
    risk: RiskMap | None = None
    transferability: TransferabilityMap | None = None


@dataclass
class DiceReport:
    per_class: list[float]
    macro: float
    samples: int

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ loops


def _batches(n: int, batch: int, seed: int):
    """Endless deterministic mini-batch index stream; reshuffles each epoch."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos : pos + batch]
        pos += batch


def _check_spatial(params: ModelParams, ds: SliceDataset) -> None:
    if tuple(params.config.input_size) != ds.spatial:
        raise ShapeError(f"model expects {params.config.input_size} inputs, dataset is {ds.spatial}")


def _encode_all(params: ModelParams, images: np.ndarray) -> list[np.ndarray]:
    chunks = [segnet.encode(params, Tensor(images[s : s + ENCODE_CHUNK])) for s in range(0, len(images), ENCODE_CHUNK)]
    return [np.concatenate([c[i].data for c in chunks]) for i in range(len(chunks[0]))]


def _train(params: ModelParams, ds: SliceDataset, cfg: TrainConfig, scheme: WeightingScheme, refresh=None) -> list[float]:
    """Shared optimisation loop; mutates ``params`` in place."""
    if cfg.batch_size > len(ds):
        raise ValidationError(f"batch_size {cfg.batch_size} exceeds dataset size {len(ds)}")
    state = ad.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    names = [k for k in params.tensors if params.trainable[k]]
    live = {k: params.tensors[k] for k in names}
    # a frozen encoder makes its activations constants: compute them once
    cached = _encode_all(params, ds.images) if not any(params.trainable[k] for k in params.encoder_names()) else None
    stream = _batches(len(ds), cfg.batch_size, cfg.seed)
    losses = []
    for it in range(cfg.iterations):
        if refresh is not None and cfg.recompute_interval and it and it % cfg.recompute_interval == 0:
            scheme = refresh(params)
        idx = next(stream)
        labels = ds.labels[idx]
        for t in live.values():
            t.grad = np.zeros_like(t.data)
        with ad.Tape() as tape:
            if cached is None:
                logits = segnet.forward(params, Tensor(ds.images[idx]))
            else:
                logits = segnet.decode(params, [Tensor(f[idx]) for f in cached])
            loss = scheme_loss(scheme, ad.cross_entropy_map(logits, labels), labels)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at iteration {it}", it)
        losses.append(value)
        ad.backward(loss, tape)
        try:
            ad.adam_step(live, {k: t.grad for k, t in live.items()}, state, params.trainable)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} at iteration {it}", it) from exc
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d loss %.6f", it, value)
    params.meta["adam"] = {**state.hyperparameters(), "steps": state.t}
    return losses


def pretrain(ds: SliceDataset, cfg: TrainConfig) -> TrainRun:
    """Train a fresh U-Net on a source task, vanilla loss, nothing frozen."""
    cfg.validate()
    if cfg.freeze_encoder:
        raise ValidationError("pretraining trains the full model; set freeze_encoder to false")
    h, w = ds.spatial
    config = UNetConfig(ds.num_classes, cfg.depth, cfg.base_channels, 1, (h, w))
    params = segnet.build(config, cfg.seed)
    params.meta = {"role": "source", "dataset": ds.manifest.dataset_id, "task": ds.manifest.task,
                   "modality": ds.manifest.modality, "train": cfg.to_dict()}
    losses = _train(params, ds, cfg, WeightingScheme("vanilla"))
    return TrainRun(params, losses)


def compute_risk(
    params: ModelParams,
    target: SliceDataset,
    mode: str = "global",
    orientation: str = "hardness",
    base: float = 10.0,
) -> tuple[TransferabilityMap, RiskMap]:
    """Per-pixel LEEP of ``params`` on ``target`` and the derived risk map."""
    _check_spatial(params, target)
    dummy = segnet.predict_proba(params, target.images)
    tmap = transferability_map(dummy, target.labels, mode, target.num_classes)
    prov = {
        "checkpoint": params.fingerprint()[:16],
        "target": target.manifest.dataset_id,
        "mode": mode,
    }
    return tmap, risk_map(normalize_map(tmap, orientation), base, orientation, prov)


def _scheme_for(cfg: TrainConfig, params: ModelParams, target: SliceDataset) -> tuple[WeightingScheme, TransferabilityMap | None, RiskMap | None]:
    if cfg.scheme == "vanilla":
        return WeightingScheme("vanilla"), None, None
    if cfg.scheme == "class":
        return WeightingScheme("class", class_weights=class_weights(target.labels, target.num_classes)), None, None
    tmap, risk = compute_risk(params, target, cfg.mode, cfg.orientation, cfg.base)
    if cfg.scheme == "trsmap":
        return WeightingScheme("trsmap", scaled_map=normalize_map(tmap, "hardness")), tmap, risk
    return WeightingScheme("riskmap", risk=risk), tmap, risk


def finetune(source: ModelParams, target: SliceDataset, cfg: TrainConfig) -> TrainRun:
    """Fine-tune a copy of ``source`` on ``target`` under ``cfg.scheme``.

    The weighting map comes from the untouched source model and stays fixed
    unless ``cfg.recompute_interval`` asks for periodic refreshes.
    """
    cfg.validate()
    _check_spatial(source, target)
    scheme, tmap, risk = _scheme_for(cfg, source, target)
    params = source.copy()
    if params.config.num_classes != target.num_classes:
        params = segnet.rebuild_head(params, target.num_classes, cfg.seed)
    if cfg.freeze_encoder:
        params = segnet.freeze_encoder(params)
    params.meta = {
        "role": "finetuned",
        "source": source.fingerprint()[:16],
        "target": target.manifest.dataset_id,
        "train": cfg.to_dict(),
    }

    def refresh(current: ModelParams) -> WeightingScheme:
        return _scheme_for(cfg, current, target)[0]

    losses = _train(params, target, cfg, scheme, refresh)
    return TrainRun(params, losses, risk, tmap)


# -------------------------------------------------------------- evaluation


def dice(pred: np.ndarray, truth: np.ndarray, c: int) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    a, b = pred == c, truth == c
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


def predict_labels(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ``np.argmax`` breaks ties toward the lowest class."""
    return segnet.predict_proba(params, images).argmax(axis=1)


def dice_report(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> DiceReport:
    """Micro-aggregated per-class Dice, macro-averaged over foreground classes."""
    per = [dice(pred, truth, c) for c in range(num_classes)]
    fg = per[1:] or per
    return DiceReport(per, float(np.mean(fg)), int(len(truth)))


def evaluate(params: ModelParams, ds: SliceDataset) -> DiceReport:
    _check_spatial(params, ds)
    if params.config.num_classes != ds.num_classes:
        raise ValidationError(f"model predicts {params.config.num_classes} classes, dataset has {ds.num_classes}")
    return dice_report(predict_labels(params, ds.images), ds.labels, ds.num_classes)
