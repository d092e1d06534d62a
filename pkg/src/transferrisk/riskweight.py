"""Transfer risk maps and the pixel-weighted fine-tuning losses.

Four weighting schemes are supported:

``vanilla``
    unweighted mean of the per-pixel loss.
``class``
    inverse-frequency class weights, mean over all pixels.
``trsmap``
    the min-max scaled hardness map used directly as weights, mean over all pixels.
``riskmap``
    ``10 ** t_s`` weights, summed and divided by the foreground pixel count.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, ValidationError
from .transferability import TransferabilityMap

ORIENTATIONS = ("hardness", "paper-eq")
SCHEMES = ("vanilla", "class", "trsmap", "riskmap")


@dataclass
class RiskMap:
    weights: np.ndarray
    orientation: str = "hardness"
    base: float = 10.0
    provenance: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def stats(self) -> dict[str, float]:
        return {"mean": float(self.weights.mean()), "max": float(self.weights.max()), "min": float(self.weights.min())}


@dataclass
class ClassWeights:
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class WeightingScheme:
    kind: str = "vanilla"
    class_weights: ClassWeights | None = None
    scaled_map: np.ndarray | None = None
    risk: RiskMap | None = None

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValidationError(f"unknown weighting scheme {self.kind!r}; expected one of {SCHEMES}")


def _values(t) -> np.ndarray:
    return np.asarray(t.values if isinstance(t, TransferabilityMap) else t, dtype=np.float64)


def normalize_map(t, orientation: str = "hardness") -> np.ndarray:
    """Min-max scale to [0, 1]. ``hardness`` sends the lowest transferability
    to 1; ``paper-eq`` sends the highest to 1. A constant map scales to 0."""
    if orientation not in ORIENTATIONS:
        raise ValidationError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")
    v = _values(t)
    if not np.all(np.isfinite(v)):
        raise ValidationError("transferability map contains non-finite entries")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    if orientation == "hardness":
        return (hi - v) / (hi - lo)
    return (v - lo) / (hi - lo)


def risk_map(scaled, base: float = 10.0, orientation: str = "hardness", provenance: dict | None = None) -> RiskMap:
    s = np.asarray(scaled, dtype=np.float64)
    if not np.all((s >= 0.0) & (s <= 1.0)):
        raise ValidationError("scaled map entries must lie in [0, 1]")
    if base <= 1.0:
        raise ValidationError(f"exponential base must exceed 1, got {base}")
    return RiskMap(np.power(float(base), s), orientation, float(base), dict(provenance or {}))


def foreground_count(labels: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(labels)))


def weighted_loss(loss_map: Tensor, w, labels) -> Tensor:
    """Risk-weighted loss summed over every pixel, divided by the number of
    foreground (non-zero label) pixels; the total pixel count stands in when
    the batch has no foreground at all."""
    weights = w.weights if isinstance(w, RiskMap) else np.asarray(w, dtype=np.float64)
    labels = np.asarray(labels)
    if loss_map.data.ndim != 3 or labels.shape != loss_map.shape:
        raise ShapeError(f"loss map {loss_map.shape} and labels {labels.shape} must both be [N,H,W]")
    if weights.shape != loss_map.shape[1:]:
        raise ShapeError(f"weights {weights.shape} do not match spatial extent {loss_map.shape[1:]}")
    denom = foreground_count(labels) or labels.size
    return ad.div_const(ad.tsum(ad.scale(loss_map, weights)), denom)


def class_weights(labels, num_classes: int) -> ClassWeights:
    """Inverse-frequency weights ``M / (C * m_c)``; absent classes get 1."""
    labels = np.asarray(labels)
    counts = np.bincount(labels.reshape(-1), minlength=num_classes)[:num_classes].astype(np.float64)
    total = float(labels.size)
    w = np.ones(num_classes)
    present = counts > 0
    w[present] = total / (num_classes * counts[present])
    return ClassWeights(w)


def scheme_loss(scheme: WeightingScheme, loss_map: Tensor, labels, scaled_map=None) -> Tensor:
    labels = np.asarray(labels)
    if scheme.kind == "vanilla":
        return ad.mean(loss_map)
    if scheme.kind == "class":
        if scheme.class_weights is None:
            raise ValidationError("scheme 'class' needs class weights")
        return ad.mean(ad.scale(loss_map, scheme.class_weights.weights[labels]))
    if scheme.kind == "trsmap":
        ts = scheme.scaled_map if scaled_map is None else scaled_map
        if ts is None:
            raise ValidationError("scheme 'trsmap' needs a scaled transferability map")
        return ad.mean(ad.scale(loss_map, np.asarray(ts, dtype=np.float64)))
    if scheme.risk is None:
        raise ValidationError("scheme 'riskmap' needs a risk map")
    return weighted_loss(loss_map, scheme.risk, labels)


# ------------------------------------------------------------------ exports


def to_pgm(weights: np.ndarray, base: float = 10.0) -> bytes:
    """8-bit binary PGM; weight 1 maps to 0 (dark), ``base`` to 255 (bright)."""
    w = np.asarray(weights, dtype=np.float64)
    grey = np.rint(np.clip((w - 1.0) / (base - 1.0), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, wd = grey.shape
    return f"P5\n{wd} {h}\n255\n".encode("ascii") + grey.tobytes()


def write_pgm(path, weights: np.ndarray, base: float = 10.0) -> None:
    Path(path).write_bytes(to_pgm(weights, base))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValidationError(f"{path} is not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)
