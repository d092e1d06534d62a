"""Miniature 2-D U-Net with encoder freezing and RMTC checkpoints.

Architecture for depth ``d`` and base width ``b`` (level ``l`` has
``b * 2**l`` channels, the bottleneck ``b * 2**d``)::

    enc.l   : conv3x3+relu, conv3x3+relu, then max_pool2      (l = 0..d-1)
    bott    : conv3x3+relu, conv3x3+relu
    dec.l   : conv3x3+relu ("up", at the coarse level), upsample_nn2,
              concat skip l, conv3x3+relu, conv3x3+relu       (l = d-1..0)
    head    : conv1x1 to num_classes

``enc.*`` and ``bott.*`` are the encoder; ``dec.*`` and ``head.*`` the decoder.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigMismatchError,
    ShapeError,
    TruncatedFileError,
    ValidationError,
    VersionError,
)

CHECKPOINT_MAGIC = b"RMTC"
CHECKPOINT_VERSION = 1
ENCODER_PREFIXES = ("enc.", "bott.")


@dataclass(frozen=True)
class UNetConfig:
    num_classes: int
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 1:
            raise ValidationError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValidationError("base_channels and in_channels must be >= 1")
        div = 2**self.depth
        h, w = self.input_size
        if h // div < 1 or w // div < 1:
            raise ValidationError(f"depth {self.depth} shrinks input {h}x{w} below a 1x1 bottleneck")
        if h % div or w % div:
            raise ValidationError(f"input size {h}x{w} must be divisible by 2**depth = {div}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**{**d, "input_size": tuple(d["input_size"])})


def parameter_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; a pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cout, cin, k=3):
        shapes[f"{name}.kernel"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    d = config.depth
    cin = config.in_channels
    for lvl in range(d):
        c = config.channels(lvl)
        conv(f"enc.{lvl}.conv1", c, cin)
        conv(f"enc.{lvl}.conv2", c, c)
        cin = c
    conv("bott.conv1", config.channels(d), cin)
    conv("bott.conv2", config.channels(d), config.channels(d))
    for lvl in reversed(range(d)):
        c = config.channels(lvl)
        conv(f"dec.{lvl}.up", c, config.channels(lvl + 1))
        conv(f"dec.{lvl}.conv1", c, 2 * c)
        conv(f"dec.{lvl}.conv2", c, c)
    conv("head", config.num_classes, config.channels(0), k=1)
    return shapes


def is_encoder(name: str) -> bool:
    return name.startswith(ENCODER_PREFIXES)


@dataclass
class ModelParams:
    config: UNetConfig
    tensors: dict[str, Tensor]
    trainable: dict[str, bool]
    meta: dict = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def encoder_names(self) -> list[str]:
        return [k for k in self.tensors if is_encoder(k)]

    def decoder_names(self) -> list[str]:
        return [k for k in self.tensors if not is_encoder(k)]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
            dict(self.trainable),
            json.loads(json.dumps(self.meta)),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def fingerprint(self) -> str:
        """SHA-256 of the serialized checkpoint bytes."""
        return hashlib.sha256(to_bytes(self)).hexdigest()


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".bias"):
        return np.zeros(shape)
    return _he_uniform(rng, shape)


def build(config: UNetConfig, seed: int) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {
        name: Tensor(init_param(name, shape, rng), requires_grad=True)
        for name, shape in parameter_shapes(config).items()
    }
    return ModelParams(config, tensors, {k: True for k in tensors})


def rebuild_head(params: ModelParams, num_classes: int, seed: int) -> ModelParams:
    """Copy of ``params`` with a freshly initialized ``num_classes``-way head."""
    cfg = UNetConfig(**{**params.config.to_dict(), "num_classes": num_classes})
    cfg.validate()
    out = params.copy()
    out.config = cfg
    rng = np.random.default_rng(seed)
    shapes = parameter_shapes(cfg)
    for name in ("head.kernel", "head.bias"):
        out.tensors[name] = Tensor(init_param(name, shapes[name], rng), requires_grad=True)
    return out


def freeze_encoder(params: ModelParams) -> ModelParams:
    flags = {k: not is_encoder(k) for k in params.tensors}
    return ModelParams(params.config, params.tensors, flags, params.meta)


# ------------------------------------------------------------------ forward


def _conv_relu(params: ModelParams, name: str, x: Tensor) -> Tensor:
    p = params.tensors
    return ad.relu(ad.conv2d(x, p[f"{name}.kernel"], p[f"{name}.bias"], 1, 1))


def _check_batch(params: ModelParams, batch: Tensor) -> None:
    cfg = params.config
    if batch.data.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ShapeError(f"batch must be [N,{cfg.in_channels},H,W], got {batch.shape}")
    div = 2**cfg.depth
    h, w = batch.shape[2:]
    if h % div or w % div:
        raise ShapeError(f"spatial extent {h}x{w} must be divisible by {div} (2**depth)")


def encode(params: ModelParams, batch: Tensor) -> list[Tensor]:
    """Run the encoder; returns the skip tensors of every level followed by
    the bottleneck output."""
    _check_batch(params, batch)
    feats = []
    x = batch
    for lvl in range(params.config.depth):
        x = _conv_relu(params, f"enc.{lvl}.conv1", x)
        x = _conv_relu(params, f"enc.{lvl}.conv2", x)
        feats.append(x)
        x = ad.max_pool2(x)
    x = _conv_relu(params, "bott.conv1", x)
    x = _conv_relu(params, "bott.conv2", x)
    feats.append(x)
    return feats


def decode(params: ModelParams, feats: list[Tensor]) -> Tensor:
    x = feats[-1]
    for lvl in reversed(range(params.config.depth)):
        x = ad.upsample_nn2(_conv_relu(params, f"dec.{lvl}.up", x))
        x = ad.concat_channels(feats[lvl], x)
        x = _conv_relu(params, f"dec.{lvl}.conv1", x)
        x = _conv_relu(params, f"dec.{lvl}.conv2", x)
    p = params.tensors
    return ad.conv2d(x, p["head.kernel"], p["head.bias"], 1, 0)


def forward(params: ModelParams, batch: Tensor) -> Tensor:
    return decode(params, encode(params, batch))


def predict_proba(params: ModelParams, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Softmax probabilities [N,C,H,W] without recording a tape."""
    outs = []
    for s in range(0, len(images), chunk):
        logits = forward(params, Tensor(images[s : s + chunk]))
        outs.append(ad.softmax_array(logits.data))
    return np.concatenate(outs, axis=0)


# -------------------------------------------------------------- checkpoints


def to_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = json.dumps({"config": params.config.to_dict(), "meta": params.meta}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(struct.pack("<B", int(params.trainable[name])))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes, expected: UNetConfig | None = None) -> ModelParams:
    r = _Reader(data)
    if len(data) < 4 and CHECKPOINT_MAGIC.startswith(data):
        raise TruncatedFileError(f"checkpoint ends inside the magic bytes ({len(data)} bytes)")
    if data[:4] != CHECKPOINT_MAGIC:
        raise VersionError(f"not an RMTC checkpoint (magic {data[:4]!r})")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported RMTC version {version}")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode())
    config = UNetConfig.from_dict(header["config"])
    (count,) = r.unpack("<I")
    tensors, trainable = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (flag,) = r.unpack("<B")
        size = int(np.prod(shape))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = Tensor(arr, requires_grad=True)
        trainable[name] = bool(flag)
    if r.pos != len(data):
        raise ConfigMismatchError(f"{len(data) - r.pos} trailing bytes after the declared records")
    shapes = parameter_shapes(config)
    got = {k: t.shape for k, t in tensors.items()}
    if list(got) != list(shapes) or any(tuple(got[k]) != shapes[k] for k in shapes):
        raise ConfigMismatchError("stored parameter names/shapes do not match the embedded config")
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"checkpoint config {config} differs from expected {expected}")
    return ModelParams(config, tensors, trainable, header.get("meta", {}))


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load_checkpoint(path, expected: UNetConfig | None = None) -> ModelParams:
    return from_bytes(Path(path).read_bytes(), expected)
