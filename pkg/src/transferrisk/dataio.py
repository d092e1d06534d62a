"""Slice datasets, the RMRS raster format, and synthetic registered phantoms.

A dataset directory holds ``manifest.json``, ``images.rmrs`` (f64,
``[N, 1, H, W]``, values in [0, 1]) and ``labels.rmrs`` (u8, ``[N, H, W]``).

RMRS layout, little-endian::

    b"RMRS" | u32 version | u8 dtype code (1 = f64, 2 = u8) | u8 ndim
    | ndim x u32 dims | row-major payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimMismatchError,
    MissingFileError,
    ShapeError,
    TruncatedFileError,
    ValidationError,
    VersionError,
)

RASTER_MAGIC = b"RMRS"
RASTER_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("u1")}
MANIFEST_VERSION = 1
GENERATOR_VERSION = "phantom-1"


# ------------------------------------------------------------------- RMRS


def raster_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        code = 2
    elif arr.dtype.kind == "f":
        code = 1
    else:
        raise ValidationError(f"RMRS stores f64 or u8 arrays, got {arr.dtype}")
    head = RASTER_MAGIC + struct.pack("<IBB", RASTER_VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def parse_raster(data: bytes) -> np.ndarray:
    if data[:4] != RASTER_MAGIC:
        raise VersionError(f"not an RMRS raster (magic {data[:4]!r})")
    if len(data) < 10:
        raise TruncatedFileError("RMRS header truncated")
    version, code, ndim = struct.unpack_from("<IBB", data, 4)
    if version != RASTER_VERSION:
        raise VersionError(f"unsupported RMRS version {version}")
    if code not in DTYPE_CODES:
        raise VersionError(f"unknown RMRS dtype code {code}")
    off = 10 + 4 * ndim
    if len(data) < off:
        raise TruncatedFileError("RMRS dims truncated")
    dims = struct.unpack_from(f"<{ndim}I", data, 10)
    dtype = DTYPE_CODES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    have = len(data) - off
    if have < need:
        raise TruncatedFileError(f"RMRS payload has {have} bytes, dims {dims} need {need}")
    if have > need:
        raise DimMismatchError(f"RMRS payload has {have - need} bytes beyond dims {dims}")
    arr = np.frombuffer(data, dtype=dtype, count=need // dtype.itemsize, offset=off).reshape(dims)
    return arr.astype(np.float64) if code == 1 else arr.copy()


def write_raster(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(raster_bytes(arr))


def read_raster(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"missing raster {p}")
    return parse_raster(p.read_bytes())


def write_csv_grid(path, grid: np.ndarray) -> None:
    """Row-major CSV with shortest round-tripping float repr."""
    rows = [",".join(repr(float(v)) for v in row) for row in np.asarray(grid)]
    Path(path).write_text("\n".join(rows) + "\n")


def read_csv_grid(path) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")] for line in Path(path).read_text().splitlines() if line])


# ---------------------------------------------------------------- datasets


@dataclass
class Manifest:
    dataset_id: str
    modality: str
    task: str
    class_names: list[str]
    seed: int
    num_images: int
    height: int
    width: int
    subjects: list[int]
    generator_version: str = GENERATOR_VERSION
    lineage: list[str] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        if d.get("format_version") != MANIFEST_VERSION:
            raise VersionError(f"unsupported manifest format_version {d.get('format_version')!r}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise VersionError(f"manifest keys do not match format version {MANIFEST_VERSION}: {exc}") from exc


@dataclass
class SliceDataset:
    images: np.ndarray
    labels: np.ndarray
    manifest: Manifest

    def __post_init__(self):
        n, c, h, w = self.images.shape
        if c != 1:
            raise ShapeError(f"images must be single-channel [N,1,H,W], got {self.images.shape}")
        if self.labels.shape != (n, h, w):
            raise ShapeError(f"labels {self.labels.shape} disagree with images {self.images.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.manifest.class_names)

    @property
    def spatial(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def take(self, indices, dataset_id: str, note: str) -> "SliceDataset":
        idx = np.asarray(indices, dtype=np.intp)
        m = Manifest(
            **{
                **self.manifest.to_dict(),
                "dataset_id": dataset_id,
                "num_images": int(len(idx)),
                "subjects": [self.manifest.subjects[i] for i in idx],
                "lineage": [*self.manifest.lineage, f"{self.manifest.dataset_id}:{note}"],
            }
        )
        return SliceDataset(self.images[idx].copy(), self.labels[idx].copy(), m)


def save_dataset(ds: SliceDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "manifest.json").write_text(json.dumps(ds.manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    write_raster(d / "images.rmrs", ds.images)
    write_raster(d / "labels.rmrs", ds.labels.astype(np.uint8))


def load_dataset(directory) -> SliceDataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"missing {mpath}")
    manifest = Manifest.from_dict(json.loads(mpath.read_text()))
    images = read_raster(d / "images.rmrs")
    labels = read_raster(d / "labels.rmrs")
    n, h, w = manifest.num_images, manifest.height, manifest.width
    if images.shape != (n, 1, h, w):
        raise DimMismatchError(f"images raster {images.shape} disagrees with manifest {(n, 1, h, w)}")
    if labels.shape != (n, h, w):
        raise DimMismatchError(f"labels raster {labels.shape} disagrees with manifest {(n, h, w)}")
    if len(manifest.subjects) != n:
        raise DimMismatchError(f"manifest lists {len(manifest.subjects)} subjects for {n} images")
    return SliceDataset(images, labels.astype(np.int64), manifest)


# ---------------------------------------------------------------- phantoms


@dataclass
class StructureSpec:
    """Ellipse nested inside ``parent`` (``None`` means the image)."""

    name: str
    radius: tuple[float, float]
    parent: str | None = None
    radius_jitter: float = 0.1
    shift: float = 2.0
    offset: tuple[float, float] = (0.0, 0.0)


@dataclass
class ModalitySpec:
    """Tissue contrast table, monotone curve ``x ** gamma``, and noise std."""

    name: str
    levels: dict[str, float]
    gamma: float = 1.0
    noise: float = 0.0


@dataclass
class TaskSpec:
    name: str
    class_names: list[str]
    mapping: dict[str, int]


@dataclass
class PhantomSpec:
    height: int
    width: int
    structures: list[StructureSpec]
    modalities: list[ModalitySpec]
    task: TaskSpec
    subjects: int = 20
    slices_per_subject: int = 2
    slice_shrink: float = 0.12
    max_rotation: float = 0.3
    tissue_jitter: float = 0.03

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["structures"] = [StructureSpec(**{**s, "radius": tuple(s["radius"]), "offset": tuple(s.get("offset", (0, 0)))}) for s in d["structures"]]
        d["modalities"] = [ModalitySpec(**m) for m in d["modalities"]]
        d["task"] = TaskSpec(**d["task"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def region_names(self) -> list[str]:
        return ["background", *(s.name for s in self.structures)]

    def validate(self) -> None:
        if self.height < 1 or self.width < 1 or self.subjects < 1 or self.slices_per_subject < 1:
            raise ValidationError("phantom extents, subjects and slices_per_subject must be positive")
        seen: set[str] = set()
        for s in self.structures:
            if s.parent is not None and s.parent not in seen:
                raise ValidationError(f"structure {s.name!r} names parent {s.parent!r} that is not declared before it")
            if s.name in seen or s.name == "background":
                raise ValidationError(f"duplicate or reserved structure name {s.name!r}")
            seen.add(s.name)
            cy = (self.height - 1) / 2 + s.offset[0]
            cx = (self.width - 1) / 2 + s.offset[1]
            ry = s.radius[0] * (1 + s.radius_jitter) + s.shift
            rx = s.radius[1] * (1 + s.radius_jitter) + s.shift
            reach = max(ry, rx)  # rotation can swing either radius onto either axis
            if cy - reach < 0 or cy + reach > self.height - 1 or cx - reach < 0 or cx + reach > self.width - 1:
                raise ValidationError(f"structure {s.name!r} can exceed the {self.height}x{self.width} image bounds")
        regions = self.region_names()
        for m in self.modalities:
            missing = set(regions) - set(m.levels)
            if missing:
                raise ValidationError(f"modality {m.name!r} lacks levels for {sorted(missing)}")
        t = self.task
        if set(t.mapping) != set(regions):
            raise ValidationError(f"task {t.name!r} must map exactly the regions {regions}")
        if any(not 0 <= c < len(t.class_names) for c in t.mapping.values()):
            raise ValidationError(f"task {t.name!r} maps a region outside its {len(t.class_names)} classes")
        if t.mapping["background"] != 0:
            raise ValidationError("background must map to class 0")
        if len({m.name for m in self.modalities}) != len(self.modalities) or not self.modalities:
            raise ValidationError("modalities must be non-empty with unique names")


def _stream(seed: int, subject: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(subject, stream))))


def _subject_regions(spec: PhantomSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Region-index rasters (0 = background, i = structure i) for each slice."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    geo = []
    for s in spec.structures:
        u = rng.uniform(-1.0, 1.0, size=5)
        cy = (h - 1) / 2 + s.offset[0] + s.shift * u[0]
        cx = (w - 1) / 2 + s.offset[1] + s.shift * u[1]
        ry = s.radius[0] * (1 + s.radius_jitter * u[2])
        rx = s.radius[1] * (1 + s.radius_jitter * u[3])
        geo.append((cy, cx, ry, rx, spec.max_rotation * u[4]))
    index = {s.name: i + 1 for i, s in enumerate(spec.structures)}
    out = []
    for sl in range(spec.slices_per_subject):
        f = 1.0 - spec.slice_shrink * sl
        masks: dict[str, np.ndarray] = {}
        region = np.zeros((h, w), dtype=np.int64)
        for s, (cy, cx, ry, rx, th) in zip(spec.structures, geo):
            dy, dx = yy - cy, xx - cx
            a = (np.cos(th) * dy + np.sin(th) * dx) / (ry * f)
            b = (-np.sin(th) * dy + np.cos(th) * dx) / (rx * f)
            mask = a * a + b * b <= 1.0
            if s.parent is not None:
                mask &= masks[s.parent]
            masks[s.name] = mask
            region[mask] = index[s.name]
        out.append(region)
    return out


def generate_phantoms(spec: PhantomSpec, seed: int, dataset_prefix: str | None = None) -> dict[str, SliceDataset]:
    """One registered :class:`SliceDataset` per modality.

    Geometry and per-subject tissue jitter come from the subject's stream 0 and
    are shared by all modalities; modality ``m`` draws its noise from stream
    ``m + 1``.
    """
    spec.validate()
    regions = spec.region_names()
    mapping = np.array([spec.task.mapping[r] for r in regions], dtype=np.int64)
    imgs = {m.name: [] for m in spec.modalities}
    labels, subjects = [], []
    for subj in range(spec.subjects):
        rng = _stream(seed, subj, 0)
        slices = _subject_regions(spec, rng)
        jitter = spec.tissue_jitter * rng.uniform(-1.0, 1.0, size=len(regions))
        jitter[0] = 0.0
        for mi, mod in enumerate(spec.modalities):
            nrng = _stream(seed, subj, mi + 1)
            levels = np.array([mod.levels[r] for r in regions]) + jitter
            for region in slices:
                x = np.clip(levels[region], 0.0, 1.0) ** mod.gamma
                if mod.noise > 0:
                    x = x + mod.noise * nrng.standard_normal(x.shape)
                imgs[mod.name].append(np.clip(x, 0.0, 1.0))
        for region in slices:
            labels.append(mapping[region])
            subjects.append(subj)
    lab = np.stack(labels)
    prefix = dataset_prefix or spec.task.name
    out = {}
    for mod in spec.modalities:
        manifest = Manifest(
            dataset_id=f"{prefix}-{mod.name}-s{seed}",
            modality=mod.name,
            task=spec.task.name,
            class_names=list(spec.task.class_names),
            seed=int(seed),
            num_images=len(lab),
            height=spec.height,
            width=spec.width,
            subjects=list(subjects),
        )
        out[mod.name] = SliceDataset(np.stack(imgs[mod.name])[:, None], lab.copy(), manifest)
    return out


# ----------------------------------------------------------- partitioning


def split(ds: SliceDataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> tuple[SliceDataset, SliceDataset, SliceDataset]:
    """Shuffle subjects and cut them into train/val/test by ``fractions``."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValidationError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    subjects = sorted(set(ds.manifest.subjects))
    order = np.random.default_rng(seed).permutation(len(subjects))
    cuts = np.rint(np.cumsum(fr)[:2] * len(subjects)).astype(int)
    groups = np.split(np.asarray(subjects)[order], cuts)
    per_slice = np.asarray(ds.manifest.subjects)
    parts = []
    for name, grp in zip(("train", "val", "test"), groups):
        idx = np.flatnonzero(np.isin(per_slice, grp))
        parts.append(ds.take(idx, f"{ds.manifest.dataset_id}.{name}", f"split{tuple(float(v) for v in fr)}@{seed}:{name}"))
    return tuple(parts)


def few_shot_subset(ds: SliceDataset, k: int, seed: int = 0) -> SliceDataset:
    if not 1 <= k <= len(ds):
        raise ValidationError(f"few-shot size k={k} must lie in [1, {len(ds)}]")
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:k])
    return ds.take(idx, f"{ds.manifest.dataset_id}.k{k}", f"few_shot(k={k})@{seed}")
