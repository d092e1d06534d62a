"""Experiment matrix: (source, target) pairs x schemes x seeds.

Every cell pretrains its source (or reuses the cached checkpoint), computes the
risk map before fine-tuning, fine-tunes, recomputes the map with the
fine-tuned model and evaluates Dice on the held-out target split.

A task is written ``"<task>:<modality>"``, e.g. ``"wm:t1"``.

``report.json`` keys:

``suite``
    the suite spec that produced the report.
``cells``
    one entry per run with ``source``, ``target``, ``scheme``, ``seed``,
    ``shots``, ``status`` and, on success, ``dice`` (``macro``/``per_class``),
    ``risk_before``/``risk_after`` (``mean``, ``max``, ``min``, ``leep_mean``),
    ``risk_delta`` (after minus before mean) and ``final_loss``. Failed cells
    carry ``error`` instead.
``averages``
    per target, per scheme ``average_dice`` over that row's cells.
``comparisons``
    per non-vanilla scheme, paired against vanilla on identical cells:
    ``mean_diff``, ``wins``, ``ties``, ``runs``.
``risk_summary``
    count of runs whose mean risk dropped after fine-tuning.

Wall-clock timings go to ``timing.json`` so the report stays reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import segnet
from .dataio import PhantomSpec, SliceDataset, few_shot_subset, generate_phantoms, split, write_csv_grid, write_raster
from .errors import TransferRiskError, ValidationError
from .riskweight import RiskMap, SCHEMES, write_pgm
from .segnet import ModelParams
from .training import TrainConfig, compute_risk, evaluate, finetune, pretrain
from .transferability import TransferabilityMap

log = logging.getLogger(__name__)


# ------------------------------------------------------------ default suite

_STRUCTURES = [
    {"name": "csf", "radius": [26, 22], "parent": None, "radius_jitter": 0.08, "shift": 2.0},
    {"name": "gm", "radius": [22, 18], "parent": "csf", "radius_jitter": 0.08, "shift": 2.0},
    {"name": "wm", "radius": [15, 11], "parent": "gm", "radius_jitter": 0.15, "shift": 2.5},
]
_MODALITIES = [
    {"name": "t1", "levels": {"background": 0.02, "csf": 0.25, "gm": 0.5, "wm": 0.8}, "gamma": 1.0, "noise": 0.06},
    {"name": "t2", "levels": {"background": 0.02, "csf": 0.9, "gm": 0.6, "wm": 0.35}, "gamma": 0.8, "noise": 0.06},
]


def binary_task(region: str, regions=("background", "csf", "gm", "wm")) -> dict:
    """Segment one tissue region against everything else."""
    return {
        "name": region,
        "class_names": ["background", region],
        "mapping": {r: int(r == region) for r in regions},
    }


def default_phantom(subjects: int = 60) -> dict:
    return {
        "height": 64,
        "width": 64,
        "structures": _STRUCTURES,
        "modalities": _MODALITIES,
        "subjects": subjects,
        "slices_per_subject": 2,
    }


# ------------------------------------------------------------------- suite


@dataclass
class SuiteSpec:
    pairs: list[list[str]]
    phantom: dict = field(default_factory=default_phantom)
    tasks: dict = field(default_factory=lambda: {r: binary_task(r) for r in ("csf", "gm", "wm")})
    schemes: list[str] = field(default_factory=lambda: ["vanilla", "riskmap"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    shots: list = field(default_factory=lambda: [None])
    source_data_seed: int = 11
    target_data_seed: int = 22
    split_fractions: list[float] = field(default_factory=lambda: [0.75, 0.0, 0.25])
    split_seed: int = 0
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    export_maps: bool = True

    def validate(self) -> None:
        if not self.pairs or not self.schemes or not self.seeds:
            raise ValidationError("suite needs at least one pair, scheme and seed")
        for scheme in self.schemes:
            if scheme not in SCHEMES:
                raise ValidationError(f"unknown scheme {scheme!r} in suite")
        for pair in self.pairs:
            if len(pair) != 2:
                raise ValidationError(f"pair must be [source, target], got {pair}")
            for tm in pair:
                task, _, mod = tm.partition(":")
                if task not in self.tasks:
                    raise ValidationError(f"unknown task {task!r} in {tm!r}")
                if mod not in {m["name"] for m in self.phantom["modalities"]}:
                    raise ValidationError(f"unknown modality {mod!r} in {tm!r}")
        for k in self.shots:
            if k is not None and int(k) < 1:
                raise ValidationError(f"shots must be None or >= 1, got {k}")
        self.pretrain_config().validate()
        self.finetune_config("vanilla", 0).validate()

    def pretrain_config(self) -> TrainConfig:
        base = TrainConfig(lr=1e-3, iterations=600, batch_size=4, freeze_encoder=False, base_channels=4)
        return base.replace(**self.pretrain)

    def finetune_config(self, scheme: str, seed: int) -> TrainConfig:
        base = TrainConfig(iterations=2000, batch_size=1, base_channels=4)
        return base.replace(**self.finetune).replace(scheme=scheme, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown suite keys {sorted(unknown)}")
        if "pairs" not in d:
            raise ValidationError("suite must list pairs")
        return cls(**d)


def default_suite(**overrides) -> SuiteSpec:
    """Six pairs: three modality shifts with the task fixed, three task
    shifts with the modality fixed."""
    pairs = [
        ["wm:t1", "wm:t2"],
        ["gm:t2", "gm:t1"],
        ["csf:t1", "csf:t2"],
        ["wm:t1", "gm:t1"],
        ["gm:t2", "csf:t2"],
        ["csf:t1", "wm:t1"],
    ]
    return SuiteSpec(pairs=pairs, **overrides)


def few_shot_suite(**overrides) -> SuiteSpec:
    """One fixed pair on a larger cohort, subsampled to 200, 50 and 25 slices."""
    kw = {"phantom": default_phantom(subjects=150), "shots": [200, 50, 25], **overrides}
    return SuiteSpec(pairs=[["wm:t1", "wm:t2"]], **kw)


# ----------------------------------------------------------------- helpers


def export_maps(prefix, tmap: TransferabilityMap, risk: RiskMap) -> list[Path]:
    """Write ``<prefix>.csv/.rmrs/.pgm`` for the risk weights and
    ``<prefix>.leep.csv/.leep.rmrs`` for the raw transferability values."""
    p = Path(prefix)
    p.parent.mkdir(parents=True, exist_ok=True)
    paths = [Path(f"{p}{ext}") for ext in (".csv", ".rmrs", ".pgm", ".leep.csv", ".leep.rmrs")]
    write_csv_grid(paths[0], risk.weights)
    write_raster(paths[1], risk.weights)
    write_pgm(paths[2], risk.weights, risk.base)
    write_csv_grid(paths[3], tmap.values)
    write_raster(paths[4], tmap.values)
    return paths


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def _risk_stats(tmap: TransferabilityMap, risk: RiskMap) -> dict:
    return {**risk.stats(), "leep_mean": float(tmap.mean)}


class _Workspace:
    """Datasets and source checkpoints shared by the cells of one run."""

    def __init__(self, suite: SuiteSpec, out: Path | None):
        self.suite = suite
        self.out = out
        self._data: dict = {}
        self._models: dict = {}

    def dataset(self, tm: str, seed: int) -> SliceDataset:
        task, _, mod = tm.partition(":")
        key = (task, seed)
        if key not in self._data:
            spec = PhantomSpec.from_dict({**self.suite.phantom, "task": self.suite.tasks[task]})
            self._data[key] = generate_phantoms(spec, seed)
        return self._data[key][mod]

    def target_split(self, tm: str) -> tuple[SliceDataset, SliceDataset]:
        ds = self.dataset(tm, self.suite.target_data_seed)
        train, _, test = split(ds, self.suite.split_fractions, self.suite.split_seed)
        return train, test

    def source_model(self, tm: str) -> ModelParams:
        cfg = self.suite.pretrain_config()
        key = (tm, cfg.seed, _digest([self.suite.phantom, self.suite.tasks[tm.partition(":")[0]],
                                      self.suite.source_data_seed, self.suite.split_fractions,
                                      self.suite.split_seed, cfg.to_dict()]))
        if key in self._models:
            return self._models[key]
        path = None
        if self.out is not None:
            path = self.out / "checkpoints" / f"{tm.replace(':', '-')}-s{key[1]}-{key[2]}.rmtc"
            if path.exists():
                self._models[key] = segnet.load_checkpoint(path)
                return self._models[key]
        src = self.dataset(tm, self.suite.source_data_seed)
        train, _, _ = split(src, self.suite.split_fractions, self.suite.split_seed)
        params = pretrain(train, cfg).params
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            segnet.save_checkpoint(params, tmp)
            tmp.replace(path)
        self._models[key] = params
        return params


def _cell_id(source: str, target: str, scheme: str, seed: int, shots) -> str:
    tag = f"{source}_to_{target}".replace(":", "-")
    return f"{tag}/{scheme}-s{seed}" + ("" if shots is None else f"-k{shots}")


def _run_cell(ws: _Workspace, source: str, target: str, scheme: str, seed: int, shots, before_cache: dict) -> dict:
    suite = ws.suite
    cfg = suite.finetune_config(scheme, seed)
    src = ws.source_model(source)
    train, test = ws.target_split(target)
    if shots is not None:
        train = few_shot_subset(train, int(shots), seed)
    bkey = (source, target, shots, seed if shots is not None else None)
    if bkey not in before_cache:
        before_cache[bkey] = compute_risk(src, train, cfg.mode, cfg.orientation, cfg.base)
    t_before, r_before = before_cache[bkey]
    run = finetune(src, train, cfg)
    t_after, r_after = compute_risk(run.params, train, cfg.mode, cfg.orientation, cfg.base)
    report = evaluate(run.params, test)
    cell_dir = None
    if ws.out is not None and suite.export_maps:
        cell_dir = ws.out / "cells" / _cell_id(source, target, scheme, seed, shots)
        export_maps(cell_dir / "risk_before", t_before, r_before)
        export_maps(cell_dir / "risk_after", t_after, r_after)
    before, after = _risk_stats(t_before, r_before), _risk_stats(t_after, r_after)
    return {
        "status": "ok",
        "dice": {"macro": report.macro, "per_class": report.per_class, "samples": report.samples},
        "risk_before": before,
        "risk_after": after,
        "risk_delta": after["mean"] - before["mean"],
        "final_loss": run.losses[-1],
        "train_size": len(train),
        "artifacts": None if cell_dir is None else str(cell_dir.relative_to(ws.out)),
    }


def _summarise(cells: list[dict], schemes: list[str]) -> tuple[dict, dict, dict]:
    ok = [c for c in cells if c["status"] == "ok"]
    averages: dict = {}
    for target in sorted({c["target"] for c in ok}):
        row = {}
        for scheme in schemes:
            vals = [c["dice"]["macro"] for c in ok if c["target"] == target and c["scheme"] == scheme]
            if vals:
                row[scheme] = {"average_dice": float(np.mean(vals)), "runs": len(vals)}
        averages[target] = row
    index = {(c["source"], c["target"], c["seed"], c["shots"], c["scheme"]): c for c in ok}
    comparisons = {}
    for scheme in schemes:
        if scheme == "vanilla":
            continue
        diffs = []
        for (s, t, seed, k, sch), cell in sorted(index.items(), key=lambda kv: str(kv[0])):
            base = index.get((s, t, seed, k, "vanilla"))
            if sch == scheme and base is not None:
                diffs.append(cell["dice"]["macro"] - base["dice"]["macro"])
        if diffs:
            d = np.asarray(diffs)
            comparisons[scheme] = {
                "mean_diff": float(d.mean()),
                "wins": int((d > 0).sum()),
                "ties": int((d == 0).sum()),
                "runs": len(diffs),
            }
    dropped = sum(1 for c in ok if c["risk_delta"] < 0)
    risk_summary = {"runs": len(ok), "risk_decreased": dropped}
    return averages, comparisons, risk_summary


@dataclass
class ExperimentResult:
    report: dict
    timing: dict

    @property
    def cells(self) -> list[dict]:
        return self.report["cells"]

    def to_json(self) -> str:
        return json.dumps(self.report, indent=2, sort_keys=True) + "\n"


def run_matrix(suite: SuiteSpec, out_dir=None) -> ExperimentResult:
    """Run every cell of ``suite``; cell failures are recorded, not raised."""
    suite.validate()
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ws = _Workspace(suite, out)
    before_cache: dict = {}
    cells, timing = [], {}
    start = time.perf_counter()
    for source, target in suite.pairs:
        for shots in suite.shots:
            for seed in suite.seeds:
                for scheme in suite.schemes:
                    cell = {"source": source, "target": target, "scheme": scheme, "seed": seed, "shots": shots}
                    t0 = time.perf_counter()
                    try:
                        cell.update(_run_cell(ws, source, target, scheme, seed, shots, before_cache))
                    except (TransferRiskError, ValueError, RuntimeError) as exc:
                        log.warning("cell %s failed: %s", cell, exc)
                        cell.update({"status": "error", "error": f"{type(exc).__name__}: {exc}"})
                    timing[_cell_id(source, target, scheme, seed, shots)] = time.perf_counter() - t0
                    cells.append(cell)
    timing["total_seconds"] = time.perf_counter() - start
    averages, comparisons, risk_summary = _summarise(cells, suite.schemes)
    report = {
        "suite": suite.to_dict(),
        "cells": cells,
        "averages": averages,
        "comparisons": comparisons,
        "risk_summary": risk_summary,
    }
    result = ExperimentResult(report, timing)
    if out is not None:
        (out / "report.json").write_text(result.to_json())
        (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return result
