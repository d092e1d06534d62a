import json
import struct

import numpy as np
import pytest

from transferrisk import dataio
from transferrisk.dataio import PhantomSpec
from transferrisk.errors import (
    DimMismatchError,
    MissingFileError,
    TruncatedFileError,
    ValidationError,
    VersionError,
)
from transferrisk.matrix import binary_task, default_phantom


def spec(task="wm", **kw):
    return PhantomSpec.from_dict({**default_phantom(subjects=4), "task": binary_task(task), **kw})


# ------------------------------------------------------------------- RMRS


@pytest.mark.parametrize(
    "arr",
    [
        np.random.default_rng(0).normal(size=(3, 1, 4, 5)),
        np.arange(24, dtype=np.uint8).reshape(2, 3, 4),
        np.array([np.pi, -0.0, 1e-300, np.inf]),
    ],
)
def test_raster_round_trip_bit_exact(tmp_path, arr):
    path = tmp_path / "a.rmrs"
    dataio.write_raster(path, arr)
    back = dataio.read_raster(path)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
    assert dataio.raster_bytes(back) == path.read_bytes()


def test_raster_header_layout():
    data = dataio.raster_bytes(np.zeros((2, 3), dtype=np.uint8))
    assert data[:4] == b"RMRS"
    assert struct.unpack_from("<IBB2I", data, 4) == (1, 2, 2, 2, 3)
    assert len(data) == 4 + 4 + 2 + 8 + 6


def _raster():
    return bytearray(dataio.raster_bytes(np.ones((2, 2))))


def test_raster_bad_magic():
    data = _raster()
    data[:4] = b"RMRX"
    with pytest.raises(VersionError):
        dataio.parse_raster(bytes(data))


def test_raster_bad_version():
    data = _raster()
    data[4:8] = struct.pack("<I", 7)
    with pytest.raises(VersionError):
        dataio.parse_raster(bytes(data))


def test_raster_unknown_dtype_code():
    data = _raster()
    data[8] = 9
    with pytest.raises(VersionError, match="dtype"):
        dataio.parse_raster(bytes(data))


def test_raster_dims_disagree_with_payload():
    data = _raster()
    struct.pack_into("<I", data, 10, 1)  # claim 1x2 while carrying 2x2
    with pytest.raises(DimMismatchError):
        dataio.parse_raster(bytes(data))


def test_raster_truncated():
    with pytest.raises(TruncatedFileError):
        dataio.parse_raster(bytes(_raster()[:-3]))
    with pytest.raises(TruncatedFileError):
        dataio.parse_raster(bytes(_raster()[:7]))


def test_raster_rejects_int64():
    with pytest.raises(ValidationError):
        dataio.raster_bytes(np.zeros(3, dtype=np.int64))


def test_csv_grid_round_trip(tmp_path):
    g = np.random.default_rng(1).normal(size=(4, 3)) * 1e-7
    dataio.write_csv_grid(tmp_path / "g.csv", g)
    assert dataio.read_csv_grid(tmp_path / "g.csv").tobytes() == g.tobytes()


# ---------------------------------------------------------------- datasets


def test_dataset_round_trip(tmp_path):
    ds = dataio.generate_phantoms(spec(), 3)["t1"]
    dataio.save_dataset(ds, tmp_path / "d")
    back = dataio.load_dataset(tmp_path / "d")
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels)
    assert back.manifest == ds.manifest


def test_dataset_manifest_count_mismatch(tmp_path):
    ds = dataio.generate_phantoms(spec(), 3)["t1"]
    d = tmp_path / "d"
    dataio.save_dataset(ds, d)
    m = json.loads((d / "manifest.json").read_text())
    m["num_images"] += 1
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DimMismatchError):
        dataio.load_dataset(d)


def test_dataset_missing_files(tmp_path):
    ds = dataio.generate_phantoms(spec(), 3)["t1"]
    d = tmp_path / "d"
    with pytest.raises(MissingFileError):
        dataio.load_dataset(d)
    dataio.save_dataset(ds, d)
    (d / "labels.rmrs").unlink()
    with pytest.raises(MissingFileError):
        dataio.load_dataset(d)


def test_dataset_manifest_version(tmp_path):
    ds = dataio.generate_phantoms(spec(), 3)["t1"]
    d = tmp_path / "d"
    dataio.save_dataset(ds, d)
    m = json.loads((d / "manifest.json").read_text())
    m["format_version"] = 2
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(VersionError):
        dataio.load_dataset(d)


# ---------------------------------------------------------------- phantoms


def test_generation_is_deterministic():
    a = dataio.generate_phantoms(spec(), 5)
    b = dataio.generate_phantoms(spec(), 5)
    for mod in a:
        assert a[mod].images.tobytes() == b[mod].images.tobytes()
        assert a[mod].labels.tobytes() == b[mod].labels.tobytes()
    c = dataio.generate_phantoms(spec(), 6)
    assert c["t1"].images.tobytes() != a["t1"].images.tobytes()


def test_modalities_are_registered():
    out = dataio.generate_phantoms(spec("gm"), 1)
    assert np.array_equal(out["t1"].labels, out["t2"].labels)
    assert out["t1"].manifest.subjects == out["t2"].manifest.subjects
    assert not np.array_equal(out["t1"].images, out["t2"].images)


def test_identical_noiseless_modalities_give_identical_images():
    levels = {"background": 0.0, "csf": 0.3, "gm": 0.6, "wm": 0.9}
    mods = [{"name": n, "levels": levels, "gamma": 1.0, "noise": 0.0} for n in ("a", "b")]
    out = dataio.generate_phantoms(spec(modalities=mods), 2)
    assert out["a"].images.tobytes() == out["b"].images.tobytes()


def test_structures_nest_and_images_in_range():
    s = spec()
    ds_wm = dataio.generate_phantoms(s, 4)["t1"]
    ds_gm = dataio.generate_phantoms(spec("gm"), 4)["t1"]
    ds_csf = dataio.generate_phantoms(spec("csf"), 4)["t1"]
    # same seed means same geometry across tasks
    inner = ds_wm.labels == 1
    mid = (ds_gm.labels == 1) | inner
    outer = (ds_csf.labels == 1) | mid
    assert inner.any() and (mid & ~inner).any() and (outer & ~mid).any()
    assert ds_wm.images.min() >= 0 and ds_wm.images.max() <= 1
    assert ds_wm.images.shape == (8, 1, 64, 64)


def test_subject_streams_are_independent_of_cohort_size():
    small = dataio.generate_phantoms(spec(subjects=2), 9)["t2"]
    large = dataio.generate_phantoms(spec(subjects=5), 9)["t2"]
    assert small.images.tobytes() == large.images[:4].tobytes()


def test_structure_out_of_bounds_rejected():
    structs = default_phantom()["structures"] + [{"name": "big", "radius": [40, 40], "parent": None}]
    mods = [dict(m, levels={**m["levels"], "big": 0.1}) for m in default_phantom()["modalities"]]
    task = binary_task("wm", ("background", "csf", "gm", "wm", "big"))
    with pytest.raises(ValidationError, match="bounds"):
        dataio.generate_phantoms(spec(structures=structs, modalities=mods, task=task), 0)


def test_unknown_parent_rejected():
    structs = [{"name": "x", "radius": [5, 5], "parent": "y"}]
    with pytest.raises(ValidationError):
        spec(structures=structs).validate()


# ------------------------------------------------------------ partitioning


def test_split_partitions_by_subject():
    ds = dataio.generate_phantoms(spec(subjects=10), 0)["t1"]
    train, val, test = dataio.split(ds, (0.6, 0.2, 0.2), seed=3)
    subj = [set(p.manifest.subjects) for p in (train, val, test)]
    assert not (subj[0] & subj[1]) and not (subj[0] & subj[2]) and not (subj[1] & subj[2])
    assert len(train) + len(val) + len(test) == len(ds)
    again = dataio.split(ds, (0.6, 0.2, 0.2), seed=3)
    assert again[0].images.tobytes() == train.images.tobytes()
    assert train.manifest.lineage[-1].startswith(ds.manifest.dataset_id)


def test_split_all_train_is_identity():
    ds = dataio.generate_phantoms(spec(), 0)["t1"]
    train, val, test = dataio.split(ds, (1.0, 0.0, 0.0), seed=1)
    assert train.images.tobytes() == ds.images.tobytes()
    assert len(val) == len(test) == 0


@pytest.mark.parametrize("fr", [(0.5, 0.5), (0.7, 0.2, 0.2), (1.2, -0.2, 0.0)])
def test_split_rejects_bad_fractions(fr):
    ds = dataio.generate_phantoms(spec(), 0)["t1"]
    with pytest.raises(ValidationError):
        dataio.split(ds, fr)


def test_few_shot_subset():
    ds = dataio.generate_phantoms(spec(subjects=10), 0)["t1"]
    full = dataio.few_shot_subset(ds, len(ds), 0)
    assert full.images.tobytes() == ds.images.tobytes()
    a, b = dataio.few_shot_subset(ds, 5, 4), dataio.few_shot_subset(ds, 5, 4)
    assert len(a) == 5 and a.images.tobytes() == b.images.tobytes()
    assert a.manifest.lineage[-1] == f"{ds.manifest.dataset_id}:few_shot(k=5)@4"
    for k in (0, len(ds) + 1):
        with pytest.raises(ValidationError):
            dataio.few_shot_subset(ds, k, 0)
