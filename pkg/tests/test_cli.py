import json

import numpy as np
import pytest

from transferrisk import segnet
from transferrisk.cli import main
from transferrisk.dataio import load_dataset, read_csv_grid, read_raster, save_dataset
from transferrisk.matrix import binary_task, default_phantom
from transferrisk.riskweight import read_pgm


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    spec = write_json(d / "spec.json", {**default_phantom(subjects=3), "task": binary_task("gm")})
    cfg = write_json(d / "cfg.json", {"iterations": 5, "batch_size": 2, "base_channels": 2, "lr": 1e-3})
    assert main(["gen-data", "--spec", spec, "--seed", "4", "--out", str(d / "data")]) == 0
    assert main(["pretrain", "--data", str(d / "data" / "t1"), "--config", cfg, "--out", str(d / "src.rmtc")]) == 0
    return d, cfg


def test_gen_data_writes_each_modality(work):
    d, _ = work
    t1, t2 = load_dataset(d / "data" / "t1"), load_dataset(d / "data" / "t2")
    assert len(t1) == 6 and np.array_equal(t1.labels, t2.labels)


def test_pretrain_checkpoint_records_full_training(work):
    d, _ = work
    p = segnet.load_checkpoint(d / "src.rmtc")
    assert all(p.trainable.values())
    assert p.meta["train"]["freeze_encoder"] is False


@pytest.mark.parametrize("mode", ["global", "perloc"])
def test_riskmap_exports(work, mode, capsys):
    d, _ = work
    prefix = d / f"risk-{mode}"
    rc = main(["riskmap", "--ckpt", str(d / "src.rmtc"), "--data", str(d / "data" / "t2"),
               "--mode", mode, "--orientation", "hardness", "--out", str(prefix)])
    assert rc == 0
    w = read_raster(f"{prefix}.rmrs")
    assert w.shape == (64, 64) and w.min() >= 1 and w.max() <= 10
    assert read_csv_grid(f"{prefix}.csv").tobytes() == w.tobytes()
    assert read_pgm(f"{prefix}.pgm").shape == (64, 64)
    assert "risk mean" in capsys.readouterr().out


def test_finetune_and_eval(work):
    d, cfg = work
    out = d / "ft.rmtc"
    rc = main(["finetune", "--ckpt", str(d / "src.rmtc"), "--data", str(d / "data" / "t2"),
               "--scheme", "riskmap", "--config", cfg, "--out", str(out)])
    assert rc == 0
    p = segnet.load_checkpoint(out)
    assert not any(p.trainable[k] for k in p.encoder_names())
    report = d / "eval.json"
    assert main(["eval", "--ckpt", str(out), "--data", str(d / "data" / "t2"), "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert set(rep) == {"per_class", "macro", "samples"} and rep["samples"] == 6


def test_matrix_command(work, tmp_path):
    suite = {
        "pairs": [["wm:t1", "wm:t2"]],
        "phantom": default_phantom(subjects=2),
        "seeds": [0],
        "split_fractions": [0.5, 0.0, 0.5],
        "pretrain": {"iterations": 3, "batch_size": 2, "base_channels": 2},
        "finetune": {"iterations": 3, "batch_size": 1, "base_channels": 2},
    }
    path = write_json(tmp_path / "suite.json", suite)
    assert main(["matrix", "--suite", path, "--out", str(tmp_path / "m")]) == 0
    report = json.loads((tmp_path / "m" / "report.json").read_text())
    assert len(report["cells"]) == 2


def test_validation_errors_exit_1(work, tmp_path, capsys):
    d, _ = work
    bad_cfg = write_json(tmp_path / "bad.json", {"lr": -1})
    assert main(["pretrain", "--data", str(d / "data" / "t1"), "--config", bad_cfg, "--out", str(tmp_path / "x")]) == 1
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["gen-data", "--spec", str(tmp_path / "junk.json"), "--seed", "0", "--out", str(tmp_path)]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "missing.rmtc"), "--data", str(d / "data" / "t1")]) == 1
    corrupt = tmp_path / "corrupt.rmtc"
    corrupt.write_bytes(b"NOPE" + (d / "src.rmtc").read_bytes()[4:])
    assert main(["eval", "--ckpt", str(corrupt), "--data", str(d / "data" / "t1")]) == 1
    assert "error" in capsys.readouterr().err


def test_divergence_exits_2(work, tmp_path):
    d, cfg = work
    ds = load_dataset(d / "data" / "t1")
    ds.images[:] = np.nan
    save_dataset(ds, tmp_path / "nan")
    assert main(["pretrain", "--data", str(tmp_path / "nan"), "--config", cfg, "--out", str(tmp_path / "x.rmtc")]) == 2


@pytest.mark.parametrize(
    "argv",
    [
        ["riskmap", "--ckpt", "a", "--data", "b", "--mode", "local", "--out", "c"],
        ["finetune", "--ckpt", "a", "--data", "b", "--scheme", "focal", "--out", "c"],
        ["frobnicate"],
    ],
)
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1
