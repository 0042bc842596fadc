import csv
import json
import subprocess
import sys

import pytest
from conftest import ROOT

from tpcvit.cli import main, version_hash

SMALL = [
    "model.image_size=8", "model.num_classes=2", "model.depth=2", "model.embed_dim=16",
    "model.heads=2", "model.patch_size=4", "data.train_size=16", "data.eval_size=8",
    "train.epochs=2", "train.batch_size=8",
]


def run_cli(*args):
    return main([str(a) for a in args])


def test_train_twice_with_same_seed_gives_identical_metrics(tmp_path):
    for name in ("a", "b"):
        assert run_cli("train", "--seed", 7, "--out", tmp_path / name, *SMALL) == 0
    a = (tmp_path / "a" / "metrics.csv").read_text()
    assert a == (tmp_path / "b" / "metrics.csv").read_text()
    assert len(a.splitlines()) == 1 + 4
    for name in ("manifest.json", "checkpoint.bin", "eval.json"):
        assert (tmp_path / "a" / name).exists()


def test_manifest_records_overrides_and_version(tmp_path):
    assert run_cli("train", "--out", tmp_path, *SMALL, "tpc.kappa=60") == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["tpc"]["kappa"] == 60
    assert manifest["version_hash"] == version_hash() and len(version_hash()) == 40


def test_train_config_file_and_resume(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"image_size": 8, "num_classes": 2, "depth": 1, "embed_dim": 8,
                                         "heads": 2, "patch_size": 4},
                               "data": {"train_size": 8, "eval_size": 4},
                               "train": {"epochs": 1, "batch_size": 4, "plots": True}}))
    assert run_cli("train", "--config", cfg, "--out", tmp_path / "r") == 0
    assert (tmp_path / "r" / "loss.svg").exists()
    ckpt = tmp_path / "r" / "checkpoint.bin"
    assert run_cli("eval", "--checkpoint", ckpt, "--out", tmp_path / "e") == 0
    assert "top1" in json.loads((tmp_path / "e" / "eval.json").read_text())
    assert run_cli("trace", "--checkpoint", ckpt, "--images", 2, "--out", tmp_path / "t") == 0
    header = (tmp_path / "t" / "trace.csv").read_text().splitlines()[0]
    assert header.startswith("step,layer,token")


def test_missing_config_is_exit_2(tmp_path, capsys):
    assert run_cli("train", "--config", tmp_path / "nope.json", "--out", tmp_path / "o") == 2
    assert "error" in capsys.readouterr().err


def test_unknown_key_is_exit_2(tmp_path, capsys):
    assert run_cli("train", "--out", tmp_path, *SMALL, "tpc.kapa=3") == 2
    assert "tpc.kapa" in capsys.readouterr().err


def test_non_finite_training_is_exit_3(tmp_path):
    with pytest.warns(RuntimeWarning):
        code = run_cli("train", "--out", tmp_path, *SMALL, "data.std=[1e-320]")
    assert code == 3
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert "non-finite" in dump["error"]


@pytest.mark.parametrize("preset,target", [("deit-t", 1.3), ("deit-s", 4.6), ("deit-b", 17.6)])
def test_flops_presets(preset, target, capsys):
    assert run_cli("flops", "--preset", preset) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("total"))
    gflops = float(line.split()[1])
    assert abs(gflops - target) / target <= 0.05


def test_flops_mask_schedule_lowers_cost(tmp_path, capsys):
    sched = tmp_path / "s.json"
    sched.write_text(json.dumps([197] * 6 + [99] * 6))
    assert run_cli("flops", "--preset", "deit-s", "--mask-schedule", sched, "--out", tmp_path / "o") == 0
    text = capsys.readouterr().out
    line = next(l for l in text.splitlines() if l.startswith("total"))
    total, dense = float(line.split()[1]), float(line.split("equivalent")[1].split()[0])
    assert total < dense
    assert (tmp_path / "o" / "flops.csv").exists()


def test_flops_bad_schedule_and_preset(tmp_path):
    sched = tmp_path / "s.json"
    sched.write_text("[1, 2]")
    assert run_cli("flops", "--preset", "deit-s", "--mask-schedule", sched) == 2
    assert run_cli("flops", "--preset", "deit-x") == 2


def test_sweep_over_kappa(tmp_path):
    values = "1,2,3,4,5,6,7"
    tiny = [a for a in SMALL if not a.startswith(("train.epochs", "data.train_size"))]
    assert run_cli("sweep", "--out", tmp_path, "--axis", f"kappa={values}", *tiny,
                   "train.epochs=1", "data.train_size=8") == 0
    with open(tmp_path / "sweep.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 7
    assert [r["value"] for r in rows] == [f"tpc.kappa={v}" for v in values.split(",")]
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_bad_axis_is_exit_2(tmp_path):
    assert run_cli("sweep", "--out", tmp_path, "--axis", "nonsense=1", *SMALL) == 2


def test_bench_smoke(tmp_path, capsys):
    args = ["bench", "--batch", 2, "--out", tmp_path, *SMALL, "tpc.kappa=3"]
    assert run_cli(*args) == 0
    report = json.loads((tmp_path / "bench.json").read_text())
    assert report["single"]["speedup"] > 0
    assert run_cli("bench", "--batch", 1, *SMALL, "model.depth=0") == 0
    assert "ingest_ceiling" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tpcvit", "--version"], capture_output=True, text=True, cwd=ROOT)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout
