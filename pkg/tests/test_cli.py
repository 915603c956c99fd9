import csv
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml
from click.testing import CliRunner
from filelock import FileLock
from PIL import Image

from mtlvqe.cli import EXIT_CONFIG, EXIT_DATA, EXIT_LOCKED, EXIT_TOOL, main

from conftest import write_corpus

FAKE_CODEC = Path(__file__).parent / "fake_codec.py"

BASE = {
    "paths": {"hr_dir": "hr", "data_dir": "data", "run_dir": "runs/train"},
    "network": {"num_blocks": 1, "trunk_width": 8},
    "degrader": {"kind": "synthetic", "qps": [22, 27, 32, 37], "val_names": ["img04"], "test_names": ["img03"]},
    "schedule": {"total_epochs": 2, "step_epochs": 1},
    "train": {"patch_size": 16},
    "arm": {"fine_tune": False},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    write_corpus(tmp_path / "hr", 5, 64)
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(BASE))
    return tmp_path


def run(*args):
    res = CliRunner().invoke(main, list(args))
    if res.exception and not isinstance(res.exception, SystemExit):
        raise res.exception
    return res


def cfg_args(*sets):
    out = ["-c", "cfg.yaml"]
    for s in sets:
        out += ["--set", s]
    return out


def test_prepare_cardinality_and_idempotence(workdir):
    first = run("prepare", *cfg_args())
    assert first.exit_code == 0, first.output
    assert "20 entries (20 new entries)" in first.output
    text = (workdir / "data" / "manifest.csv").read_bytes()
    again = run("prepare", *cfg_args())
    assert "0 new entries" in again.output
    assert (workdir / "data" / "manifest.csv").read_bytes() == text
    assert (workdir / "data" / "config.yaml").is_file()


def test_prepare_missing_codec_binary(workdir, monkeypatch):
    monkeypatch.setenv("MTLVQE_CODEC_BIN", str(workdir / "no-such-encoder"))
    template = f"{sys.executable} {FAKE_CODEC} {{input}} {{output}} {{qp}} {{width}} {{height}} copy"
    res = run("prepare", *cfg_args("degrader.kind=external_codec", f"degrader.command_template={template}"))
    assert res.exit_code == EXIT_TOOL
    assert "no-such-encoder" in res.output


def test_prepare_external_codec(workdir):
    template = f"{sys.executable} {FAKE_CODEC} {{input}} {{output}} {{qp}} {{width}} {{height}} copy"
    res = run("prepare", *cfg_args("degrader.kind=external_codec", f"degrader.command_template={template}",
                                   "degrader.qps=[22]"))
    assert res.exit_code == 0, res.output
    assert "external-" in (workdir / "data" / "manifest.csv").read_text()


def test_config_errors_listed_together(workdir):
    res = run("train", *cfg_args("bogus=1", "network.alpha=3", "optimizer.lr0=-1", "schedule.gamma=0"))
    assert res.exit_code == EXIT_CONFIG
    for fragment in ("bogus: unknown key", "alpha must lie in [0, 1]", "optimizer.lr0", "schedule.gamma"):
        assert fragment in res.output
    assert run("train", "-c", "missing.yaml").exit_code == EXIT_CONFIG
    assert run("train", *cfg_args("nonsense")).exit_code == EXIT_CONFIG


def test_dry_run_plans_and_default_alpha(workdir):
    run("prepare", *cfg_args())
    res = run("train", *cfg_args("arm.multi_qp=false"), "--dry-run")
    assert res.exit_code == 0, res.output
    resolved = yaml.safe_load(res.output.split("plan ")[0])
    assert resolved["network"]["alpha"] == 0.9
    plans = [line for line in res.output.splitlines() if line.startswith("plan ")]
    assert len(plans) == 4
    assert len({line.split("updates=")[1] for line in plans}) == 1
    assert not (workdir / "runs").exists()


def test_missing_manifest(workdir):
    res = run("train", *cfg_args())
    assert res.exit_code == EXIT_DATA and "prepare" in res.output


def test_fine_tune_needs_pretrained(workdir):
    run("prepare", *cfg_args())
    res = run("train", *cfg_args("arm.fine_tune=true"))
    assert res.exit_code == EXIT_CONFIG and "paths.pretrained" in res.output


def test_train_eval_inspect(workdir):
    run("prepare", *cfg_args())
    res = run("train", *cfg_args("network.num_blocks=8", "network.trunk_width=4"))
    assert res.exit_code == 0, res.output
    rd = workdir / "runs" / "train"
    for name in ("config.yaml", "metrics.csv", "convergence.csv", "convergence.png",
                 "checkpoints/best.ckpt", "checkpoints/last.ckpt"):
        assert (rd / name).is_file(), name
    snap = yaml.safe_load((rd / "config.yaml").read_text())
    assert snap["network"]["num_blocks"] == 8

    ck = f"paths.checkpoint={rd / 'checkpoints' / 'best.ckpt'}"
    res = run("eval", *cfg_args(ck, "network.num_blocks=8", "network.trunk_width=4", "paths.run_dir=runs/eval",
                                "eval.format=csv"))
    assert res.exit_code == 0, res.output
    rows = list(csv.DictReader(res.output.splitlines()))
    assert {r["task"] for r in rows} == {"SR", "QE"}
    assert (workdir / "runs" / "eval" / "eval_report.txt").is_file()

    bad = run("eval", *cfg_args(ck, "network.num_blocks=2", "paths.run_dir=runs/eval2"))
    assert bad.exit_code == EXIT_CONFIG
    assert "num_blocks: checkpoint=8 config=2" in bad.output
    assert "trunk_width: checkpoint=4 config=8" in bad.output

    res = run("inspect", *cfg_args(ck, "network.num_blocks=8", "network.trunk_width=4", "paths.run_dir=runs/insp"))
    assert res.exit_code == 0, res.output
    pngs = sorted((workdir / "runs" / "insp" / "inspect").glob("*.png"))
    assert [p.name.split("_qp22_")[1] for p in pngs] == ["conv_17.png", "conv_in.png", "rb_4.png"]
    for p in pngs:
        with Image.open(p) as img:
            assert img.mode == "L" and img.size == (32, 32)

    res = run("inspect", *cfg_args(ck, "network.num_blocks=8", "network.trunk_width=4", "paths.run_dir=runs/i2",
                                   "inspect.layers=[conv_99]"))
    assert res.exit_code == EXIT_CONFIG and "valid ids" in res.output


def test_eval_null_identity_smoke(workdir):
    run("prepare", *cfg_args("degrader.kind=null", "degrader.qps=[0]", "paths.data_dir=clean"))
    run("train", *cfg_args("paths.data_dir=clean", "arm.qps=[0]", "degrader.qps=[0]", "schedule.total_epochs=1",
                           "paths.run_dir=runs/t"))
    res = run("eval", *cfg_args("paths.data_dir=clean", "degrader.qps=[0]", "paths.run_dir=runs/e",
                                "paths.checkpoint=runs/t/checkpoints/last.ckpt", "eval.format=csv"))
    assert res.exit_code == 0, res.output
    rows = [r for r in csv.DictReader(res.output.splitlines()) if r["image_id"] != "mean"]
    assert rows and all(r["d_psnr"] != "" for r in rows)


def _measurements(path, offset=0.0):
    rng = np.random.default_rng(0)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dataset", "sequence", "method", "qp", "rate", "sr_psnr", "qe_psnr"])
        for seq in ("s1", "s2"):
            base = rng.uniform(30, 32)
            for method, gain in (("test", offset), ("reference", 0.0), ("anchor", -1.0)):
                for i, qp in enumerate((37, 32, 27, 22)):
                    rate = 100 * 2 ** i
                    w.writerow(["A", seq, method, qp, rate, base + 2 * i + gain, base + 3 + 2 * i + gain])


def test_bdrate_identical_curves_zero(workdir):
    _measurements(workdir / "m.csv")
    res = run("bdrate", *cfg_args("bdrate.measurements=m.csv", "paths.run_dir=runs/bd"))
    assert res.exit_code == 0, res.output
    rows = list(csv.DictReader((workdir / "runs" / "bd" / "bdrate.csv").read_text().splitlines()))
    assert len(rows) == 4
    assert all(float(r["bd_rate"]) == 0.0 for r in rows)
    assert all(float(r["bd_rate_vs_anchor"]) < 0 for r in rows)
    assert "Average" in res.output and "|" in res.output  # SSIM columns absent
    assert (workdir / "runs" / "bd" / "rd_A_s1.png").is_file()


def test_bdrate_missing_method(workdir):
    _measurements(workdir / "m.csv")
    res = run("bdrate", *cfg_args("bdrate.measurements=m.csv", "bdrate.reference=sequential"))
    assert res.exit_code == EXIT_DATA and "sequential" in res.output


def test_locked_run_dir(workdir):
    run("prepare", *cfg_args())
    (workdir / "runs" / "train").mkdir(parents=True)
    with FileLock(str(workdir / "runs" / "train" / ".lock")):
        res = run("train", *cfg_args())
    assert res.exit_code == EXIT_LOCKED
