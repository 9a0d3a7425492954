import json
import subprocess
import sys

import numpy as np
import pytest

from ccdm.checkpoint import read_header
from ccdm.cli import main

SMALL = {"preset": "toy", "train": {"T": 6, "epochs": 2, "batch_size": 4},
         "model": {"levels": 1, "base_channels": 4, "embed_dim": 8}}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "train.json"
    cfg.write_text(json.dumps(SMALL))
    assert run("make-data", "--out", root / "data", "--count", 6, "--seed", 1) == 0
    assert run("train", "--config", cfg, "--data", root / "data", "--out", root / "run") == 0
    assert run("sample", "--checkpoint", root / "run" / "final.ckpt", "--input", root / "data",
               "--out", root / "samples", "--samples", 4, "--stride", 2, "--seed", 3) == 0
    assert run("eval", "--pred", root / "samples", "--gt", root / "data", "--out", root / "eval",
               "--n", 4) == 0
    return root


def test_make_data_layout(tmp_path):
    assert run("make-data", "--out", tmp_path, "--count", 1) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["examples"]) == 1
    assert len(list((tmp_path / "images").glob("*.pgm"))) == 1
    assert (tmp_path / "run_manifest.json").exists()


def test_make_data_rejects_invalid_spec(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"modes": [{"probability": "1/2", "radius": 1.0}]}))
    assert run("make-data", "--spec", spec, "--out", tmp_path / "d") == 1
    assert "sum to 1" in capsys.readouterr().err


def test_train_outputs(pipeline):
    run_dir = pipeline / "run"
    for name in ("final.ckpt", "run_log.csv", "loss.png", "config.json", "run_manifest.json"):
        assert (run_dir / name).exists(), name
    meta, _, _ = read_header(run_dir / "final.ckpt")
    assert meta["step"] == 4 and meta["T"] == 6
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    assert manifest["config"]["train"]["epochs"] == 2
    assert manifest["config"]["model"]["base_channels"] == 4
    assert {"git", "started", "finished", "seed", "artifacts", "metrics"} <= set(manifest)


def test_flags_override_config(tmp_path, pipeline):
    cfg = pipeline / "train.json"
    assert run("train", "--config", cfg, "--data", pipeline / "data", "--out", tmp_path,
               "--epochs", 1, "--seed", 5) == 0
    effective = json.loads((tmp_path / "config.json").read_text())["train"]
    assert effective["epochs"] == 1 and effective["seed"] == 5 and effective["T"] == 6


def test_resume_continues_step_counter(tmp_path, pipeline):
    cfg = pipeline / "train.json"
    assert run("train", "--config", cfg, "--data", pipeline / "data", "--out", tmp_path,
               "--resume", pipeline / "run" / "final.ckpt", "--epochs", 3) == 0
    assert read_header(tmp_path / "final.ckpt")[0]["step"] == 6


def test_train_missing_data(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 1
    assert "not found" in capsys.readouterr().err


def test_sample_outputs(pipeline):
    index = json.loads((pipeline / "samples" / "samples.json").read_text())
    assert len(index["images"]) == 6
    first = index["images"][0]
    assert len(first["samples"]) == 4
    probs = np.load(pipeline / "samples" / first["probs"])
    assert probs.shape == (4, 2, 8, 8)
    assert (pipeline / "samples" / "samples.png").exists()


def test_sample_single_image_and_one_sample(tmp_path, pipeline):
    image = pipeline / "data" / "images" / "ex00000.pgm"
    assert run("sample", "--checkpoint", pipeline / "run" / "final.ckpt", "--input", image,
               "--out", tmp_path, "--samples", 1) == 0
    assert len(list((tmp_path / "ex00000").glob("*.pgm"))) == 1


def test_sample_rejects_large_stride(tmp_path, pipeline, capsys):
    assert run("sample", "--checkpoint", pipeline / "run" / "final.ckpt", "--input", pipeline / "data",
               "--out", tmp_path, "--stride", 7) == 1
    assert "exceeds" in capsys.readouterr().err
    assert not (tmp_path / "samples.json").exists()


def test_sample_rejects_mismatched_grid(tmp_path, pipeline, capsys):
    # levels = 1 accepts any size, so build a deeper checkpoint for this check
    from ccdm.denoiser import DenoiserConfig, ToyUNet
    from ccdm.pgm import write_image
    from ccdm.diffusion import cosine_schedule
    from ccdm.trainer import TrainState

    TrainState.initial(ToyUNet(DenoiserConfig(levels=3)), cosine_schedule(4)).save(tmp_path / "deep.ckpt")
    write_image(tmp_path / "odd.pgm", np.zeros((1, 6, 6)))
    assert run("sample", "--checkpoint", tmp_path / "deep.ckpt", "--input", tmp_path / "odd.pgm",
               "--out", tmp_path / "o") == 1
    assert "divisible" in capsys.readouterr().err


def test_eval_outputs(pipeline):
    report = json.loads((pipeline / "eval" / "report.json").read_text())
    assert report["n_samples"] == 4 and len(report["per_image"]) == 6
    assert report["per_image"][0]["seed"] == [3, 0]
    rows = (pipeline / "eval" / "report.csv").read_text().splitlines()
    assert rows[0] == "image_id,n,seed,ged,hm_iou,diversity,miou" and len(rows) == 7
    assert (pipeline / "eval" / "report.png").exists()


def test_eval_identical_dirs(tmp_path, pipeline):
    assert run("eval", "--pred", pipeline / "data", "--gt", pipeline / "data", "--out", tmp_path,
               "--n", 4, "--metrics", "ged,hmiou") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["ged"] == 0.0 and report["hm_iou"] == 1.0


def test_eval_hand_case(tmp_path):
    from ccdm.data import AnnotatedExample, write_dataset
    from ccdm.diffusion import LabelMap

    a = LabelMap(np.array([[2, 2], [1, 1]]), 2)
    b = LabelMap(np.array([[1, 1], [2, 2]]), 2)
    write_dataset(tmp_path / "gt", [AnnotatedExample("x", np.zeros((1, 2, 2)), [a, b])])
    write_dataset(tmp_path / "pred", [AnnotatedExample("x", np.zeros((1, 2, 2)), [a, a])])
    assert run("eval", "--pred", tmp_path / "pred", "--gt", tmp_path / "gt", "--out", tmp_path / "o",
               "--n", 2, "--metrics", "ged,hmiou") == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["ged"] == 0.5 and report["hm_iou"] == 0.5


def test_eval_errors(tmp_path, pipeline, capsys):
    assert run("eval", "--pred", pipeline / "samples", "--gt", pipeline / "data", "--out", tmp_path,
               "--metrics", "ged,bogus") == 1
    assert "bogus" in capsys.readouterr().err
    assert run("eval", "--pred", pipeline / "samples", "--gt", pipeline / "data", "--out", tmp_path,
               "--n", 16) == 1
    assert "--n 16" in capsys.readouterr().err


def test_inspect_schedule(capsys, tmp_path):
    assert run("inspect-schedule", "--T", 250) == 0
    out = capsys.readouterr().out
    tv = float(out.strip().splitlines()[-1].split(":")[-1])
    assert tv < 1e-3
    assert run("inspect-schedule", "--T", 1, "--csv", "--plot", tmp_path / "s.png") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "t,beta,alpha_bar"
    assert len([ln for ln in lines[1:] if not ln.startswith("#")]) == 1
    assert (tmp_path / "s.png").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ccdm", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()


def test_repeated_runs_are_bitwise_identical(tmp_path, pipeline):
    import shutil

    cfg = pipeline / "train.json"
    d = tmp_path / "w"
    snapshots = []
    for _ in range(2):
        shutil.rmtree(d, ignore_errors=True)
        assert run("make-data", "--out", d / "data", "--count", 4, "--seed", 2) == 0
        assert run("train", "--config", cfg, "--data", d / "data", "--out", d / "run") == 0
        assert run("sample", "--checkpoint", d / "run" / "final.ckpt", "--input", d / "data",
                   "--out", d / "s", "--samples", 3, "--seed", 1) == 0
        assert run("eval", "--pred", d / "s", "--gt", d / "data", "--out", d / "e", "--n", 3) == 0
        # run manifests carry wall-clock timestamps; everything else must match
        snapshots.append({p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*"))
                          if p.is_file() and p.name != "run_manifest.json"})
    assert len(snapshots[0]) > 20
    assert snapshots[0].keys() == snapshots[1].keys()
    for rel in snapshots[0]:
        assert snapshots[0][rel] == snapshots[1][rel], rel
