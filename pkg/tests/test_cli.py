from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from densevos import cli, data

from conftest import write_toy_dataset


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("cli")
    manifests = write_toy_dataset(root / "raw", n_clips=3, n_frames=7, size=32)
    data.save_manifest(root / "raw" / "manifest.json", manifests)
    return root


def _run(capsys, argv: list[str]) -> tuple[int, str, str]:
    rc = cli.main(argv)
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


def test_bank_synth_split_pipeline(toy_root, capsys):
    manifest = str(toy_root / "raw" / "manifest.json")
    bank_dir = str(toy_root / "bank")

    rc, out, _ = _run(capsys, ["bank", "--dataset", manifest, "--out", bank_dir,
                               "--frames-per-clip", "2", "--seed", "1"])
    assert rc == 0
    info = json.loads(out)
    assert info["real"] == 6  # one object per frame, 2 frames x 3 clips
    assert (toy_root / "bank" / "real" / "cutout_0000.png").exists()

    synth_dir = str(toy_root / "synth")
    rc, out, _ = _run(capsys, [
        "synth", "--backgrounds", manifest, "--bank", bank_dir,
        "--out", synth_dir, "--n-clips", "4", "--canvas", "24",
        "--clip-length", "4", "--n-real", "2,3", "--n-fake", "1,1",
        "--speed", "0,1", "--seed", "3"])
    assert rc == 0
    clips = data.load_manifest(json.loads(out)["manifest"])
    assert len(clips) == 4
    assert all(c.num_frames == 4 and c.has_masks for c in clips)
    frame = data.load_frame(clips[0].frame_paths[0])
    assert frame.shape == (24, 24, 3)

    rc, out, _ = _run(capsys, ["split", "--manifest", manifest,
                               "--out", str(toy_root / "splits"),
                               "--fractions", "0.4,0.3,0.3", "--seed", "0"])
    assert rc == 0
    counts = json.loads(out)
    assert (counts["train"], counts["valid"], counts["test"]) == (1, 1, 1)
    assert len(data.load_manifest(toy_root / "splits" / "valid.json")) == 1


def _write_config(root: Path) -> Path:
    cfg = {
        "network": {"tau": 2, "input_size": 16, "channels": [8, 16],
                    "gn_groups": 8, "timesteps": 50},
        "train_phase1": {"phase": "synthetic", "epochs": 1, "batch_size": 4,
                         "lr": 1e-3, "seed": 0,
                         "augment": {"out_size": 16, "crop_range": [20, 28]}},
        "train_phase2": {"phase": "weak", "weight_decay": 0.0, "epochs": 1,
                         "batch_size": 4, "lr": 1e-4, "seed": 1,
                         "augment": {"out_size": 16, "crop_range": [20, 28]}},
        "data": {"synthetic_manifest": "raw/manifest.json",
                 "weak_manifest": "raw/manifest.json",
                 "val_manifest": "raw/manifest.json",
                 "out_dir": "run"},
    }
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_eval_predict_pipeline(toy_root, capsys):
    cfg_path = _write_config(toy_root)
    run_dir = toy_root / "run"

    rc, out, _ = _run(capsys, ["train", "--config", str(cfg_path), "--phase", "1"])
    assert rc == 0
    best = json.loads(out)["best_checkpoint"]
    assert best.endswith("phase1_best.ckpt") and Path(best).exists()
    rows = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 1 and rows[0]["phase"] == 1 and "val_dice" in rows[0]

    rc, out, _ = _run(capsys, ["train", "--config", str(cfg_path), "--phase", "2"])
    assert rc == 0
    assert (run_dir / "phase2_best.ckpt").exists()

    report_path = toy_root / "report.json"
    rc, out, _ = _run(capsys, [
        "eval", "--ckpt", str(run_dir / "phase1_best.ckpt"),
        "--dataset", str(toy_root / "raw" / "manifest.json"),
        "--per-video", "--out", str(report_path)])
    assert rc == 0
    assert "all" in out and "clip0" in out
    payload = json.loads(report_path.read_text())
    assert [rep["scope"] for rep in payload] == ["dataset", "per_video"]
    assert len(payload[1]["rows"]) == 3
    assert payload[0]["rows"][0]["n_samples"] == 15  # 3 clips x 5 windows

    pred_dir = toy_root / "pred"
    rc, out, _ = _run(capsys, [
        "predict", "--ckpt", str(run_dir / "phase1_best.ckpt"),
        "--sample", str(toy_root / "raw" / "clips" / "clip0"),
        "--out", str(pred_dir)])
    assert rc == 0
    paths = json.loads(out)
    assert set(paths) == {"mask", "recon", "overlay"}
    for p in paths.values():
        assert Path(p).exists()
    mask = data.load_mask(paths["mask"])
    assert mask.shape == (16, 16) and set(np.unique(mask)) <= {0, 1}


def test_cli_emits_json_error_record(toy_root, capsys):
    rc, _, err = _run(capsys, ["eval", "--ckpt", "/nonexistent.ckpt",
                               "--dataset", str(toy_root / "raw" / "manifest.json")])
    assert rc == 1
    record = json.loads(err.strip().splitlines()[-1])
    assert set(record) == {"error", "message"}

    rc, _, err = _run(capsys, ["split", "--manifest",
                               str(toy_root / "raw" / "manifest.json"),
                               "--out", str(toy_root / "bad"),
                               "--fractions", "0.5,0.6,0.2"])
    assert rc == 1
    record = json.loads(err.strip().splitlines()[-1])
    assert record["error"] == "ValueError"


def test_train_rejects_wrong_phase_config(toy_root, capsys):
    cfg_path = _write_config(toy_root)
    raw = json.loads(cfg_path.read_text())
    raw["train_phase2"]["weight_decay"] = 0.01
    bad = toy_root / "bad_config.json"
    bad.write_text(json.dumps(raw))
    rc, _, err = _run(capsys, ["train", "--config", str(bad), "--phase", "2"])
    assert rc == 1
    assert json.loads(err.strip().splitlines()[-1])["error"] == "ValueError"
