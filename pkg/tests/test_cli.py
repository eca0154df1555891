import json
from pathlib import Path

import pytest

from navseg.cli import main, train_settings_line
from navseg.config import make_profile
from navseg.data import load_manifest
from navseg.metrics import EXISTENCE_WIRE, PredictionRecord, save_predictions

TINY_TRAIN_SETS = [
    "--set", "encoder.dim=16",
    "--set", "encoder.vocab_size=128",
    "--set", "encoder.max_tokens=8",
    "--set", "model.mlp_hidden=32",
    "--set", "model.patch_w=12",
    "--set", "model.patch_h=12",
    "--set", "model.patch_encode_size=12",
    "--set", "model.num_patches=2",
    "--set", "train.epochs=6",
    "--set", "train.warmup_epochs=1",
    "--set", "train.decay_epoch=4",
    "--set", "train.val_every=3",
    "--set", "train.batch_size=4",
    "--set", "eval.raster_width=32",
    "--set", "eval.raster_height=32",
    "--set", "data.width=32",
    "--set", "data.height=32",
]


def run_cli(*argv):
    return main(list(argv))


def find_run_dir(root: Path, command: str) -> Path:
    dirs = [d for d in root.iterdir() if d.name.startswith(command)]
    assert len(dirs) == 1, f"expected one {command} run dir, found {dirs}"
    return dirs[0]


def build_tiny_dataset(tmp_path: Path, seed=1) -> Path:
    out = tmp_path / "data"
    code = run_cli(
        "build-dataset", "--synthetic", "--counts", "2,2,2", "--val-counts", "1,1,1",
        "--test-counts", "1,1,1", "--seed", str(seed), "--output-dir", str(out),
        *TINY_TRAIN_SETS,
    )
    assert code == 0
    return find_run_dir(out, "build-dataset") / "manifest.jsonl"


def train_tiny_checkpoint(tmp_path: Path, manifest: Path) -> Path:
    out = tmp_path / "trainrun"
    code = run_cli(
        "train", "--manifest", str(manifest), "--seed", "1",
        "--output-dir", str(out), *TINY_TRAIN_SETS,
    )
    assert code == 0
    return find_run_dir(out, "train") / "checkpoint.pt"


# ---------------------------------------------------------------------------
# build-dataset
# ---------------------------------------------------------------------------

def test_build_dataset_synthetic_counts(tmp_path, capsys):
    out = tmp_path / "out"
    code = run_cli(
        "build-dataset", "--synthetic", "--counts", "10,10,10", "--seed", "1",
        "--output-dir", str(out),
    )
    assert code == 0
    captured = capsys.readouterr().out
    assert "train" in captured
    manifest = load_manifest(find_run_dir(out, "build-dataset") / "manifest.jsonl")
    assert len(manifest.samples) == 30


def test_build_dataset_rerun_is_byte_identical(tmp_path):
    m1 = build_tiny_dataset(tmp_path / "a", seed=9)
    m2 = build_tiny_dataset(tmp_path / "b", seed=9)
    assert m1.read_bytes() == m2.read_bytes()


def test_build_dataset_real_requires_split_lists(tmp_path):
    src = tmp_path / "talk2car.jsonl"
    src.write_text(json.dumps({"id": "t1", "image": "img.png", "instruction": "go", "polygons": [[0.1, 0.1, 0.3, 0.1, 0.2, 0.3]]}) + "\n")
    empty_splits = tmp_path / "splits"
    empty_splits.mkdir()
    code = run_cli(
        "build-dataset", "--talk2car", str(src), "--split-lists", str(empty_splits),
        "--output-dir", str(tmp_path / "out"),
    )
    assert code == 1  # missing split list files


def test_build_dataset_real_small_build_fails_count_check(tmp_path):
    src_dir = tmp_path
    records = []
    for i in range(4):
        records.append(
            {
                "id": f"t{i}",
                "image": f"frames/t{i}.png",
                "instruction": f"stop near the {'red' if i % 2 else 'blue'} cone {i}",
                "polygons": [[0.1, 0.1, 0.3, 0.1, 0.3, 0.3, 0.1, 0.3]],
            }
        )
    (src_dir / "talk2car.jsonl").write_text("\n".join(json.dumps(r) for r in records) + "\n")
    frames = src_dir / "frames"
    frames.mkdir()
    from PIL import Image
    import numpy as np

    for i in range(4):
        Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(frames / f"t{i}.png")
    splits = src_dir / "splits"
    splits.mkdir()
    (splits / "train.txt").write_text("t0\nt1\n")
    (splits / "val.txt").write_text("t2\n")
    (splits / "test.txt").write_text("t3\n")
    out = tmp_path / "out"
    code = run_cli(
        "build-dataset", "--talk2car", str(src_dir / "talk2car.jsonl"),
        "--split-lists", str(splits), "--verifier", "stub", "--output-dir", str(out),
    )
    assert code == 1  # build succeeds but the benchmark count check must fail
    run_dir = find_run_dir(out, "build-dataset")
    assert (run_dir / "manifest.jsonl").exists()
    assert (run_dir / "provenance.jsonl").exists()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_writes_checkpoint_logs_and_cache(tmp_path, capsys):
    manifest = build_tiny_dataset(tmp_path)
    out = tmp_path / "trainrun"
    code = run_cli(
        "train", "--manifest", str(manifest), "--seed", "1", "--output-dir", str(out),
        *TINY_TRAIN_SETS,
    )
    assert code == 0
    run_dir = find_run_dir(out, "train")
    assert (run_dir / "checkpoint.pt").exists()
    assert (run_dir / "layout_cache.json").exists()
    assert (run_dir / "run_config.json").exists()
    log_lines = (run_dir / "training_log.jsonl").read_text().splitlines()
    first = json.loads(log_lines[0])
    assert {"epoch", "step", "ce", "point", "total", "lr"} <= set(first)
    assert any("val_msiou" in json.loads(l) for l in log_lines)
    assert "epochs=6" in capsys.readouterr().out


def test_train_paper_profile_echo():
    line = train_settings_line(make_profile("paper"))
    assert "epochs=100" in line
    assert "batch=384" in line
    assert "lr=0.0001" in line
    assert "lambda_pt=3" in line
    assert "betas=0.9,0.98" in line


def test_train_missing_manifest(tmp_path):
    code = run_cli("train", "--manifest", str(tmp_path / "nope.jsonl"), "--output-dir", str(tmp_path))
    assert code == 1


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_ground_truth_self_evaluation(tmp_path, capsys):
    manifest_path = build_tiny_dataset(tmp_path)
    manifest = load_manifest(manifest_path)
    preds = [
        PredictionRecord(s.id, s.existence, list(s.gt_polygons))
        for s in manifest.split("test")
    ]
    pred_path = tmp_path / "preds.jsonl"
    save_predictions(preds, pred_path)
    out = tmp_path / "evalrun"
    code = run_cli(
        "eval", "--manifest", str(manifest_path), "--predictions", str(pred_path),
        "--split", "test", "--raster", "64x64", "--output-dir", str(out),
    )
    assert code == 0
    report = json.loads((find_run_dir(out, "eval") / "report.json").read_text())
    assert report["msiou"] == 1.0
    assert report["accuracy"] == 1.0
    assert all(v == 1.0 for v in report["p_at_k"].values())
    assert "msIoU" in capsys.readouterr().out


def test_eval_msiou_k_echoed_in_report(tmp_path):
    manifest_path = build_tiny_dataset(tmp_path)
    manifest = load_manifest(manifest_path)
    preds = [PredictionRecord(s.id, s.existence, list(s.gt_polygons)) for s in manifest.split("test")]
    pred_path = tmp_path / "preds.jsonl"
    save_predictions(preds, pred_path)
    out = tmp_path / "evalrun"
    code = run_cli(
        "eval", "--manifest", str(manifest_path), "--predictions", str(pred_path),
        "--split", "test", "--msiou-K", "0.2", "--raster", "32x32", "--output-dir", str(out),
    )
    assert code == 0
    report = json.loads((find_run_dir(out, "eval") / "report.json").read_text())
    assert report["msiou_k"] == 0.2
    assert report["config"]["eval.msiou_k"] == 0.2


def test_eval_id_mismatch_exits_nonzero(tmp_path):
    manifest_path = build_tiny_dataset(tmp_path)
    pred_path = tmp_path / "preds.jsonl"
    from navseg.metrics import ExistenceLabel

    save_predictions([PredictionRecord("ghost", ExistenceLabel.NO_TARGET, [])], pred_path)
    code = run_cli(
        "eval", "--manifest", str(manifest_path), "--predictions", str(pred_path),
        "--split", "test", "--output-dir", str(tmp_path / "out"),
    )
    assert code == 1


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def test_infer_single_image(tmp_path):
    manifest = build_tiny_dataset(tmp_path)
    checkpoint = train_tiny_checkpoint(tmp_path, manifest)
    from navseg.data.synthetic import SceneSpec

    ref = SceneSpec(32, 32, [("red", 0.3, 0.4, 0.1, 0.1)]).encode()
    out = tmp_path / "inferrun"
    code = run_cli(
        "infer", "--checkpoint", str(checkpoint), "--image", ref,
        "--instruction", "stop left of the red box", "--output-dir", str(out),
        "--export-masks",
    )
    assert code == 0
    run_dir = find_run_dir(out, "infer")
    lines = (run_dir / "predictions.jsonl").read_text().splitlines()
    assert len(lines) == 1
    record = json.loads(lines[0])
    assert record["id"] == "input-0"
    assert record["existence"] in set(EXISTENCE_WIRE.values())
    assert (run_dir / "masks" / "input-0.pgm").exists()


def test_infer_manifest_split(tmp_path):
    manifest = build_tiny_dataset(tmp_path)
    checkpoint = train_tiny_checkpoint(tmp_path, manifest)
    out = tmp_path / "inferrun"
    code = run_cli(
        "infer", "--checkpoint", str(checkpoint), "--manifest", str(manifest),
        "--split", "test", "--output-dir", str(out),
    )
    assert code == 0
    lines = (find_run_dir(out, "infer") / "predictions.jsonl").read_text().splitlines()
    assert len(lines) == 3


def test_infer_checkpoint_override_mismatch(tmp_path):
    manifest = build_tiny_dataset(tmp_path)
    checkpoint = train_tiny_checkpoint(tmp_path, manifest)
    code = run_cli(
        "infer", "--checkpoint", str(checkpoint), "--manifest", str(manifest),
        "--output-dir", str(tmp_path / "x"), "--set", "encoder.dim=999",
    )
    assert code == 1


def test_infer_requires_input(tmp_path):
    manifest = build_tiny_dataset(tmp_path)
    checkpoint = train_tiny_checkpoint(tmp_path, manifest)
    code = run_cli("infer", "--checkpoint", str(checkpoint), "--output-dir", str(tmp_path / "x"))
    assert code == 1


# ---------------------------------------------------------------------------
# bench-speed
# ---------------------------------------------------------------------------

def test_bench_speed_report(tmp_path, capsys):
    manifest = build_tiny_dataset(tmp_path)
    checkpoint = train_tiny_checkpoint(tmp_path, manifest)
    out = tmp_path / "bench"
    code = run_cli(
        "bench-speed", "--checkpoint", str(checkpoint), "--manifest", str(manifest),
        "--warmup", "2", "--runs", "5", "--output-dir", str(out), *TINY_TRAIN_SETS,
    )
    assert code == 0
    doc = json.loads((find_run_dir(out, "bench-speed") / "speed_report.json").read_text())
    assert doc["timed_runs"] == 5
    assert doc["ms_per_sample_mean"] > 0
    assert "platform" in doc["environment"]
    assert "ms/sample" in capsys.readouterr().out


def test_bench_speed_zero_runs_rejected(tmp_path):
    manifest = build_tiny_dataset(tmp_path)
    checkpoint = train_tiny_checkpoint(tmp_path, manifest)
    code = run_cli(
        "bench-speed", "--checkpoint", str(checkpoint), "--runs", "0",
        "--output-dir", str(tmp_path / "x"),
    )
    assert code == 1
