"""Command-line entry point: dataset construction, training, evaluation,
inference, and inference-speed measurement, all with file outputs.

Every command resolves a run configuration (profile + optional config file +
--set overrides), creates a deterministic run directory under --output-dir,
and echoes the effective configuration into `run_config.json` so results are
reproducible from their artifacts alone.

Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import random
import statistics
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, config_echo, load_config
from .data import (
    HttpVerifier,
    KeywordStubVerifier,
    Manifest,
    ManifestError,
    ProvenanceLog,
    Sample,
    ToyDatasetConfig,
    TrackAnnotation,
    build_no_target_samples,
    crop_wide_frame,
    fill_template,
    generate_toy_dataset,
    load_image,
    load_manifest,
    save_manifest,
    select_multi_target_frames,
)
from .data.tracing import trace_raster_to_polygons
from .data.verifier import VerifierTransportError
from .encoders import InvalidInstructionError
from .geometry import InvalidPolygonError, Polygon, rasterize, write_mask_pgm
from .metrics import (
    EXISTENCE_WIRE,
    EvalConfig,
    InputMismatchError,
    PredictionRecord,
    evaluate,
    load_predictions,
    save_predictions,
    save_report,
)
from .model import GroundingModel, PatchLayout, decode_prediction, load_checkpoint, save_checkpoint
from .training import (
    DivergenceError,
    load_layout_cache,
    save_layout_cache,
    train,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

VALIDATION_ERRORS = (
    ConfigError,
    ManifestError,
    InputMismatchError,
    InvalidPolygonError,
    InvalidInstructionError,
    FileNotFoundError,
    ValueError,
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profile", default="desk", help="configuration profile: paper or desk")
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config field (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None, help="run seed (overrides profile)")
    parser.add_argument("--output-dir", default=None, help="root directory for run outputs")


def _resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    return load_config(profile=args.profile, config_file=args.config, overrides=overrides)


def _run_dir(config: RunConfig, command: str) -> Path:
    echo = config_echo(config)
    digest = hashlib.sha256(json.dumps(echo, sort_keys=True).encode()).hexdigest()[:8]
    run_dir = Path(config.output_dir) / f"{command}-{config.profile}-seed{config.seed}-{digest}"
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run_dir


def _parse_counts(raw: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"--counts expects no,single,multi; got {raw!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def _print_counts(manifest: Manifest) -> None:
    counts = manifest.counts()
    print(f"{'split':<8}{'total':>8}{'no':>8}{'single':>8}{'multi':>8}")
    for split, row in counts.items():
        print(
            f"{split:<8}{row['total']:>8}{row['no_target']:>8}"
            f"{row['single_target']:>8}{row['multi_target']:>8}"
        )


# ---------------------------------------------------------------------------
# build-dataset
# ---------------------------------------------------------------------------

def cmd_build_dataset(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(config, "build-dataset")
    if args.synthetic:
        counts = {"train": _parse_counts(args.counts)}
        if args.val_counts:
            counts["val"] = _parse_counts(args.val_counts)
        if args.test_counts:
            counts["test"] = _parse_counts(args.test_counts)
        toy = ToyDatasetConfig(width=config.data.width, height=config.data.height, counts=counts)
        manifest = generate_toy_dataset(toy, seed=config.seed)
    else:
        manifest = _build_real_dataset(args, config, run_dir)
    manifest_path = run_dir / "manifest.jsonl"
    save_manifest(manifest, manifest_path)
    _print_counts(manifest)
    print(f"manifest: {manifest_path}")
    if not args.synthetic:
        manifest.check_benchmark_counts()
    return EXIT_OK


def _load_split_lists(split_dir: Path) -> dict[str, str]:
    assignment: dict[str, str] = {}
    for split in ("train", "val", "test"):
        path = split_dir / f"{split}.txt"
        if not path.exists():
            raise ConfigError(f"missing split list {path}")
        for line in path.read_text().splitlines():
            line = line.strip()
            if line:
                assignment[line] = split
    return assignment


def _verifier_from(name: str):
    if name == "stub":
        return KeywordStubVerifier()
    if name == "http":
        return HttpVerifier()
    raise ConfigError(f"unknown verifier {name!r}; choose stub or http")


def _build_real_dataset(args, config: RunConfig, run_dir: Path) -> Manifest:
    if not args.talk2car or not args.split_lists:
        raise ConfigError("real builds need --talk2car and --split-lists (or use --synthetic)")
    split_of = _load_split_lists(Path(args.split_lists))
    provenance = ProvenanceLog(run_dir / "provenance.jsonl")
    rng = random.Random(config.seed)

    samples: list[Sample] = []
    source_dir = Path(args.talk2car).parent
    with open(args.talk2car, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            sid = str(rec["id"])
            if sid not in split_of:
                raise ManifestError(f"sample {sid} appears in no split list")
            if "polygons" in rec:
                polys = [Polygon.from_flat(c) for c in rec["polygons"]]
            elif "mask" in rec:
                from PIL import Image

                with Image.open(source_dir / rec["mask"]) as im:
                    bits = np.asarray(im.convert("L")) > 127
                polys = trace_raster_to_polygons(bits, tolerance=args.trace_tolerance)
            else:
                raise ManifestError(f"sample {sid} has neither polygons nor mask")
            samples.append(
                Sample.build(
                    id=sid,
                    image_ref=rec["image"],
                    instruction=rec["instruction"],
                    gt_polygons=polys,
                    landmark_boxes=[tuple(b) for b in rec.get("landmark_boxes", [])] or None,
                    source="talk2car",
                    split=split_of[sid],
                )
            )
            provenance.append(sid, "ingest", None, 0)

    verifier = _verifier_from(args.verifier)
    for split in ("train", "val", "test"):
        split_samples = [s for s in samples if s.split == split]
        if len(split_samples) >= 2:
            accepted = build_no_target_samples(
                split_samples, verifier, rng_seed=config.seed, max_retries=args.max_retries,
                log=provenance,
            )
            samples.extend(accepted)

    if args.kitti:
        samples.extend(_build_multi_target(args, config, run_dir, split_of, provenance, rng))

    manifest = Manifest(samples=samples, provenance=provenance.entries)
    return manifest


def _build_multi_target(args, config, run_dir, split_of, provenance, rng) -> list[Sample]:
    if not args.templates:
        raise ConfigError("--kitti requires --templates")
    templates = [t for t in Path(args.templates).read_text().splitlines() if t.strip()]
    if not templates:
        raise ConfigError(f"no templates in {args.templates}")
    annotations = []
    with open(args.kitti, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                annotations.append(
                    TrackAnnotation(
                        video_id=str(rec["video_id"]),
                        frame_index=int(rec["frame_index"]),
                        noun_phrase=rec["noun_phrase"],
                        object_id=str(rec["object_id"]),
                        bbox=tuple(rec["bbox"]),
                    )
                )
    selected = select_multi_target_frames(annotations)
    boxes_by_frame: dict[tuple[str, int], dict[str, list]] = {}
    for ann in annotations:
        boxes_by_frame.setdefault((ann.video_id, ann.frame_index), {}).setdefault(
            ann.noun_phrase, []
        ).append(ann.bbox)

    multi_annotations = {}
    if args.multi_annotations:
        with open(args.multi_annotations, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rec = json.loads(line)
                    key = (str(rec["video_id"]), int(rec["frame_index"]), rec["noun_phrase"])
                    multi_annotations[key] = [Polygon.from_flat(c) for c in rec["polygons"]]

    review_rows = []
    out_samples = []
    images_dir = run_dir / "images"
    for video_id, frame, phrase, object_ids in selected:
        sid = f"kitti-{video_id}-{frame:06d}-{phrase.replace(' ', '_')}"
        if sid not in split_of:
            raise ManifestError(f"sample {sid} appears in no split list")
        frame_path = Path(args.kitti_frames) / video_id / f"{frame:06d}.png"
        if not frame_path.exists():
            raise ManifestError(f"sample {sid}: frame {frame_path} not found")
        from PIL import Image

        with Image.open(frame_path) as im:
            wide = np.transpose(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0, (2, 0, 1))
        cropped, remapped = crop_wide_frame(wide, boxes_by_frame[(video_id, frame)][phrase])
        out_path = images_dir / video_id / f"{frame:06d}.png"
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray((np.transpose(cropped, (1, 2, 0)) * 255).astype(np.uint8)).save(out_path)
        instruction = fill_template(rng.choice(templates), phrase)
        polys = multi_annotations.get((video_id, frame, phrase))
        if polys is None:
            review_rows.append({"id": sid, "image": str(out_path), "instruction": instruction})
            provenance.append(sid, "review-export", None, 0)
            continue
        boxes = [(b.x, b.y, b.w, b.h) for b in remapped if b.w * b.h > 0]
        out_samples.append(
            Sample.build(
                id=sid,
                image_ref=str(out_path.relative_to(run_dir)),
                instruction=instruction,
                gt_polygons=polys,
                landmark_boxes=boxes or None,
                source="kitti-v2",
                split=split_of[sid],
            )
        )
        provenance.append(sid, "mine", None, 0)
    if review_rows:
        review_path = run_dir / "review_sheet.jsonl"
        with open(review_path, "w", encoding="utf-8") as fh:
            for row in review_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        print(f"review export: {len(review_rows)} unannotated samples -> {review_path}")
    return out_samples


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def train_settings_line(config: RunConfig) -> str:
    tc = config.train
    return (
        f"profile={config.profile} epochs={tc.epochs} batch={tc.batch_size} "
        f"lr={tc.lr:g} betas={tc.betas[0]},{tc.betas[1]} lambda_pt={tc.lambda_pt:g} "
        f"warmup={tc.warmup_epochs} decay_epoch={tc.decay_epoch} seed={config.seed}"
    )


def cmd_train(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(config, "train")
    manifest = load_manifest(args.manifest)
    base_dir = Path(args.manifest).parent
    train_samples = manifest.split("train")
    val_samples = manifest.split("val") or train_samples
    print(train_settings_line(config))
    torch.manual_seed(config.seed)
    model = GroundingModel(config.model, config.encoder)

    cache_path = Path(args.layout_cache) if args.layout_cache else run_dir / "layout_cache.json"
    layouts = load_layout_cache(cache_path, train_samples)
    result = train(
        model,
        train_samples,
        val_samples,
        config.train,
        config.eval,
        log_path=run_dir / "training_log.jsonl",
        base_dir=base_dir,
        layouts=layouts,
    )
    save_layout_cache(cache_path, train_samples, result.layouts)
    model.load_state_dict(result.best_state)
    checkpoint_path = run_dir / "checkpoint.pt"
    save_checkpoint(
        checkpoint_path,
        model,
        layouts={k: [list(r) for r in v.rects] for k, v in result.layouts.items()},
        history=[asdict(rec) for rec in result.history],
        extra={"config": config_echo(config), "best_epoch": result.best.epoch},
    )
    print(
        f"best epoch {result.best.epoch}: val msIoU {result.best.msiou:.4f}, "
        f"existence accuracy {result.best.accuracy:.4f}"
    )
    print(f"checkpoint: {checkpoint_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _eval_config_from(args, config: RunConfig) -> EvalConfig:
    eval_cfg = config.eval
    if args.msiou_K is not None:
        eval_cfg.msiou_k = args.msiou_K
    if args.p_at_k is not None:
        eval_cfg.p_at_k = tuple(float(p) for p in args.p_at_k.split(",") if p)
    if args.raster is not None:
        try:
            w, h = (int(v) for v in args.raster.lower().split("x"))
        except ValueError:
            raise ConfigError(f"--raster expects WIDTHxHEIGHT, got {args.raster!r}") from None
        eval_cfg.raster_width, eval_cfg.raster_height = w, h
    return eval_cfg


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    eval_cfg = _eval_config_from(args, config)
    run_dir = _run_dir(config, "eval")
    manifest = load_manifest(args.manifest)
    gt = manifest.split(args.split) if args.split != "all" else manifest.samples
    if not gt:
        raise ManifestError(f"no samples in split {args.split!r}")
    predictions = load_predictions(args.predictions)
    report = evaluate(gt, predictions, eval_cfg)
    report_path = run_dir / "report.json"
    save_report(report, report_path)
    header = ["msIoU [%]"] + [f"P@{k:g} [%]" for k in eval_cfg.p_at_k] + ["Acc. [%]"]
    values = (
        [100 * report.msiou]
        + [100 * report.p_at_k[k] for k in eval_cfg.p_at_k]
        + [100 * report.accuracy]
    )
    print("  ".join(f"{h:>12}" for h in header))
    print("  ".join(f"{v:>12.2f}" for v in values))
    print(f"confusion: {report.confusion}  n={report.n}  msIoU-K={report.msiou_k:g}")
    print(f"report: {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _checkpoint_override_mismatch(args, payload) -> None:
    flat = {}
    flat.update({f"encoder.{k}": v for k, v in payload["encoder_config"].items()})
    flat.update({f"model.{k}": v for k, v in payload["model_config"].items()})
    for pair in args.overrides:
        key = pair.split("=", 1)[0].strip()
        if key in flat:
            raw = pair.split("=", 1)[1].strip()
            current = str(flat[key])
            if isinstance(flat[key], (tuple, list)):
                current = ",".join(str(v) for v in flat[key])
            if raw != current:
                raise ConfigError(
                    f"override {pair!r} conflicts with checkpoint value {flat[key]!r}"
                )


def _layouts_from_payload(payload) -> dict[str, PatchLayout]:
    return {
        key: PatchLayout(tuple(tuple(int(v) for v in r) for r in rects))
        for key, rects in payload.get("layouts", {}).items()
    }


def cmd_infer(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(config, "infer")
    model, payload = load_checkpoint(args.checkpoint)
    _checkpoint_override_mismatch(args, payload)
    layouts = _layouts_from_payload(payload)

    if args.image is not None:
        if args.instruction is None:
            raise ConfigError("--image requires --instruction")
        work = [("input-0", args.image, args.instruction, None)]
        base_dir = None
    elif args.manifest is not None:
        manifest = load_manifest(args.manifest)
        base_dir = Path(args.manifest).parent
        picked = manifest.split(args.split) if args.split != "all" else manifest.samples
        work = [(s.id, s.image_ref, s.instruction, s) for s in picked]
    else:
        raise ConfigError("infer needs --manifest or --image + --instruction")

    from .training import _fallback_layout

    records = []
    masks_dir = run_dir / "masks"
    for sid, ref, instruction, _sample in work:
        image = load_image(ref, base_dir)
        size_key = f"{image.shape[2]}x{image.shape[1]}"
        layout = layouts.get(size_key) or _fallback_layout(size_key, model.model_config)
        pred = model.predict(image, instruction, layout)
        label, polys = decode_prediction(pred, model.model_config)
        records.append(PredictionRecord(sid, label, polys))
        if args.export_masks:
            masks_dir.mkdir(parents=True, exist_ok=True)
            mask = rasterize(polys, config.eval.raster_width, config.eval.raster_height)
            write_mask_pgm(mask, masks_dir / f"{sid}.pgm")
    predictions_path = run_dir / "predictions.jsonl"
    save_predictions(records, predictions_path)
    print(f"wrote {len(records)} predictions -> {predictions_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-speed
# ---------------------------------------------------------------------------

def cmd_bench_speed(args) -> int:
    config = _resolve_config(args)
    if args.runs < 1:
        raise ConfigError(f"--runs must be >= 1, got {args.runs}")
    run_dir = _run_dir(config, "bench-speed")
    model, payload = load_checkpoint(args.checkpoint)
    layouts = _layouts_from_payload(payload)
    from .training import _fallback_layout

    if args.manifest:
        manifest = load_manifest(args.manifest)
        base_dir = Path(args.manifest).parent
        pool = [(s.image_ref, s.instruction) for s in manifest.samples]
    else:
        from .data.synthetic import SceneSpec

        spec = SceneSpec(config.data.width, config.data.height, [("red", 0.3, 0.4, 0.1, 0.1)])
        pool = [(spec.encode(), "stop left of the red box")]
        base_dir = None
    if not pool:
        raise ManifestError("no samples to benchmark")

    timings_ms = []
    for i in range(args.warmup + args.runs):
        ref, instruction = pool[i % len(pool)]
        image = load_image(ref, base_dir)
        size_key = f"{image.shape[2]}x{image.shape[1]}"
        layout = layouts.get(size_key) or _fallback_layout(size_key, model.model_config)
        start = time.perf_counter()
        model.predict(image, instruction, layout)
        elapsed = (time.perf_counter() - start) * 1000.0
        if i >= args.warmup:
            timings_ms.append(elapsed)
    mean = statistics.fmean(timings_ms)
    std = statistics.pstdev(timings_ms) if len(timings_ms) > 1 else 0.0
    fingerprint = {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "processor": platform.processor() or platform.machine(),
    }
    doc = {
        "ms_per_sample_mean": mean,
        "ms_per_sample_std": std,
        "warmup_runs": args.warmup,
        "timed_runs": args.runs,
        "environment": fingerprint,
        "note": "informational only; hardware-dependent",
    }
    report_path = run_dir / "speed_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{mean:.2f} +/- {std:.2f} ms/sample over {args.runs} runs ({fingerprint['platform']})")
    print(f"report: {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="navseg",
        description="Language-guided navigable-region segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="construct a benchmark manifest")
    _add_common(p)
    p.add_argument("--synthetic", action="store_true", help="generate procedural toy scenes")
    p.add_argument("--counts", default="10,10,10", help="train counts as no,single,multi")
    p.add_argument("--val-counts", default=None, help="val counts as no,single,multi")
    p.add_argument("--test-counts", default=None, help="test counts as no,single,multi")
    p.add_argument("--talk2car", default=None, help="source manifest (single-target records)")
    p.add_argument("--kitti", default=None, help="track annotations JSONL for multi-target mining")
    p.add_argument("--kitti-frames", default=None, help="directory of wide source frames")
    p.add_argument("--multi-annotations", default=None, help="polygon annotations for mined frames")
    p.add_argument("--templates", default=None, help="instruction templates, one per line")
    p.add_argument("--split-lists", default=None, help="directory with train/val/test id lists")
    p.add_argument("--verifier", default="stub", help="landmark verifier: stub or http")
    p.add_argument("--max-retries", type=int, default=3, help="re-swap attempts per candidate")
    p.add_argument("--trace-tolerance", type=float, default=0.01, help="mask tracing tolerance")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train a model on a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--layout-cache", default=None, help="patch-layout cache file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a predictions file against ground truth")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--msiou-K", type=float, default=None, help="msIoU threshold K")
    p.add_argument("--p-at-k", default=None, help="comma-separated P@K thresholds")
    p.add_argument("--raster", default=None, help="evaluation raster as WIDTHxHEIGHT")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run a checkpoint over a manifest or one image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--image", default=None, help="single image path or synthetic ref")
    p.add_argument("--instruction", default=None)
    p.add_argument("--export-masks", action="store_true", help="write PGM masks per prediction")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench-speed", help="measure ms/sample inference speed")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--runs", type=int, default=50)
    p.set_defaults(func=cmd_bench_speed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, VerifierTransportError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - last-resort CLI boundary
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
