"""Line-delimited manifest persistence with schema versioning and ref checks."""
from __future__ import annotations

import json
import os
from pathlib import Path

from .schema import Manifest, ManifestError, Sample
from .synthetic import SCENE_PREFIX

MANIFEST_FORMAT = "navseg-manifest"
MANIFEST_VERSION = 1


def _provenance_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".provenance.jsonl")


def save_manifest(manifest: Manifest, path) -> None:
    """Write a header line plus one record per sample; provenance goes to a
    sidecar file next to the manifest when present."""
    path = Path(path)
    manifest.validate_ids()
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sample in manifest.samples:
            fh.write(json.dumps(sample.to_record(), sort_keys=True) + "\n")
    if manifest.provenance:
        with open(_provenance_path(path), "w", encoding="utf-8") as fh:
            for entry in manifest.provenance:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def load_manifest(path, check_refs: bool = True) -> Manifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in (l.strip() for l in fh) if line]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} file")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(
            f"{path}: unsupported schema version {header.get('version')!r}, "
            f"expected {MANIFEST_VERSION}"
        )
    samples = [Sample.from_record(json.loads(line)) for line in lines[1:]]
    manifest = Manifest(samples=samples)
    manifest.validate_ids()
    if check_refs:
        for sample in samples:
            if sample.image_ref.startswith(SCENE_PREFIX):
                continue
            resolved = Path(sample.image_ref)
            if not resolved.is_absolute():
                resolved = path.parent / resolved
            if not resolved.exists():
                raise ManifestError(
                    f"sample {sample.id}: image_ref {sample.image_ref!r} does not resolve"
                )
    prov = _provenance_path(path)
    if prov.exists():
        with open(prov, "r", encoding="utf-8") as fh:
            manifest.provenance = [json.loads(line) for line in fh if line.strip()]
    return manifest
