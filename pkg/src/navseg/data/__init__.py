"""Dataset schema, manifest persistence, benchmark construction, toy scenes."""

from .schema import Manifest, ManifestError, Sample, TrackAnnotation
from .manifest import load_manifest, save_manifest
from .synthetic import ToyDatasetConfig, generate_toy_dataset, load_image, render_scene
from .construction import (
    CROP_HEIGHT,
    CROP_WIDTH,
    CROP_X,
    CROP_Y,
    ProvenanceLog,
    RemappedBox,
    TemplateError,
    bbox_valid,
    build_no_target_samples,
    crop_wide_frame,
    fill_template,
    select_multi_target_frames,
    singularize_phrase,
    swap_instructions,
    verify_no_target,
)
from .verifier import (
    HttpVerifier,
    KeywordStubVerifier,
    ScriptedVerifier,
    VerifierTransportError,
    VerifierVerdict,
)

__all__ = [
    "Manifest",
    "ManifestError",
    "Sample",
    "TrackAnnotation",
    "load_manifest",
    "save_manifest",
    "ToyDatasetConfig",
    "generate_toy_dataset",
    "load_image",
    "render_scene",
    "CROP_HEIGHT",
    "CROP_WIDTH",
    "CROP_X",
    "CROP_Y",
    "ProvenanceLog",
    "RemappedBox",
    "TemplateError",
    "bbox_valid",
    "build_no_target_samples",
    "crop_wide_frame",
    "fill_template",
    "select_multi_target_frames",
    "singularize_phrase",
    "swap_instructions",
    "verify_no_target",
    "HttpVerifier",
    "KeywordStubVerifier",
    "ScriptedVerifier",
    "VerifierTransportError",
    "VerifierVerdict",
]
