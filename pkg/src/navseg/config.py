"""Run configuration: named profiles, flat key=value files, --set overrides.

Two built-in profiles: `paper` keeps the published experimental settings
(epoch 100, batch 384, lr 1e-4, AdamW betas 0.9/0.98, lambda 3, 560x315
patches encoded at 224, 640x640 evaluation rasters); `desk` is a small
configuration that trains in seconds on a CPU. Every run echoes its full
effective configuration into its outputs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encoders import EncoderConfig
from .metrics import EvalConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key, malformed value, or invariant violation in a run config."""


@dataclass
class DataConfig:
    width: int = 64
    height: int = 64


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    output_dir: str = "runs"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)


def paper_profile() -> RunConfig:
    return RunConfig(
        profile="paper",
        encoder=EncoderConfig(dim=256, vocab_size=4096, max_tokens=32, trunk_channels=(16, 32, 64)),
        model=ModelConfig(
            n_v=6, p_max=4, patch_w=560, patch_h=315, num_patches=4,
            patch_encode_size=224, mlp_hidden=256,
        ),
        train=TrainConfig(),  # epoch 100, batch 384, lr 1e-4, betas (0.9, 0.98), lambda 3
        eval=EvalConfig(raster_width=640, raster_height=640, msiou_k=0.1, p_at_k=(0.1, 0.2)),
        data=DataConfig(width=224, height=224),
    )


def desk_profile() -> RunConfig:
    return RunConfig(
        profile="desk",
        encoder=EncoderConfig(dim=64, vocab_size=512, max_tokens=12, trunk_channels=(16, 32, 64)),
        model=ModelConfig(
            n_v=6, p_max=4, patch_w=24, patch_h=24, num_patches=2,
            patch_encode_size=24, mlp_hidden=128,
        ),
        train=TrainConfig(
            epochs=500, batch_size=32, lr=3e-3, warmup_epochs=5, decay_epoch=400, val_every=3
        ),
        eval=EvalConfig(raster_width=128, raster_height=128, msiou_k=0.1, p_at_k=(0.1, 0.2)),
        data=DataConfig(width=64, height=64),
    )


PROFILES = {"paper": paper_profile, "desk": desk_profile}

_SECTIONS = ("encoder", "model", "train", "eval", "data")
_TOP_LEVEL = ("profile", "seed", "output_dir")


def make_profile(name: str) -> RunConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def _parse_value(raw: str, current):
    try:
        if isinstance(current, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, (tuple, list)):
            parts = [p for p in raw.split(",") if p]
            elem = current[0] if len(current) else 0.0
            cast = int if isinstance(elem, int) and not isinstance(elem, bool) else float
            return tuple(cast(p) for p in parts)
        return raw
    except (TypeError, ValueError) as err:
        raise ConfigError(f"cannot parse {raw!r} as {type(current).__name__}") from err


def apply_overrides(config: RunConfig, pairs) -> RunConfig:
    """Apply `section.key=value` (or top-level `key=value`) overrides and
    rebuild the config so dataclass invariants re-validate."""
    doc = {
        "profile": config.profile,
        "seed": config.seed,
        "output_dir": config.output_dir,
        **{section: asdict(getattr(config, section)) for section in _SECTIONS},
    }
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS or name not in doc[section]:
                raise ConfigError(f"unknown config key {key!r}")
            doc[section][name] = _parse_value(raw.strip(), doc[section][name])
        else:
            if key not in _TOP_LEVEL:
                raise ConfigError(f"unknown config key {key!r}")
            doc[key] = _parse_value(raw.strip(), doc[key])
    try:
        return RunConfig(
            profile=doc["profile"],
            seed=doc["seed"],
            output_dir=doc["output_dir"],
            encoder=EncoderConfig(**{**doc["encoder"], "trunk_channels": tuple(doc["encoder"]["trunk_channels"])}),
            model=ModelConfig(**doc["model"]),
            train=TrainConfig(**{**doc["train"], "betas": tuple(doc["train"]["betas"])}),
            eval=EvalConfig(**{**doc["eval"], "p_at_k": tuple(doc["eval"]["p_at_k"])}),
            data=DataConfig(**doc["data"]),
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def read_config_file(path) -> list[str]:
    """Flat key=value lines; blank lines and #-comments are skipped."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        pairs.append(line)
    return pairs


def load_config(profile: str = "desk", config_file=None, overrides=()) -> RunConfig:
    config = make_profile(profile)
    pairs = []
    if config_file is not None:
        pairs.extend(read_config_file(config_file))
    pairs.extend(overrides)
    return apply_overrides(config, pairs)


def config_echo(config: RunConfig) -> dict:
    """Flat section.key mapping embedded into every run output."""
    echo = {"profile": config.profile, "seed": config.seed, "output_dir": config.output_dir}
    for section in _SECTIONS:
        for key, value in asdict(getattr(config, section)).items():
            if isinstance(value, tuple):
                value = list(value)
            echo[f"{section}.{key}"] = value
    return echo
