"""Run configuration: JSON document with strict (unknown-key-rejecting) schema.

Sections and defaults:

    data:   synthetic benchmark geometry (see data.GenConfig)
    enc:    frozen encoder seed and per-modality dims
    fusion: fusion transformer (layers/dim/heads/n_seg/strategy)
    seg:    segmenter dims, memory capacity, trainability flags
    train:  optimizer, schedule, loss weights, batching, seed

The fully-resolved config is echoed next to every run's outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from lavseg.data import GenConfig
from lavseg.encoders import EncoderConfig
from lavseg.fusion import FusionConfig
from lavseg.segmenter import SegConfig


class ConfigError(ValueError):
    """Unknown key or invalid value in a run config."""


@dataclass
class TrainSection:
    lr: float = 1e-4
    weight_decay: float = 0.0
    warmup: int = 100
    total_steps: int = 1000
    batch: int = 8
    accum: int = 2
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    seed: int = 0


@dataclass
class RunConfig:
    data: GenConfig = field(default_factory=GenConfig)
    enc: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    train: TrainSection = field(default_factory=TrainSection)

    def __post_init__(self):
        # keep derived geometry consistent with the data section
        self.seg.height = self.data.height
        self.seg.width = self.data.width
        self.seg.d_prompt_in = self.fusion.dim
        self.enc.d_audio_raw = self.data.d_audio_raw
        self.fusion.validate()

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name))
                for name in ("data", "enc", "fusion", "seg", "train")}

    def echo(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True),
                              encoding="utf-8")


_SECTIONS = {
    "data": GenConfig,
    "enc": EncoderConfig,
    "fusion": FusionConfig,
    "seg": SegConfig,
    "train": TrainSection,
}


def resolve_config(doc: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        valid = {f.name for f in dataclasses.fields(cls)}
        bad = set(section) - valid
        if bad:
            raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(bad)}")
        kwargs[name] = cls(**section)
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return resolve_config(doc)
