"""Pipeline configuration: one JSON file, one seed for the whole run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .corpus import SynthSpec
from .disentangle import HarvestThresholds
from .miml import TrainConfig
from .nmf import NmfOptions
from .separate import MODES, SeparateOptions


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    sample_rate: int = 48000
    window_len: int = 4800
    hop: int = 2400
    m: int = 25
    k: int = 4
    hidden: int = 1024
    label_threshold: float = 0.3
    nmf: NmfOptions = NmfOptions()
    train: TrainConfig = TrainConfig()
    harvest: HarvestThresholds = HarvestThresholds()
    per_label_count: int = 25
    mode: str = "matched"
    synth: SynthSpec = field(default_factory=SynthSpec)
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.window_len <= 0 or self.window_len % 2:
            raise ConfigError("window_len must be a positive even number")
        if self.hop != self.window_len // 2:
            raise ConfigError("hop must be window_len / 2")
        if self.m < 1 or self.k < 1 or self.hidden < 1 or self.per_label_count < 1:
            raise ConfigError("m, k, hidden and per_label_count must be >= 1")
        if not 0.0 <= self.label_threshold < 1.0:
            raise ConfigError("label_threshold must be in [0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.train.epochs < 1 or self.train.batch_size < 1 or self.train.lr <= 0:
            raise ConfigError("train.epochs, train.batch_size and train.lr must be positive")
        return self

    @property
    def f(self) -> int:
        return self.window_len // 2 + 1

    def nmf_options(self, seed: int) -> NmfOptions:
        return replace(self.nmf, m=self.m, seed=seed)

    def separate_options(self, seed: int) -> SeparateOptions:
        return SeparateOptions(self.window_len, self.hop, self.per_label_count,
                               replace(self.nmf, m=self.m), seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"]["clips_per_split"] = dict(self.synth.clips_per_split)
        d["synth"]["sources_per_clip"] = list(self.synth.sources_per_clip)
        return d


_NESTED = {"nmf": NmfOptions, "train": TrainConfig, "harvest": HarvestThresholds,
           "synth": SynthSpec}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return values


def from_dict(doc: dict) -> PipelineConfig:
    _build(PipelineConfig, doc, "config")
    kwargs = {}
    for key, value in doc.items():
        if key in _NESTED:
            value = dict(_build(_NESTED[key], value, key))
            if key == "synth":
                if "clips_per_split" in value:
                    value["clips_per_split"] = tuple(
                        sorted(dict(value["clips_per_split"]).items()))
                if "sources_per_clip" in value:
                    value["sources_per_clip"] = tuple(value["sources_per_clip"])
            try:
                value = _NESTED[key](**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {key} section: {exc}") from exc
        kwargs[key] = value
    try:
        cfg = PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path=None, seed: int | None = None) -> PipelineConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if seed is not None:
        doc["seed"] = int(seed)
    return from_dict(doc)
