"""Flat key=value run configuration with include support.

One file drives a whole run:

    include base.cfg           # merged first, current file wins
    seed = 1
    model.content_dim = 64
    stage1.steps = 150
    augment.apply_fraction = 0.125
    corpus.num_speakers = 8

Keys are ``section.field`` (or bare for top-level fields); every field of
every section is listed by ``jooci train --help``.  The resolved config is
embedded verbatim in run manifests, so runs are diffable.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from typing import Optional, get_args, get_origin

from .data import AugmentConfig
from .model import ModelConfig
from .trainer import StageConfig


@dataclass
class CorpusConfig:
    num_speakers: int = 8
    utts_per_speaker: int = 8
    phone_inventory: int = 5
    min_seconds: float = 2.5
    max_seconds: float = 3.5


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = None
    stage1: StageConfig = None
    stage2: StageConfig = None
    augment: AugmentConfig = None
    corpus: CorpusConfig = None
    augment_enabled: bool = True
    crop_seconds: float = 2.0
    ckpt_every: int = 0
    skip_cl_when_frozen: bool = False
    teacher_noise: float = 0.05
    kmeans_iters: int = 30
    feature_bands: int = 24
    label_anchor: Optional[int] = None

    def __post_init__(self):
        if self.model is None:
            self.model = ModelConfig.toy()
        if self.stage1 is None:
            self.stage1 = StageConfig(steps=150, lr_peak=5e-3, warmup_steps=20,
                                      content_frozen=True, seconds_per_step=16.0)
        if self.stage2 is None:
            self.stage2 = StageConfig(steps=250, lr_peak=1e-3, warmup_steps=25,
                                      content_frozen=False, seconds_per_step=16.0)
        if self.augment is None:
            self.augment = AugmentConfig()
        if self.corpus is None:
            self.corpus = CorpusConfig()

    @property
    def stages(self) -> list[StageConfig]:
        return [self.stage1, self.stage2]

    def to_flat(self) -> dict[str, str]:
        flat: dict[str, str] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in fields(value):
                    flat[f"{f.name}.{sub.name}"] = _format_value(getattr(value, sub.name))
            else:
                flat[f.name] = _format_value(value)
        flat.pop("model.total_stride", None)
        return flat


_SECTIONS = {"model": ModelConfig, "stage1": StageConfig, "stage2": StageConfig,
             "augment": AugmentConfig, "corpus": CorpusConfig}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ",".join("x".join(str(v) for v in stage) for stage in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(text: str, ftype):
    text = text.strip()
    origin = get_origin(ftype)
    if origin is not None and type(None) in get_args(ftype):
        if text.lower() in ("none", ""):
            return None
        ftype = next(a for a in get_args(ftype) if a is not type(None))
        origin = get_origin(ftype)
    if ftype is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {text!r}")
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is str:
        return text
    if origin is tuple:
        inner = get_args(ftype)
        if inner and get_origin(inner[0]) is tuple:      # conv spec
            return tuple(tuple(int(v) for v in stage.split("x"))
                         for stage in text.split(","))
        return tuple(float(v) for v in text.split(","))
    raise ValueError(f"unsupported config field type {ftype}")


def parse_config_text(text: str, base_dir: str = ".") -> dict[str, str]:
    """Flat dict from config text; ``include`` lines merge first."""
    flat: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            inc = line[len("include "):].strip()
            flat.update(load_config_file(os.path.join(base_dir, inc)))
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        flat[key.strip()] = value.strip()
    return flat


def load_config_file(path: str) -> dict[str, str]:
    with open(path) as fh:
        return parse_config_text(fh.read(), base_dir=os.path.dirname(path) or ".")


def run_config_from_flat(flat: dict[str, str]) -> RunConfig:
    """Build a RunConfig, overriding defaults field by field; unknown keys
    are an error (lists every valid key)."""
    section_kwargs: dict[str, dict] = {name: {} for name in _SECTIONS}
    top_kwargs: dict = {}
    top_fields = {f.name: f for f in fields(RunConfig)
                  if not dataclasses.is_dataclass(f.default) and f.name not in _SECTIONS}
    for key, value in flat.items():
        if "." in key:
            section, _, field_name = key.partition(".")
            if section not in _SECTIONS:
                raise KeyError(f"unknown config section {section!r} in key {key!r}; "
                               f"valid: {sorted(_SECTIONS)}")
            sec_fields = {f.name for f in fields(_SECTIONS[section])}
            if field_name not in sec_fields:
                raise KeyError(f"unknown key {key!r}; valid fields for {section}: "
                               f"{sorted(sec_fields)}")
            section_kwargs[section][field_name] = _parse_value(
                value, _resolved_type(_SECTIONS[section], field_name))
        else:
            if key not in top_fields:
                raise KeyError(f"unknown config key {key!r}; valid: {sorted(top_fields)}")
            top_kwargs[key] = _parse_value(value, _resolved_type(RunConfig, key))
    built = {}
    for name, cls in _SECTIONS.items():
        if name == "model":
            base = ModelConfig.toy().to_dict()
            base.update({k: v for k, v in section_kwargs[name].items()})
            built[name] = ModelConfig.from_dict(base)
        elif section_kwargs[name]:
            defaults = RunConfig()
            base = dataclasses.asdict(getattr(defaults, name))
            base.update(section_kwargs[name])
            # tuple fields come back as lists from asdict
            for f in fields(cls):
                if isinstance(base[f.name], list):
                    base[f.name] = tuple(base[f.name])
            built[name] = cls(**base)
    return RunConfig(**top_kwargs, **built)


def _resolved_type(cls, field_name: str):
    import typing
    hints = typing.get_type_hints(cls)
    return hints[field_name]


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    return run_config_from_flat(load_config_file(path))


def describe_config_keys() -> str:
    """All config keys with their defaults, for --help."""
    lines = []
    for key, value in sorted(RunConfig().to_flat().items()):
        lines.append(f"  {key} = {value}")
    return "config keys (defaults shown):\n" + "\n".join(lines)
