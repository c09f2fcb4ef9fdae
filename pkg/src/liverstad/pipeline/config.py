"""Pipeline configuration: one JSON object with a section per stage."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from ..errors import ValidationError
from ..manifest import MODALITY_GROUPS
from ..registration import RegistrationConfig
from ..stad.extract import StadParams
from ..staging import ForestParams, StagingTask


@dataclass(frozen=True)
class AugmentationParams:
    per_source: int = 5

    def __post_init__(self):
        if self.per_source < 0:
            raise ValidationError("augmentation.per_source must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    augmentation: AugmentationParams = field(default_factory=AugmentationParams)
    stad: StadParams = field(default_factory=StadParams)
    forest: ForestParams = field(default_factory=ForestParams)
    tasks: Tuple[str, ...] = tuple(t.value for t in StagingTask)
    groups: Tuple[str, ...] = tuple(MODALITY_GROUPS)
    # every stage derives its seed from this one
    seed: int = 0

    def __post_init__(self):
        for t in self.tasks:
            try:
                StagingTask(t)
            except ValueError:
                raise ValidationError(f"unknown task {t!r}") from None
        for g in self.groups:
            if g not in MODALITY_GROUPS:
                raise ValidationError(f"unknown modality group {g!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError("seed must be a nonnegative integer")

    def with_seed(self, seed: Optional[int]) -> "PipelineConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, seed=int(seed),
                                   registration=dataclasses.replace(self.registration, seed=int(seed)))

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "registration": RegistrationConfig,
    "augmentation": AugmentationParams,
    "stad": StadParams,
    "forest": ForestParams,
}


def _section(cls, name: str, values) -> object:
    if not isinstance(values, dict):
        raise ValidationError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    kw = dict(values)
    if kw.get("parameter_scales") is not None:
        kw["parameter_scales"] = tuple(kw["parameter_scales"])
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ValidationError(f"config section {name!r}: {exc}") from exc


def config_from_dict(d: dict) -> PipelineConfig:
    if not isinstance(d, dict):
        raise ValidationError("config must be a JSON object")
    unknown = set(d) - set(_SECTIONS) - {"tasks", "groups", "seed"}
    if unknown:
        raise ValidationError(f"unknown config keys {sorted(unknown)}")
    kw = {name: _section(cls, name, d[name]) for name, cls in _SECTIONS.items() if name in d}
    for key in ("tasks", "groups"):
        if key in d:
            if not isinstance(d[key], list) or not d[key]:
                raise ValidationError(f"{key} must be a nonempty list")
            kw[key] = tuple(d[key])
    if "seed" in d:
        kw["seed"] = d["seed"]
    cfg = PipelineConfig(**kw)
    # one master seed unless the registration section sets its own
    if "seed" in d and "seed" not in d.get("registration", {}):
        cfg = dataclasses.replace(cfg, registration=dataclasses.replace(cfg.registration, seed=cfg.seed))
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(d)
