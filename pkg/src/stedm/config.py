"""Plain-text run configuration.

An INI-style file with one ``[run]`` section holding the schema version and
the seed, followed by optional ``[data]``, ``[diffusion]``, ``[generation]``,
``[segmentation]`` and ``[grid]`` sections. Every key has a default, so an
empty file is valid. Unknown sections or keys are errors.

Example::

    [run]
    schema_version = 1
    seed = 7

    [data]
    kind = shapes
    count = 1000

    [diffusion]
    epochs = 5
    strategy = augmented

List values are comma separated (``annotated = 24, 12, 4``). Empty strings
stand for "unset" in optional path fields.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import typing
from dataclasses import dataclass, field, fields
from typing import Optional

from .errors import ConfigError
from .pipelines import SegTrainConfig, TrainConfig

SCHEMA_VERSION = 1


@dataclass
class DataConfig:
    kind: str = "shapes"           # shapes | cohort | folder
    count: int = 4000              # shapes
    size: int = 16                 # shapes image side
    holdout_lo: float = 200.0
    holdout_hi: float = 300.0
    patients: int = 30             # cohort
    annotated: int = 4
    slide_size: int = 256
    test_patients: int = 10
    val_patients: int = 0
    hue_shift: float = 40.0
    images_dir: str = ""           # folder
    masks_dir: str = ""

    def __post_init__(self):
        if self.kind not in ("shapes", "cohort", "folder"):
            raise ConfigError(f"data.kind must be shapes, cohort or folder, got {self.kind!r}")
        for name in ("count", "size", "patients", "annotated", "slide_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be positive")
        if self.test_patients < 0 or self.val_patients < 0:
            raise ConfigError("data.test_patients and data.val_patients must be >= 0")
        if self.kind == "folder" and not self.images_dir:
            raise ConfigError("data.images_dir is required for kind=folder")


@dataclass
class GenerationConfig:
    strategy: str = ""             # inference strategy; empty means the training one
    n_style: int = 10
    steps: int = 128
    guidance_scale: float = 1.5
    count: int = 20000
    batch_size: int = 100
    augment_layouts: bool = True
    hue_lo: float = -1.0           # shapes only: restrict style queries to a hue band
    hue_hi: float = -1.0

    def __post_init__(self):
        if self.steps < 1 or self.count < 1 or self.batch_size < 1 or self.n_style < 1:
            raise ConfigError("generation counts must be positive")
        if self.guidance_scale < 0:
            raise ConfigError("generation.guidance_scale must be >= 0")


@dataclass
class GridConfig:
    annotated: list = field(default_factory=lambda: [24, 12, 4])
    strategies: list = field(default_factory=lambda: ["real_only", "none", "augmented", "nearby",
                                                      "multipatch"])
    seeds: list = field(default_factory=lambda: [0])
    synthetic_count: int = 2000

    def __post_init__(self):
        ok = ("real_only", "none", "augmented", "nearby", "multipatch")
        for s in self.strategies:
            if s not in ok:
                raise ConfigError(f"grid.strategies entry {s!r} not in {ok}")
        if not self.annotated or not self.seeds or not self.strategies:
            raise ConfigError("grid lists may not be empty")
        if any(a < 1 for a in self.annotated):
            raise ConfigError("grid.annotated entries must be positive")


# the seed lives in [run]; the section dataclasses that carry their own seed take it from there
_SECTIONS = {
    "data": DataConfig,
    "diffusion": TrainConfig,
    "generation": GenerationConfig,
    "segmentation": SegTrainConfig,
    "grid": GridConfig,
}
_SEEDED = ("diffusion", "segmentation")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    segmentation: SegTrainConfig = field(default_factory=SegTrainConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        self.diffusion.seed = self.seed
        self.segmentation.seed = self.seed

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["run"] = {"schema_version": str(SCHEMA_VERSION), "seed": str(self.seed)}
        for name in _SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _format(getattr(section, f.name))
                        for f in fields(section) if not (name in _SEEDED and f.name == "seed")}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        """Content hash of the canonical text form."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """``{"section.key": "text value"}`` applied on top of this config."""
        return parse_config(self.to_text(), overrides)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _convert(text: str, typ, default, where: str):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if typ is tuple or typ is list:
            items = [t.strip() for t in text.split(",") if t.strip()]
            proto = default[0] if default else ""
            conv = type(proto)
            out = [conv(t) for t in items]
            return tuple(out) if typ is tuple else out
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")


def parse_config(text: str, overrides: Optional[dict] = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {s: dict(cp[s]) for s in cp.sections()}
    for key, val in (overrides or {}).items():
        if "." not in key:
            raise ConfigError(f"override {key!r} must look like section.key")
        sec, k = key.split(".", 1)
        values.setdefault(sec, {})[k] = str(val)

    run = values.pop("run", {})
    version = run.pop("schema_version", str(SCHEMA_VERSION))
    if version.strip() != str(SCHEMA_VERSION):
        raise ConfigError(f"unsupported config schema_version {version!r}")
    seed = _convert(run.pop("seed", "0"), int, 0, "run.seed")
    if run:
        raise ConfigError(f"unknown key(s) in [run]: {', '.join(sorted(run))}")

    sections = {}
    for name, cls in _SECTIONS.items():
        given = values.pop(name, {})
        types = _field_types(cls)
        defaults = cls()
        kwargs = {}
        for key, raw in given.items():
            if key not in types or (name in _SEEDED and key == "seed"):
                raise ConfigError(f"unknown key {name}.{key}")
            kwargs[key] = _convert(raw, types[key], getattr(defaults, key), f"{name}.{key}")
        try:
            sections[name] = cls(**kwargs)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    if values:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(values))}")
    return RunConfig(seed=seed, **sections)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
