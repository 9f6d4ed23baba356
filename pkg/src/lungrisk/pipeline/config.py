"""Flat key=value run configuration with seg./recur./forest./data. sections."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from ..errors import ConfigError, PathError
from ..forest import DEFAULT_GRID
from ..imgproc import HU_WINDOW
from ..recurnet import RecurNetConfig
from ..segnet import SegNetConfig
from .phantom import PhantomSpec


def desk_seg() -> SegNetConfig:
    return SegNetConfig(input_size=128, widths=(8, 16, 32), bridge=64, epochs=60, batch_size=4)


def desk_recur() -> RecurNetConfig:
    return RecurNetConfig(filters=(4, 8, 16, 32), dense=(64, 32, 16, 2), epochs=80, batch_size=4)


@dataclass
class PipelineConfig:
    data_root: str = "data"
    out_dir: str = "runs"
    seed: int = 0
    hu_window: tuple[float, float] = HU_WINDOW
    n_patients: int = 40
    seg: SegNetConfig = field(default_factory=desk_seg)
    seg_split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seg_slices: str = "all"  # "all" nodule-bearing slices or only "primary" ones for train/val
    seg_augment: bool = True
    recur: RecurNetConfig = field(default_factory=desk_recur)
    recur_split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    recur_augment: bool = True
    forest_estimators: tuple[int, ...] = DEFAULT_GRID[0]
    forest_depths: tuple[int | None, ...] = DEFAULT_GRID[1]
    forest_folds: int = 5
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def seeded(self) -> "PipelineConfig":
        """Copy with the global seed pushed into every stochastic component."""
        seg_aug = self.seg.augmentation if self.seg_augment else None
        recur_aug = self.recur.augmentation if self.recur_augment else None
        return dataclasses.replace(
            self,
            seg=dataclasses.replace(self.seg, seed=self.seed, augmentation=seg_aug),
            recur=dataclasses.replace(self.recur, seed=self.seed, augmentation=recur_aug),
            phantom=dataclasses.replace(self.phantom, seed=self.seed),
        )

    def validate(self, need_data: bool = True) -> "PipelineConfig":
        self.seg.validate()
        self.recur.validate()
        if self.seg_slices not in ("all", "primary"):
            raise ConfigError(f"seg.slices must be 'all' or 'primary', got {self.seg_slices!r}")
        if self.forest_folds < 2:
            raise ConfigError(f"forest.folds must be >= 2, got {self.forest_folds}")
        if need_data and not Path(self.data_root).is_dir():
            raise PathError(f"data root {self.data_root} does not exist")
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


# config key -> (attribute path); section fields are reachable as <prefix>.<field>
_ALIASES = {
    "seed": ("seed",),
    "data.root": ("data_root",),
    "data.out": ("out_dir",),
    "data.hu_window": ("hu_window",),
    "data.n_patients": ("n_patients",),
    "seg.split": ("seg_split",),
    "seg.slices": ("seg_slices",),
    "seg.augment": ("seg_augment",),
    "recur.split": ("recur_split",),
    "recur.augment": ("recur_augment",),
    "forest.n_estimators": ("forest_estimators",),
    "forest.max_depth": ("forest_depths",),
    "forest.folds": ("forest_folds",),
}
_SECTIONS = {"seg.": "seg", "recur.": "recur", "data.": "phantom"}


def _resolve(cfg: PipelineConfig, key: str) -> tuple[object, str]:
    if key in _ALIASES:
        return cfg, _ALIASES[key][0]
    for prefix, attr in _SECTIONS.items():
        if key.startswith(prefix):
            owner = getattr(cfg, attr)
            name = key[len(prefix):]
            if name in {f.name for f in dataclasses.fields(owner)} and name not in ("seed", "augmentation"):
                return owner, name
    raise ConfigError(f"unknown config key {key!r}")


def _coerce(text: str, hint, current, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    try:
        if origin is tuple or isinstance(current, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(_atom(p) for p in parts)
        if isinstance(current, bool):
            if text.lower() in ("true", "yes", "1"):
                return True
            if text.lower() in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r}") from None


def _atom(text: str):
    if text.lower() in ("none", "unbounded"):
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def set_value(cfg: PipelineConfig, key: str, text: str) -> None:
    owner, name = _resolve(cfg, key)
    hints = typing.get_type_hints(type(owner))
    setattr(owner, name, _coerce(text, hints.get(name), getattr(owner, name), key))


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Lines of ``key = value``; ``#`` starts a comment."""
    cfg = base or PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        set_value(cfg, key.strip(), value)
    return cfg


def load_config(path=None, overrides: Mapping[str, str] | Sequence[tuple[str, str]] = ()) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise PathError(f"config file {p} does not exist")
        cfg = parse_config_text(p.read_text(), cfg)
    items = overrides.items() if isinstance(overrides, Mapping) else overrides
    for key, value in items:
        set_value(cfg, key, value)
    return cfg


def format_config(cfg: PipelineConfig) -> str:
    """Inverse of ``parse_config_text`` for every settable key."""
    lines = []

    def fmt(v):
        if isinstance(v, tuple):
            return ",".join("none" if x is None else repr(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(v)

    for key, (attr,) in _ALIASES.items():
        lines.append(f"{key} = {fmt(getattr(cfg, attr))}")
    for prefix, attr in _SECTIONS.items():
        owner = getattr(cfg, attr)
        for f in dataclasses.fields(owner):
            if f.name in ("seed", "augmentation"):
                continue
            lines.append(f"{prefix}{f.name} = {fmt(getattr(owner, f.name))}")
    return "\n".join(lines) + "\n"
