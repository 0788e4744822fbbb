"""Experiment configuration: an INI file with a fixed set of sections and keys.

Unknown sections or keys are errors, so a misspelt ``lamda_a`` fails loudly
instead of silently running with the default. ``[mode:NAME]`` sections
override training keys for one training mode.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .training import MODES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    kind: str = "two-moons"
    n: int = 1000
    noise: float = 0.1
    test_fraction: float = 0.25
    idx_images: str = ""
    idx_labels: str = ""
    limit: int = 2000


@dataclass
class ModelSection:
    n_models: int = 3
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"


@dataclass
class AttackSection:
    methods: tuple[str, ...] = ("PGD",)
    eps: tuple[float, ...] = (0.05, 0.08, 0.12)
    norm: str = "linf"
    steps: int = 50
    restarts: int = 5
    loss: str = "ce"
    seed: int = 1


@dataclass
class TransferSection:
    eps: float = 0.08
    method: str = "PGD"
    blackbox: bool = True
    blackbox_eps: tuple[float, ...] = (0.12,)
    surrogate_ensembles: int = 2
    surrogate_models: int = 2
    blackbox_restarts: int = 2
    losses: tuple[str, ...] = ("ce", "cw")


@dataclass
class BoundsSection:
    enabled: bool = True
    eps: float = 0.05
    targeted: bool = False
    radius: float = 0.1
    pairs: int = 4
    items: int = 100


@dataclass
class BoundarySection:
    enabled: bool = True
    points: int = 3
    resolution: int = 41
    half_width: float = 0.3


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = (0,)
    modes: tuple[str, ...] = ("Vanilla", "TRS")
    out: str = "runs/experiment"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: dict = field(default_factory=dict)
    mode_overrides: dict = field(default_factory=dict)
    attack: AttackSection = field(default_factory=AttackSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    boundary: BoundarySection = field(default_factory=BoundarySection)

    def train_config(self, mode: str, seed: int) -> TrainConfig:
        kw = dict(self.train)
        kw.update(self.mode_overrides.get(mode, {}))
        return TrainConfig(mode=mode, seed=seed, **kw)

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=tuple(seeds))


_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name not in ("mode", "seed")}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(text: str, kind, where: str):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if kind.startswith("tuple"):
            inner = kind[kind.index("[") + 1:].split(",")[0].strip()
            return tuple(_coerce(tok, inner, where) for tok in text.replace(",", " ").split())
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            return _parse_bool(text)
        if kind == "str":
            return text.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unsupported field type {kind}")


def _fill(section_cls, items: dict, where: str):
    types = {f.name: f.type for f in dataclasses.fields(section_cls)}
    kw = {}
    for key, text in items.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        kw[key] = _coerce(text, types[key], f"[{where}] {key}")
    return section_cls(**kw)


def _train_items(items: dict, where: str) -> dict:
    out = {}
    for key, text in items.items():
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        kind = _TRAIN_KEYS[key]
        kind = kind if isinstance(kind, str) else kind.__name__
        if "tuple" in kind:
            out[key] = tuple(int(t) for t in text.replace(",", " ").split())
        elif kind == "int":
            out[key] = _coerce(text, "int", f"[{where}] {key}")
        elif kind == "float":
            out[key] = _coerce(text, "float", f"[{where}] {key}")
        else:
            out[key] = text.strip()
    return out


_SECTIONS = {"data": DataSection, "model": ModelSection, "attack": AttackSection,
             "transfer": TransferSection, "bounds": BoundsSection, "boundary": BoundarySection}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keys are case-sensitive (deltaM)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig()
    for name in cp.sections():
        items = dict(cp.items(name))
        if name == "experiment":
            allowed = {"seeds": "tuple[int, ...]", "modes": "tuple[str, ...]", "out": "str"}
            for key, val in items.items():
                if key not in allowed:
                    raise ConfigError(f"unknown key {key!r} in [experiment]")
                setattr(cfg, key, _coerce(val, allowed[key], f"[experiment] {key}"))
        elif name == "train":
            cfg.train = _train_items(items, name)
        elif name.startswith("mode:"):
            mode = name[len("mode:"):]
            if mode not in MODES:
                raise ConfigError(f"unknown training mode in [{name}]")
            cfg.mode_overrides[mode] = _train_items(items, name)
        elif name in _SECTIONS:
            setattr(cfg, name, _fill(_SECTIONS[name], items, name))
        else:
            raise ConfigError(f"unknown section [{name}]")
    for mode in cfg.modes:
        if mode not in MODES:
            raise ConfigError(f"unknown training mode {mode!r}")
        try:
            cfg.train_config(mode, 0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"training settings for {mode}: {exc}") from exc
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if cfg.data.kind == "idx":
        for key in ("idx_images", "idx_labels"):
            if not Path(getattr(cfg.data, key)).is_file():
                raise ConfigError(f"[data] {key}: file not found")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
