"""Experiment configuration and its INI-style key-value file format.

Example::

    [experiment]
    dataset = synth2d
    seeds = 0, 1, 2
    periods = 6
    strategies = A, B, C, ICE-PKD

    [model]
    lr = 0.001
    epochs = 20

    [icepkd]
    lr = 0.0001
    mu = 1.0

Unknown sections or keys are rejected. Tuple values are comma-separated.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .incremental import IcepkdConfig
from .model import DrcfrConfig

DATASETS = ("synth2d", "synth10d", "csv")
BASELINE = "A"
STRATEGIES = ("A", "B", "C", "ICE-PKD")
ABLATIONS = ("ICE-PKD w/o PT", "ICE-PKD w/o RM", "ICE-PKD w/o KD")
ALL_STRATEGIES = STRATEGIES + ABLATIONS


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "synth2d"
    csv_dir: str | None = None
    n_train: int = 10_000
    n_test: int = 50_000
    noise: float = 0.01
    periods: int = 6
    seeds: tuple[int, ...] = (0, 1, 2)
    strategies: tuple[str, ...] = STRATEGIES
    incr_frac: float = 0.1
    a_window: str = "previous"  # or "previous+current"
    workers: int = 1
    save_checkpoints: bool = True
    model: DrcfrConfig = field(default_factory=DrcfrConfig)
    icepkd: IcepkdConfig = field(default_factory=IcepkdConfig)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.strategies = tuple(self.strategies)
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {DATASETS}")
        if self.dataset == "csv" and not self.csv_dir:
            raise ConfigError("dataset=csv needs csv_dir")
        if not 1 <= self.periods <= 6 and self.dataset != "csv":
            raise ConfigError("synthetic streams have 1..6 incremental periods")
        if self.periods < 1:
            raise ConfigError("periods must be at least 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [s for s in self.strategies if s not in ALL_STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; choose from {ALL_STRATEGIES}")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if not 0 < self.incr_frac <= 1:
            raise ConfigError("incr_frac must be in (0, 1]")
        if self.a_window not in ("previous", "previous+current"):
            raise ConfigError(f"unknown a_window {self.a_window!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        dim = 10 if self.dataset == "synth10d" else 2
        if self.dataset != "csv" and self.model.n_in != dim:
            self.model = dataclasses.replace(self.model, n_in=dim)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = _plain(dataclasses.asdict(v))
            out[f.name] = _plain(v)
        return out

    def hash(self) -> str:
        """Digest of everything that affects results (worker count excluded)."""
        d = self.to_dict()
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _parse_value(raw: str, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    raw = raw.strip()
    try:
        if origin is tuple:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_parse_value(s, args[0], where) for s in items)
        if origin in (typing.Union, types.UnionType):
            if raw.lower() in ("", "none"):
                return None
            return _parse_value(raw, next(a for a in args if a is not type(None)), where)
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except (ValueError, StopIteration):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp}") from None


def _apply(cls, section: dict, where: str, base=None, **extra):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for key, raw in section.items():
        if key not in names or dataclasses.is_dataclass(hints[key]):
            raise ConfigError(f"{where}: unknown key {key!r}")
        kw[key] = _parse_value(raw, hints[key], f"{where}.{key}")
    try:
        return dataclasses.replace(base, **kw) if base is not None else cls(**extra, **kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    unknown = set(cp.sections()) - {"experiment", "model", "icepkd"}
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    model = _apply(DrcfrConfig, dict(cp["model"]) if cp.has_section("model") else {}, f"{source}[model]")
    icepkd = _apply(IcepkdConfig, dict(cp["icepkd"]) if cp.has_section("icepkd") else {},
                    f"{source}[icepkd]", base=ExperimentConfig().icepkd)
    exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    return _apply(ExperimentConfig, exp, f"{source}[experiment]", model=model, icepkd=icepkd)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of ``parse_config``."""
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ", ".join(str(x) for x in v)
        return "none" if v is None else str(v)

    lines = ["[experiment]"]
    for f in dataclasses.fields(cfg):
        if f.name not in ("model", "icepkd"):
            lines.append(f"{f.name} = {fmt(getattr(cfg, f.name))}")
    for name in ("model", "icepkd"):
        sub = getattr(cfg, name)
        lines += ["", f"[{name}]"]
        lines += [f"{f.name} = {fmt(getattr(sub, f.name))}" for f in dataclasses.fields(sub)]
    return "\n".join(lines) + "\n"
