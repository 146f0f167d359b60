"""Plain-text key/value run configuration (INI sections, one per component).

Example::

    [synth]
    drift = 1.0
    distractors = 1

    [train]
    lam = 0.2
    buckets = 25, 50, 75

Unknown sections or keys are errors; omitted keys keep their defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .cf import CFConfig
from .features import FeatureExtractor
from .metatrain import TrainConfig
from .synthdata import SynthConfig
from .tracker import TrackerConfig
from .updaters import STRATEGIES, SGDConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UpdaterConfig:
    strategy: str = "none"
    alpha: float = 0.05
    interval: int = 5
    projection: str = "template"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    sequences: int = 100
    base_seed: int = 0
    alphas: tuple = tuple(round(0.01 * i, 2) for i in range(1, 21))


@dataclass(frozen=True)
class RunConfig:
    features: dict = field(default_factory=dict)
    cf: CFConfig = CFConfig()
    tracker: TrackerConfig = TrackerConfig()
    updater: UpdaterConfig = UpdaterConfig()
    sgd: SGDConfig = SGDConfig()
    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    eval: EvalConfig = EvalConfig()

    def extractor(self):
        return FeatureExtractor(**self.features)


_SECTIONS = {"cf": CFConfig, "tracker": TrackerConfig, "updater": UpdaterConfig,
             "sgd": SGDConfig, "train": TrainConfig, "synth": SynthConfig, "eval": EvalConfig}
_FEATURE_KEYS = {"mode": str, "m": int, "n": int, "d": int, "cell": int, "kernel": int,
                 "channels": int, "seed": int, "gain": float}


def _parse_scalar(text, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def _coerce(text, default, annotation):
    text = text.strip()
    if text.lower() in ("none", "") and (default is None or "None" in str(annotation)):
        return None
    if isinstance(default, tuple):
        items = [t for t in text.replace(";", ",").split(",") if t.strip()]
        kind = type(default[0]) if default else float
        return tuple(_parse_scalar(t, kind) for t in items)
    if isinstance(default, bool):
        return _parse_scalar(text, bool)
    if default is None:
        ann = str(annotation)
        return _parse_scalar(text, int if "int" in ann else float)
    return _parse_scalar(text, type(default))


def _build(cls, items, section):
    defaults = cls()
    kw = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, text in items:
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            kw[key] = _coerce(text, getattr(defaults, key), known[key].type)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse(text):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    kw = {}
    for section in cp.sections():
        items = list(cp.items(section))
        if section == "features":
            feats = {}
            for key, value in items:
                if key not in _FEATURE_KEYS:
                    raise ConfigError(f"[features] unknown key {key!r}")
                try:
                    feats[key] = _parse_scalar(value, _FEATURE_KEYS[key])
                except ValueError as exc:
                    raise ConfigError(f"[features] {key}: {exc}") from None
            try:
                FeatureExtractor(**feats)
            except ValueError as exc:
                raise ConfigError(f"[features] {exc}") from None
            kw["features"] = feats
        elif section in _SECTIONS:
            kw[section] = _build(_SECTIONS[section], items, section)
        else:
            raise ConfigError(f"unknown section [{section}]")
    return RunConfig(**kw)


def load(path=None):
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _fmt(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return "none" if v is None else str(v)


def dump(cfg):
    """Render a RunConfig back to text (parse(dump(c)) == c)."""
    lines = []
    if cfg.features:
        lines.append("[features]")
        lines += [f"{k} = {v}" for k, v in cfg.features.items()]
        lines.append("")
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
