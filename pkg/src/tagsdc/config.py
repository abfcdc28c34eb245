"""Run configuration: plain ``key = value`` files with typed, validated fields."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

from .datagen import GRAMMARS
from .model import POOLING
from .training import OPTIMIZERS


class ConfigError(ValueError):
    pass


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


@dataclass
class RunConfig:
    # data
    seed: int = 0
    grammar: str = "toy"
    n_images: int = 64
    data_seed: int = 1
    data: str = ""
    # model
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    n_regions: int = 8
    pool: str = "cls"
    tie_init: bool = True
    # losses
    alpha: float = 0.2
    lambda_irtm: float = 1.0
    lambda_mlm: float = 0.1
    lambda_istm: float = 1.0
    lambda_wod: float = 0.1
    lambda_woc: float = 0.1
    woc_all_positions: bool = False
    # generation
    K: int = 3
    L: int = 4
    m: int = 2
    tau: float = 1.0
    mask_ratio: float = 0.15
    masking: str = "scene_graph"
    negatives: str = "random"
    mode: str = "dynamic"
    warmup_steps: int = 300
    # optimization
    optimizer: str = "adam"
    lr: float = 0.003
    clip: float = 5.0
    steps: int = 500
    batch_size: int = 12
    # outputs
    checkpoint: str = "model.ckpt"
    metrics: str = "metrics.csv"

    def validate(self):
        choices = {
            "grammar": tuple(GRAMMARS),
            "masking": ("scene_graph", "word"),
            "negatives": ("random", "hardest"),
            "mode": ("dynamic", "static"),
            "optimizer": tuple(OPTIMIZERS),
            "pool": POOLING,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ("n_images", "steps", "warmup_steps"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        for key in ("d", "n_layers", "n_heads", "d_ff", "n_regions", "K", "L", "m"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        for key in ("alpha", "lambda_irtm", "lambda_mlm", "lambda_istm", "lambda_wod",
                    "lambda_woc", "clip"):
            v = getattr(self, key)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{key} must be finite and >= 0, got {v}")
        for key in ("tau", "lr"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be > 0")
        if not 0 < self.mask_ratio <= 1:
            raise ConfigError("mask_ratio must be in (0, 1]")
        return self

    def estimator_params(self):
        """Keyword arguments for :class:`tagsdc.estimator.TagsDCMatcher`."""
        skip = {"seed", "n_images", "data_seed", "data", "checkpoint", "metrics"}
        params = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}
        params["random_state"] = self.seed
        return params

    def to_text(self):
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def normalize_key(key):
    return key.strip().replace("-", "_")


def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def coerce(key, raw):
    """Convert the string ``raw`` to the declared type of ``key``."""
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            return _BOOL[raw.lower()]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value {raw!r} for {key} (expected {kind})") from None
    return raw


def parse_config_text(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment. Returns a dict of typed values."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = normalize_key(key)
        try:
            values[key] = coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` (raw strings)."""
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_config_text(fh.read(), str(path)))
    for key, raw in (overrides or {}).items():
        key = normalize_key(key)
        values[key] = coerce(key, raw) if isinstance(raw, str) else raw
    return dataclasses.replace(RunConfig(), **values).validate()
