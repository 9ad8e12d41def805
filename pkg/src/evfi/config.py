"""Run configuration: a flat ``key = value`` text document with ``#`` comments."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

SEED_ENV = "EVFI_SEED"


class ConfigError(ValueError):
    pass


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _join(values) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    kind: str = "translate"
    size: int = 64
    speed: float = 3.0
    substeps: int = 8
    intervals: int = 1
    n_train: int = 32
    n_test: int = 8
    contrast_threshold: float = 0.2
    bins: int = 16
    stage: int = 1
    steps: int = 1500
    batch: int = 4
    crop: int = 32
    lr: float = 1e-3
    lr_decay_fraction: float = 0.4
    lr_decay_rate: float = 0.5
    lambda_photo: float = 1.0
    lambda_smooth: float = 0.1
    smooth_warmup: float = 0.4
    lambda_scales: tuple = (0.1, 0.1, 1.0)
    flow_channels: int = 8
    flow_stages: str = "EFI"
    synth_channels: int = 8
    heads: int = 2
    flow_checkpoint: str = ""
    synth_checkpoint: str = ""
    skips: tuple = (7,)
    mode: str = "middle"
    t: float = 0.5

    def __post_init__(self):
        if self.kind not in ("translate", "rotate", "static"):
            raise ConfigError(f"unknown kind {self.kind!r}")
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.mode not in ("middle", "whole"):
            raise ConfigError(f"mode must be middle or whole, got {self.mode!r}")
        for name in ("steps", "batch", "size", "substeps", "bins", "n_train", "flow_channels", "synth_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.smooth_warmup < 1.0:
            raise ConfigError(f"smooth_warmup must lie in [0, 1), got {self.smooth_warmup}")
        if len(self.lambda_scales) != 3:
            raise ConfigError("lambda_scales needs three comma-separated weights")
        if not set(self.flow_stages) <= set("EFI") or "E" not in self.flow_stages:
            raise ConfigError(f"flow_stages must contain E and only E, F, I; got {self.flow_stages!r}")
        if not 0.0 < self.t < 1.0:
            raise ConfigError(f"t must lie strictly inside (0, 1), got {self.t}")

    def with_env(self, environ=None) -> "RunConfig":
        """Apply the ``EVFI_SEED`` override."""
        environ = os.environ if environ is None else environ
        if SEED_ENV in environ:
            try:
                return replace(self, seed=int(environ[SEED_ENV]))
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from exc
        return self

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            text = _join(value) if isinstance(value, tuple) else repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "lambda_scales": _parse_floats,
    "skips": _parse_ints,
}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    types = {f.name: type(getattr(base, f.name)) for f in fields(base)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _PARSERS:
                values[key] = _PARSERS[key](value)
            elif types[key] is int:
                values[key] = int(value)
            elif types[key] is float:
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return replace(base, **values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
