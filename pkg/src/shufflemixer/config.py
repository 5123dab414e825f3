"""Plain-text ``key = value`` run configuration with a fixed schema."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .data import TASKS, SynthSpec
from .network import DESK_CONFIG, DEFAULT_CONFIG, TINY_CONFIG, ConfigError, PyramidConfig

PRESETS = {"default": DEFAULT_CONFIG, "desk": DESK_CONFIG, "tiny": TINY_CONFIG}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    task: str = "binary-sphere"
    side: Optional[int] = None
    classes: int = 1
    num_volumes: int = 4
    noise: float = 0.02
    batch_size: int = 4
    steps: int = 300
    lr: float = 5e-4
    seed: int = 0
    eval_every: int = 25
    precision: str = "f32"
    channels: Optional[tuple] = None
    blocks: Optional[tuple] = None
    heads: Optional[tuple] = None
    windows: Optional[tuple] = None
    mlp_ratio: Optional[int] = None
    ases: str = "on"
    skip: str = "crossmerge"
    ablate: Optional[str] = None
    out_dir: str = "runs/default"

    def pyramid(self) -> PyramidConfig:
        base = PRESETS[self.preset]
        overrides = {k: getattr(self, k) for k in ("channels", "blocks", "heads", "windows", "mlp_ratio")
                     if getattr(self, k) is not None}
        if self.side is not None:
            overrides["input_size"] = self.side
        cfg = replace(base, out_channels=self.classes + 1, ases=self.ases, skip=self.skip,
                      ablate=self.ablate, **overrides)
        return cfg.validate()

    def synth(self) -> SynthSpec:
        return SynthSpec(task=self.task, count=self.num_volumes, side=self.pyramid().input_size,
                         classes=self.classes, noise=self.noise)

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "binary-sphere" and self.classes != 1:
            raise ConfigError("binary-sphere has exactly one foreground class")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        for name in ("batch_size", "num_volumes", "steps", "eval_every", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        self.pyramid()
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_INT_TUPLES = {"channels", "blocks", "heads", "windows"}
_INTS = {"side", "classes", "num_volumes", "batch_size", "steps", "seed", "eval_every", "mlp_ratio"}
_FLOATS = {"noise", "lr"}


def _coerce(key: str, raw: str):
    try:
        if key in _INT_TUPLES:
            return tuple(int(t) for t in raw.split(",") if t.strip())
        if key in _INTS:
            return int(raw)
        if key in _FLOATS:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    if key == "ablate" and raw in ("", "none"):
        return None
    return raw


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (t.strip() for t in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return replace(base or RunConfig(), **values)


def load_config(path, **overrides) -> RunConfig:
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()
