"""Model configuration, named presets and the flat ``key=value`` config format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    num_classes: int = 4
    base_channels: int = 16
    K: int = 128
    d: int = 512
    L: int = 4
    heads: int = 8
    ffn_hidden: int = 4096
    os: int = 8
    patch_unfold: int = 1
    skip_position: str = "conv3d"
    dropout_p: float = 0.2
    input_extent: tuple[int, int, int] = field(default=(128, 128, 128))

    def __post_init__(self):
        object.__setattr__(self, "input_extent", tuple(int(v) for v in self.input_extent))
        self.validate()

    # -- derived geometry -------------------------------------------------
    @property
    def num_downsamples(self) -> int:
        return int(round(math.log2(self.os)))

    @property
    def encoder_channels(self) -> list[int]:
        """Channel count after InitConv and after each downsample stage."""
        return [self.base_channels * 2**i for i in range(self.num_downsamples + 1)]

    @property
    def feature_extent(self) -> tuple[int, int, int]:
        """Spatial extent of the encoder output ``F``."""
        return tuple(n // self.os for n in self.input_extent)

    @property
    def token_grid(self) -> tuple[int, int, int]:
        return tuple(n // (self.os * self.patch_unfold) for n in self.input_extent)

    @property
    def num_tokens(self) -> int:
        return math.prod(self.token_grid)

    @property
    def token_features(self) -> int:
        """Channels entering the linear projection (``K * unfold^3``)."""
        return self.K * self.patch_unfold**3

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}", field=name)

        for name in ("in_channels", "num_classes", "base_channels", "K", "d", "heads", "ffn_hidden"):
            need(int(getattr(self, name)) >= 1, name, "must be a positive integer")
        need(self.L >= 0, "L", "must be non-negative")
        need(self.os in (4, 8, 16), "os", f"must be one of 4, 8, 16 (got {self.os})")
        need(self.patch_unfold in (1, 2), "patch_unfold", "must be 1 or 2")
        need(self.patch_unfold == 1 or self.os == 4, "patch_unfold", "2x2x2 unfolding is only defined for os=4")
        need(self.skip_position == "conv3d", "skip_position", "only 'conv3d' is supported")
        need(0 <= self.dropout_p < 1, "dropout_p", "must be in [0, 1)")
        need(self.d % self.heads == 0, "heads", f"d={self.d} is not divisible by heads={self.heads}")
        need(len(self.input_extent) == 3, "input_extent", "needs three extents")
        for n in self.input_extent:
            step = self.os * self.patch_unfold
            need(n % step == 0, "input_extent", f"extent {n} is not divisible by os*patch_unfold={step}")
        expected_k = self.base_channels * 2**self.num_downsamples
        need(
            self.K == expected_k,
            "K",
            f"channel doubling from base_channels={self.base_channels} over "
            f"{self.num_downsamples} downsamples gives {expected_k}, not {self.K}",
        )

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["input_extent"] = list(self.input_extent)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}", field=key)
        return cls(**{k: _coerce(k, v) for k, v in data.items()})


PRESETS: dict[str, ModelConfig] = {
    "full": ModelConfig(),
    "lightweight": ModelConfig(L=1, ffn_hidden=2048),
    "os16": ModelConfig(os=16, K=256),
    "os4": ModelConfig(os=4, patch_unfold=2, K=64),
    "tiny": ModelConfig(base_channels=8, K=64, d=128, L=2, heads=4, ffn_hidden=512, input_extent=(64, 64, 64)),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", field="preset") from None


_FIELD_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def _coerce(key: str, value):
    if not isinstance(value, str):
        if key == "input_extent":
            if isinstance(value, int):
                return (value,) * 3
            return tuple(int(v) for v in value)
        return value
    text = value.strip()
    try:
        if key == "input_extent":
            parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
            if len(parts) == 1:
                parts *= 3
            return tuple(parts)
        if key == "skip_position":
            return text
        if key == "dropout_p":
            return float(text)
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}", field=key) from None


def parse_config_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse ``key=value`` lines (``#`` comments allowed) over ``base`` (default: full)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})", field=key)
        values[key] = _coerce(key, value)
    return dataclasses.replace(base or ModelConfig(), **values)


def load_config(path) -> ModelConfig:
    return parse_config_text(Path(path).read_text())


def format_config(config: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        value = getattr(config, f.name)
        if f.name == "input_extent":
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
