"""Configuration records and the flat ``key=value`` file format.

One setting per line, ``#`` starts a comment, blank lines are ignored.  Keys
are validated against :data:`SCHEMA`; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Invalid or unknown configuration setting."""


@dataclass(frozen=True)
class EmbedConfig:
    """Patch grid geometry shared by the prosecution and defendant networks.

    ``grid`` is p (the image is cut into p x p patches) and ``channel_mult``
    is c, so the embedded width is ``(H/p) * (W/p) * c``.
    """

    image_h: int = 56
    image_w: int = 56
    grid: int = 14
    channel_mult: int = 4

    def __post_init__(self):
        if self.grid <= 0 or self.image_h % self.grid or self.image_w % self.grid:
            raise ConfigError(f"grid {self.grid} must divide image size {self.image_h}x{self.image_w}")
        if self.channel_mult <= 0:
            raise ConfigError("channel_mult must be positive")

    @property
    def patch_h(self) -> int:
        return self.image_h // self.grid

    @property
    def patch_w(self) -> int:
        return self.image_w // self.grid

    @property
    def patch_pixels(self) -> int:
        return self.patch_h * self.patch_w

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def embed_dim(self) -> int:
        return self.patch_pixels * self.channel_mult


@dataclass(frozen=True)
class ProsecutionConfig:
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    n_blocks: int = 4
    growth: int = 32
    heads: int = 4
    groups: int = 4
    out_bias: float = -4.0

    def __post_init__(self):
        if self.growth % self.heads:
            raise ConfigError(f"heads {self.heads} must divide dense width {self.growth}")
        if self.embed.num_patches % self.groups:
            raise ConfigError(f"groups {self.groups} must divide patch count {self.embed.num_patches}")

    def width_after(self, i: int) -> int:
        return self.embed.embed_dim + self.growth * i


@dataclass(frozen=True)
class DefendantConfig:
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    # two blocks keep a full toy training run near the CPU budget; depth is unstated upstream
    n_blocks: int = 2
    heads: int = 4
    out_bias: float = -4.0

    def __post_init__(self):
        if self.embed.embed_dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide embed width {self.embed.embed_dim}")


@dataclass(frozen=True)
class JuryConfig:
    image_h: int = 56
    image_w: int = 56
    conv_channels: tuple[int, ...] = (16, 32, 64, 64)
    fc_hidden: tuple[int, ...] = (128, 32)

    def __post_init__(self):
        # every stride-2 layer must see at least 2x2 input, otherwise it no longer downsamples
        h, w = self.image_h, self.image_w
        for _ in self.conv_channels:
            if h < 2 or w < 2:
                raise ConfigError(
                    f"image {self.image_h}x{self.image_w} too small for {len(self.conv_channels)} stride-2 convolutions"
                )
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1

    @property
    def feature_hw(self) -> tuple[int, int]:
        h, w = self.image_h, self.image_w
        for _ in self.conv_channels:
            h = (h + 2 - 3) // 2 + 1
            w = (w + 2 - 3) // 2 + 1
        return h, w


@dataclass(frozen=True)
class LossConfig:
    gamma: int = 3
    abl_weight: float = 10.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.gamma < 0 or int(self.gamma) != self.gamma:
            raise ConfigError("gamma must be a non-negative integer")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int = 200
    lr_start: float = 1e-7
    lr_max: float = 2.5e-5

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")
        if self.lr_max < self.lr_start:
            raise ConfigError("lr_max must be at least lr_start")


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    no_jury: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: Schedule = field(default_factory=Schedule)
    adam: AdamConfig = field(default_factory=AdamConfig)


# flat key -> (section, attribute, parser)
def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA: dict[str, tuple[str, str, Any]] = {
    "image_h": ("embed", "image_h", int),
    "image_w": ("embed", "image_w", int),
    "grid": ("embed", "grid", int),
    "channel_mult": ("embed", "channel_mult", int),
    "pros_blocks": ("prosecution", "n_blocks", int),
    "dense_width": ("prosecution", "growth", int),
    "pros_heads": ("prosecution", "heads", int),
    "fine_groups": ("prosecution", "groups", int),
    "pros_out_bias": ("prosecution", "out_bias", float),
    "def_blocks": ("defendant", "n_blocks", int),
    "def_heads": ("defendant", "heads", int),
    "def_out_bias": ("defendant", "out_bias", float),
    "jury_channels": ("jury", "conv_channels", _ints),
    "jury_hidden": ("jury", "fc_hidden", _ints),
    "gamma": ("loss", "gamma", int),
    "abl_weight": ("loss", "abl_weight", float),
    "epsilon": ("loss", "epsilon", float),
    "warmup_steps": ("schedule", "warmup_steps", int),
    "lr_start": ("schedule", "lr_start", float),
    "lr_max": ("schedule", "lr_max", float),
    "beta1": ("adam", "beta1", float),
    "beta2": ("adam", "beta2", float),
    "adam_eps": ("adam", "eps", float),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "seed": ("train", "seed", int),
    "no_jury": ("train", "no_jury", _bool),
    "threshold": ("run", "threshold", float),
}


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a training/evaluation run, resolved to defaults."""

    embed: EmbedConfig = field(default_factory=EmbedConfig)
    prosecution: ProsecutionConfig = field(default_factory=ProsecutionConfig)
    defendant: DefendantConfig = field(default_factory=DefendantConfig)
    jury: JuryConfig = field(default_factory=JuryConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: float = 0.5

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "RunConfig":
        sections: dict[str, dict[str, Any]] = {
            k: {} for k in ("embed", "prosecution", "defendant", "jury", "loss", "schedule", "adam", "train", "run")
        }
        for key, raw in values.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key: {key}")
            section, attr, parse = SCHEMA[key]
            try:
                sections[section][attr] = parse(str(raw))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        try:
            embed = EmbedConfig(**sections["embed"])
            train = TrainConfig(
                loss=LossConfig(**sections["loss"]),
                schedule=Schedule(**sections["schedule"]),
                adam=AdamConfig(**sections["adam"]),
                **sections["train"],
            )
            return cls(
                embed=embed,
                prosecution=ProsecutionConfig(embed=embed, **sections["prosecution"]),
                defendant=DefendantConfig(embed=embed, **sections["defendant"]),
                jury=JuryConfig(image_h=embed.image_h, image_w=embed.image_w, **sections["jury"]),
                train=train,
                **sections["run"],
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for key, (section, attr, _) in SCHEMA.items():
            if section == "run":
                obj = self
            elif section in ("loss", "schedule", "adam"):
                obj = getattr(self.train, section)
            else:
                obj = getattr(self, section)
            value = getattr(obj, attr)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            out[key] = str(value)
        return out

    def replace(self, **flat: Any) -> "RunConfig":
        values = self.to_mapping()
        values.update({k: str(v) for k, v in flat.items()})
        return RunConfig.from_mapping(values)


def parse_kv(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        values[key] = value
    return values


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_kv(values: Mapping[str, Any]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def load_run_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    values = read_kv(path) if path else {}
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    return RunConfig.from_mapping(values)


def dataclass_from_kv(cls, values: Mapping[str, str]):
    """Build a flat dataclass from string values, converting by field type."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown {cls.__name__} key: {key}")
        default = fields[key].default
        try:
            if isinstance(default, bool):
                kwargs[key] = _bool(raw)
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            elif isinstance(default, tuple):
                kwargs[key] = tuple(float(v) for v in raw.split(","))
            else:
                kwargs[key] = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    return cls(**kwargs)
