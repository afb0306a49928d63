"""Run configuration: `key = value` files, defaults, and derived configs.

Files use one `key = value` pair per line with `#` comments.  Unknown keys
and duplicate keys are rejected (typo protection).  The `lambda` key maps to
the frequency-loss weight.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .losses import LossConfig
from .model import ModelConfig
from .optim import Schedule

__all__ = ["RunConfig", "parse_config_file"]

# config-file key -> attribute; every other key matches its attribute name
_KEY_ALIASES = {"lambda": "fft_weight"}


@dataclass
class RunConfig:
    task: str = "blur"
    stack: int = 2
    channels: int = 16
    heads: int = 8
    frames: int = 4
    crop: int = 48
    steps: int = 400
    batch: int = 2
    lr: float = 1e-4
    lr_final: float = 1e-7
    fft_weight: float = 0.01
    epsilon: float = 1e-3
    per_pixel: bool = False
    seed: int = 0
    direction: str = "both"
    variant: str = "stsa"
    val_every: int = 50
    val_count: int = 3
    train_count: int = 12
    orientation: str = "mixed"  # degrees, `mixed` (0/90 per sequence), or
    # `alternating` (0/90 per frame)
    blur_length: int = 7
    rain_density: float = 0.0015
    moire_freq: float = 0.12
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.task not in ("blur", "rain", "moire"):
            raise ValueError(f"task must be blur, rain, or moire, got {self.task!r}")
        if self.channels % max(self.heads, 1) != 0 or self.heads < 1:
            raise ValueError(
                f"heads = {self.heads} is incompatible with channels = "
                f"{self.channels}: channels must divide evenly into heads"
            )
        if self.crop % 2:
            raise ValueError(f"crop must be even (encoder stride), got {self.crop}")
        if self.steps < 1 or self.batch < 1 or self.frames < 1:
            raise ValueError("steps, batch, and frames must all be >= 1")
        if self.val_every < 1 or self.val_count < 1 or self.train_count < 1:
            raise ValueError("val_every, val_count, train_count must all be >= 1")
        if self.orientation not in ("mixed", "alternating"):
            float(self.orientation)  # raises ValueError on junk

    def orientations(self) -> list[float]:
        """Orientation pool the sequence generator cycles through."""
        if self.orientation in ("mixed", "alternating"):
            return [0.0, 90.0]
        return [float(self.orientation)]

    def orientation_step(self) -> float:
        """Per-frame orientation advance; `alternating` flips 0/90 each frame."""
        return 90.0 if self.orientation == "alternating" else 0.0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_stsa_blocks=self.stack,
            base_channels=self.channels,
            heads=self.heads,
            frame_window=self.frames,
            directions=self.direction,
            variant=self.variant,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            epsilon=self.epsilon,
            fft_weight=self.fft_weight,
            per_pixel=self.per_pixel,
        )

    def schedule(self) -> Schedule:
        return Schedule(
            lr_init=self.lr, lr_final=self.lr_final, total_steps=self.steps
        )

    def resolved_text(self) -> str:
        """The full configuration as a reloadable `key = value` manifest."""
        inverse = {attr: key for key, attr in _KEY_ALIASES.items()}
        lines = []
        for name, value in asdict(self).items():
            key = inverse.get(name, name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, attr: str, raw: str, lineno: int):
    kind = _FIELD_TYPES[attr]
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(
            f"line {lineno}: key {key!r} expects {kind}, got {raw!r}"
        ) from None


def parse_config_file(path, overrides: dict | None = None) -> RunConfig:
    """Read a config file; `overrides` (attribute -> value) win over file keys."""
    values: dict[str, object] = {}
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(
                    f"{path}:{lineno}: expected `key = value`, got {text!r}"
                )
            key, raw = (part.strip() for part in text.split("=", 1))
            attr = _KEY_ALIASES.get(key, key)
            if attr not in _FIELD_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            if key in seen:
                raise ValueError(
                    f"{path}:{lineno}: duplicate key {key!r} "
                    f"(first set on line {seen[key]})"
                )
            seen[key] = lineno
            values[attr] = _convert(key, attr, raw, lineno)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)
