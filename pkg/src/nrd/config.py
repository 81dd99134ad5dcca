"""Flat ``key = value`` configuration files.

One key per line, ``#`` starts a comment, unknown keys are rejected. Tuples
are comma-separated, booleans are ``true``/``false``.
"""

import dataclasses
from dataclasses import dataclass

from . import core, model


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    seed: int = 0
    # model
    decoder: str = "nrd"
    num_classes: int = 4
    nrd_hidden: int = 16
    guidance_channels: int = 16
    use_coords: bool = True
    enc_widths: tuple = (16, 32, 64, 128, 256)
    controller_hidden: int = 512
    guidance_hidden: int = 32
    neck: bool = False
    # optimisation
    base_lr: float = 0.01
    poly_power: float = 0.9
    weight_decay: float = 0.0005
    momentum: float = 0.9
    max_iters: int = 2000
    batch_size: int = 8
    crop: int = 64
    hflip: bool = True
    # bookkeeping
    checkpoint_interval: int = 0
    val_interval: int = 0
    trimap_width: int = 3
    data: str = ""
    out_dir: str = ""

    def model_config(self):
        return model.ModelConfig(
            decoder=self.decoder,
            encoder=model.EncoderConfig(
                widths=tuple(self.enc_widths),
                controller_hidden=self.controller_hidden,
                guidance_hidden=self.guidance_hidden,
                neck=self.neck,
            ),
            nrd=core.NrdConfig(
                r=model.ENCODER_STRIDE,
                num_classes=self.num_classes,
                hidden=self.nrd_hidden,
                guidance_channels=self.guidance_channels,
                use_coords=self.use_coords,
            ),
        )

    def validate(self):
        if self.base_lr < 0:
            raise ConfigError("base_lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.max_iters < 1 or self.batch_size < 1:
            raise ConfigError("max_iters and batch_size must be >= 1")
        if self.crop % 32 or self.crop < 32:
            raise ConfigError("crop must be a positive multiple of 32")
        self.model_config()
        return self


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(kind, key, text):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _field_types(cls):
    types = {"int": int, "float": float, "bool": bool, "tuple": tuple, "str": str}
    return {f.name: types.get(f.type, f.type) if isinstance(f.type, str) else f.type for f in dataclasses.fields(cls)}


def dump_config(cfg):
    lines = [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_config(text, cls=RunConfig):
    types = _field_types(cls)
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}; known keys: {', '.join(types)}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse(types[key], key, value)
    return cls(**values)


def load_config(path, cls=RunConfig):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), cls)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_config(cfg))
