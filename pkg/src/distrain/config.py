"""Flat key=value run configuration.

One key per line, ``#`` starts a comment, unknown keys are rejected with
the full valid-key list. Parsing then re-emitting a config yields an
equivalent parse.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import SynthSpec
from .errors import ConfigError
from .optim import TrainConfig

_VALID_MODES = ("baseline", "distraction")
_VALID_OCCLUSION = ("zero", "random", "one", "off")


@dataclass
class RunConfig:
    mode: str = "distraction"
    p: float = 0.25
    th: float = 0.85
    occlusion_mode: str = "zero"
    batch_size: int = 16
    lr: float = 0.00005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 0.0000007
    patience: int = 30
    max_epochs: int = 200
    image_size: int = 64
    runs: int = 5
    seed: int = 42
    augment_flip: bool = True
    augment_rotation: float = 40.0
    augment_channel_shift: float = 30.0
    augment_brightness: tuple = (0.5, 1.5)
    dataset: str = ""
    out: str = ""

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            input_size=self.image_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            patience=self.patience,
            max_epochs=self.max_epochs,
            p=self.p if self.mode == "distraction" else 0.0,
            th=self.th,
            occlusion_mode=self.occlusion_mode if self.mode == "distraction" else "off",
            augment_flip=self.augment_flip,
            augment_rotation=self.augment_rotation,
            augment_channel_shift=self.augment_channel_shift,
            augment_brightness=self.augment_brightness,
            seed=seed,
        ).validate()


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(key: str, value: str) -> bool:
    try:
        return _BOOL_WORDS[value.lower()]
    except KeyError:
        raise ConfigError(f"config key {key}: expected true/false, got {value!r}")


def _parse_range(key: str, value: str) -> tuple:
    try:
        lo, hi = value.split(":")
        return float(lo), float(hi)
    except ValueError:
        raise ConfigError(f"config key {key}: expected LO:HI, got {value!r}")


_PARSERS = {
    "mode": str,
    "p": float,
    "th": float,
    "occlusion_mode": str,
    "batch_size": int,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "patience": int,
    "max_epochs": int,
    "image_size": int,
    "runs": int,
    "seed": int,
    "augment_flip": _parse_bool,
    "augment_rotation": float,
    "augment_channel_shift": float,
    "augment_brightness": _parse_range,
    "dataset": str,
    "out": str,
}


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(
                f"unknown config key {key!r}; valid keys: {', '.join(sorted(_PARSERS))}"
            )
        parser = _PARSERS[key]
        try:
            if parser in (_parse_bool, _parse_range):
                parsed = parser(key, value)
            else:
                parsed = parser(value)
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"config key {key}: cannot parse value {value!r}")
        setattr(cfg, key, parsed)
    return validate_config(cfg)


def validate_config(cfg: RunConfig) -> RunConfig:
    if cfg.mode not in _VALID_MODES:
        raise ConfigError(f"mode must be one of {_VALID_MODES}, got {cfg.mode!r}")
    if cfg.occlusion_mode not in _VALID_OCCLUSION:
        raise ConfigError(
            f"occlusion_mode must be one of {_VALID_OCCLUSION}, got {cfg.occlusion_mode!r}"
        )
    if cfg.runs < 1:
        raise ConfigError(f"runs must be >= 1, got {cfg.runs}")
    if cfg.mode == "distraction" and cfg.occlusion_mode != "off":
        if not (0.0 <= cfg.p < 1.0):
            raise ConfigError(f"p must lie in [0, 1), got {cfg.p}")
    if not (0.0 < cfg.th < 1.0):
        raise ConfigError(f"th must lie in (0, 1), got {cfg.th}")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {cfg.batch_size}")
    if not cfg.dataset:
        raise ConfigError("config key 'dataset' is required (path or synth:...)")
    if not cfg.out:
        raise ConfigError("config key 'out' is required")
    return cfg


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    return parse_config_text(text)


def emit_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "augment_brightness":
            value = f"{value[0]}:{value[1]}"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


_SYNTH_KEYS = {
    "classes": ("num_classes", int),
    "per_class": ("per_class", int),
    "size": ("canvas", int),
    "cue": ("cue_size", int),
    "redundancy": ("redundancy", int),
    "clutter": ("clutter", float),
    "seed": ("seed", int),
}


def parse_synth_spec(text: str, default_seed: int) -> SynthSpec:
    """Parse "synth:key=value,..." dataset strings.

    Keys: classes, per_class, size, cue, redundancy, clutter, seed
    (seed defaults to the run seed).
    """
    if not text.startswith("synth:"):
        raise ConfigError(f"not a synth dataset spec: {text!r}")
    spec = SynthSpec(seed=default_seed)
    body = text[len("synth:") :]
    if body:
        for item in body.split(","):
            if "=" not in item:
                raise ConfigError(f"synth spec needs key=value items, got {item!r}")
            key, value = item.split("=", 1)
            if key not in _SYNTH_KEYS:
                raise ConfigError(
                    f"unknown synth key {key!r}; valid: {', '.join(sorted(_SYNTH_KEYS))}"
                )
            attr, conv = _SYNTH_KEYS[key]
            try:
                setattr(spec, attr, conv(value))
            except ValueError:
                raise ConfigError(f"synth key {key}: cannot parse value {value!r}")
    try:
        spec.validate()
    except Exception as exc:
        raise ConfigError(f"invalid synth spec: {exc}")
    return spec
