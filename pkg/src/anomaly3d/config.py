"""Run configuration: defaults, strict line-oriented parsing, validation.

Config files are UTF-8 text, one `key = value` per line, `#` comments,
dotted section keys (`schedule.stage1_epochs = 250`).  Unknown keys are
errors.  Every default is either a published training hyperparameter or an
artifact default of this implementation (marked below).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .geometry import ViewSpec, centered_angles
from .encoder import EncoderSpec
from .synth import ANOMALY_KINDS, CATEGORIES


@dataclass
class ViewConfig:
    count: int = 9
    height: int = 84            # artifact default (desk scale)
    width: int = 84
    scale: float = 1.25         # artifact default
    angles: tuple[float, ...] | None = None   # default: count steps of pi/5, centered

    def to_spec(self) -> ViewSpec:
        angles = self.angles if self.angles is not None else centered_angles(self.count)
        return ViewSpec(view_count=self.count, rotation_angles=tuple(angles),
                        height=self.height, width=self.width, scale=self.scale)


@dataclass
class EncoderConfig:
    patch_size: int = 7         # artifact default (desk-scale grain)
    dim: int = 64               # artifact default (desk-scale echo of 768)
    kind: str = "surrogate"
    seed: int = 7

    def to_spec(self) -> EncoderSpec:
        return EncoderSpec(patch_size=self.patch_size, dim=self.dim,
                           kind=self.kind, seed=self.seed)


@dataclass
class ScheduleConfig:
    stage1_epochs: int = 250
    scr_start: int = 200
    stage2_epochs: int = 15
    dpca_start: int = 10
    lr: float = 1e-3
    batch: int = 4
    adam_beta1: float = 0.9     # artifact default (standard)
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class LossConfig:
    scr_lambda: float = 1.0
    lambda_con: float = 0.05
    tau: float = 0.07
    alpha: float = 0.5
    dice_eps: float = 1.0       # artifact default
    focal_gamma: float = 2.0    # artifact default
    focal_alpha: float = 0.25   # artifact default
    tau_on_2d_maps: bool = False
    detach_weights: bool = True
    normalized_consistency: bool = True
    visibility_normalized: bool = True   # artifact default (see README)
    prompt_length: int = 12
    fpr_limit: float = 0.3      # artifact default (benchmark-family convention)
    hidden_dim: int = 0         # 0 = same as encoder dim


@dataclass
class DataConfig:
    category: str = "sphere"
    test_categories: tuple[str, ...] | None = None   # default: the other three
    train_count: int = 16
    test_count: int = 8
    points: int = 6000
    anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
    anomaly_fraction: float = 0.1

    def resolved_test_categories(self) -> tuple[str, ...]:
        if self.test_categories is not None:
            return self.test_categories
        return tuple(c for c in CATEGORIES if c != self.category)


@dataclass
class RunConfig:
    views: ViewConfig = field(default_factory=ViewConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1

    def validate(self) -> "RunConfig":
        s, l, v, e, d = self.schedule, self.loss, self.views, self.encoder, self.data
        checks = [
            (s.scr_start <= s.stage1_epochs, "schedule.scr_start", "activation after stage end"),
            (s.dpca_start <= s.stage2_epochs, "schedule.dpca_start", "activation after stage end"),
            (s.scr_start >= 0 and s.dpca_start >= 0, "schedule", "activation epochs must be >= 0"),
            (s.stage1_epochs >= 0 and s.stage2_epochs >= 0, "schedule", "epochs must be >= 0"),
            (s.lr > 0, "schedule.lr", "learning rate must be positive"),
            (s.batch >= 1, "schedule.batch", "batch size must be >= 1"),
            (l.tau > 0, "loss.tau", "temperature must be positive"),
            (0.0 <= l.alpha <= 1.0, "loss.alpha", "fusion alpha must lie in [0, 1]"),
            (l.scr_lambda >= 0, "loss.scr_lambda", "reweighting strength must be >= 0"),
            (l.lambda_con >= 0, "loss.lambda_con", "contrastive weight must be >= 0"),
            (0 < l.fpr_limit <= 1, "loss.fpr_limit", "fpr limit must lie in (0, 1]"),
            (v.height % e.patch_size == 0 and v.width % e.patch_size == 0,
             "views", "image size must be divisible by encoder.patch_size"),
            (v.count >= 1, "views.count", "need at least one view"),
            (d.category in CATEGORIES, "data.category", "unknown category"),
            (0 < d.anomaly_fraction <= 0.3, "data.anomaly_fraction", "must lie in (0, 0.3]"),
            (self.threads >= 1, "run.threads", "threads must be >= 1"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}")
        if self.views.angles is not None and len(self.views.angles) != v.count:
            raise ConfigError("views.angles: length must equal views.count")
        for c in d.resolved_test_categories():
            if c not in CATEGORIES:
                raise ConfigError(f"data.test_categories: unknown category {c!r}")
        return self


_SECTIONS = {"views": ("views", ViewConfig), "encoder": ("encoder", EncoderConfig),
             "schedule": ("schedule", ScheduleConfig), "loss": ("loss", LossConfig),
             "data": ("data", DataConfig)}
_TOP_KEYS = {"seed": int, "out_dir": str, "threads": int}


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes", "on"):
        return True
    if raw.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_value(raw: str, annotation, key: str, line_no: int):
    raw = raw.strip()
    try:
        if annotation is int:
            return int(raw)
        if annotation is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError("must be finite")
            return value
        if annotation is bool:
            return _parse_bool(raw)
        if annotation is str:
            return raw
        if "tuple[float" in str(annotation):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if "tuple[str" in str(annotation):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"line {line_no}: bad value for {key}: {exc}") from exc
    raise ConfigError(f"line {line_no}: unsupported type for {key}")


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in fields(cls):
        t = f.type
        if t in ("int", int):
            out[f.name] = int
        elif t in ("float", float):
            out[f.name] = float
        elif t in ("bool", bool):
            out[f.name] = bool
        elif t in ("str", str):
            out[f.name] = str
        else:
            out[f.name] = t
    return out


def parse_config(path: str) -> RunConfig:
    """Strict parse: unknown keys, bad types and out-of-range values are errors."""
    cfg = RunConfig()
    with open(path, encoding="utf-8") as f:
        lines = f.readlines()
    for line_no, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in text.split("=", 1))
        if "." in key:
            section, _, name = key.partition(".")
            if section not in _SECTIONS:
                raise ConfigError(f"line {line_no}: unknown section {section!r} in key {key!r}")
            attr, cls = _SECTIONS[section]
            types = _field_types(cls)
            if name not in types:
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            target = getattr(cfg, attr)
            ann = types[name]
            if str(ann).startswith("tuple[float") or name == "angles":
                value = _parse_value(raw, "tuple[float]", key, line_no)
            elif str(ann).startswith("tuple[str") or name in ("anomaly_kinds", "test_categories"):
                value = _parse_value(raw, "tuple[str]", key, line_no)
            else:
                value = _parse_value(raw, ann, key, line_no)
            setattr(target, name, value)
        else:
            if key not in _TOP_KEYS:
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            setattr(cfg, key, _parse_value(raw, _TOP_KEYS[key], key, line_no))
    return cfg.validate()


def default_config() -> RunConfig:
    return RunConfig().validate()
