"""Versioned JSON run configuration.

A config file is a JSON object with an optional ``version`` and any subset of
the sections below; omitted fields take their defaults. Validation collects
every violation (named ``section.field``) before raising one ConfigError.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .autoencoder import AutoencoderConfig, AutoencoderTrainConfig
from .diffusion import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, SamplerConfig
from .errors import ConfigError, DataIOError
from .nets import UNetConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


@dataclass
class DataConfig:
    clips: int = 8
    frames: int = 24
    seed: int = 0
    resolution: int = 64
    motion_amplitude: float = 0.04
    fps: float = 8.0


@dataclass
class PoseGuiderConfig:
    channels: tuple = (16, 32, 64, 128)
    strides: tuple = (2, 2, 2, 1)


@dataclass
class ScheduleConfig:
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    kind: str = "linear"


@dataclass
class AnimateConfig:
    window: int = 24
    overlap: int = 8
    seed: int = 0


SECTIONS = {
    "data": DataConfig,
    "autoencoder": AutoencoderConfig,
    "vae_train": AutoencoderTrainConfig,
    "unet": UNetConfig,
    "pose_guider": PoseGuiderConfig,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "animate": AnimateConfig,
}

# fields whose default is None but which hold ints once resolved
_OPTIONAL_INT = {("train", "batch_size")}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    vae_train: AutoencoderTrainConfig = field(default_factory=AutoencoderTrainConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    pose_guider: PoseGuiderConfig = field(default_factory=PoseGuiderConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    animate: AnimateConfig = field(default_factory=AnimateConfig)
    version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        out = {"version": self.version}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out


def _type_error(value, default, optional_int: bool) -> str | None:
    if optional_int:
        default = 0
        if value is None:
            return None
    if isinstance(default, bool):
        return None if isinstance(value, bool) else "expected a boolean"
    if isinstance(default, int):
        return None if isinstance(value, int) and not isinstance(value, bool) else "expected an integer"
    if isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return None if ok else "expected a number"
    if isinstance(default, str):
        return None if isinstance(value, str) else "expected a string"
    if isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        return None if ok else "expected a list of integers"
    return None


def _range_violations(cfg: RunConfig) -> list[str]:
    out = []

    def need(cond, name, msg):
        if not cond:
            out.append(f"{name}: {msg}")

    d = cfg.data
    need(d.clips >= 1, "data.clips", f"must be >= 1, got {d.clips}")
    need(d.frames >= 1, "data.frames", f"must be >= 1, got {d.frames}")
    need(d.resolution >= 16, "data.resolution", f"must be >= 16, got {d.resolution}")
    need(d.motion_amplitude >= 0, "data.motion_amplitude", f"must be >= 0, got {d.motion_amplitude}")
    need(d.fps > 0, "data.fps", f"must be > 0, got {d.fps}")

    a = cfg.autoencoder
    need(a.channels_lat >= 1, "autoencoder.channels_lat", f"must be >= 1, got {a.channels_lat}")
    need(len(a.widths) >= 1 and min(a.widths, default=0) >= 1, "autoencoder.widths",
         "must be a non-empty list of positive ints")
    need(d.resolution % a.f == 0, "autoencoder.widths",
         f"downsampling factor {a.f} must divide data.resolution {d.resolution}")
    need(a.n_tok >= 1 and a.d_emb >= 1, "autoencoder.n_tok", "n_tok and d_emb must be >= 1")

    v = cfg.vae_train
    need(v.steps >= 0, "vae_train.steps", f"must be >= 0, got {v.steps}")
    need(v.batch_size >= 1, "vae_train.batch_size", f"must be >= 1, got {v.batch_size}")
    need(v.lr > 0, "vae_train.lr", f"must be > 0, got {v.lr}")

    u = cfg.unet
    need(u.latent_channels == a.channels_lat, "unet.latent_channels",
         f"must equal autoencoder.channels_lat ({a.channels_lat}), got {u.latent_channels}")
    need(u.context_dim == a.d_emb, "unet.context_dim",
         f"must equal autoencoder.d_emb ({a.d_emb}), got {u.context_dim}")
    need(u.base_channels >= 1, "unet.base_channels", f"must be >= 1, got {u.base_channels}")
    need(all(0 <= i < u.levels for i in u.attention_levels), "unet.attention_levels",
         f"entries must be in [0, {u.levels})")
    need(u.t_emb_dim >= 2 and u.t_emb_dim % 2 == 0, "unet.t_emb_dim", "must be even and >= 2")

    g = cfg.pose_guider
    need(len(g.channels) == len(g.strides) and len(g.channels) >= 1, "pose_guider.strides",
         "must have one stride per channel entry")
    total = 1
    for s in g.strides:
        total *= s
    need(total == a.f, "pose_guider.strides",
         f"total stride {total} must equal the autoencoder downsampling factor {a.f}")

    s = cfg.schedule
    need(s.T >= 1, "schedule.T", f"must be >= 1, got {s.T}")
    need(0 < s.beta_start <= s.beta_end < 1, "schedule.beta_start",
         f"need 0 < beta_start <= beta_end < 1, got [{s.beta_start}, {s.beta_end}]")
    need(s.kind == "linear", "schedule.kind", f"only 'linear' is supported, got {s.kind!r}")

    out.extend(f"train.{m}" for m in cfg.train.violations())

    sm = cfg.sampler
    need(1 <= sm.num_steps <= s.T, "sampler.num_steps", f"must be in [1, schedule.T], got {sm.num_steps}")
    need(sm.eta >= 0, "sampler.eta", f"must be >= 0, got {sm.eta}")

    an = cfg.animate
    need(an.window >= 2, "animate.window", f"must be >= 2, got {an.window}")
    need(0 <= an.overlap < an.window, "animate.overlap",
         f"must be in [0, window), got {an.overlap}")
    return out


def validate_config(raw: dict) -> RunConfig:
    """Fill defaults and check every field; raises ConfigError listing all violations."""
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    errs = []
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errs.append(f"version: unsupported schema version {version!r} (expected {SCHEMA_VERSION})")
    for key in raw:
        if key != "version" and key not in SECTIONS:
            errs.append(f"{key}: unknown section")
    built = {}
    for name, cls in SECTIONS.items():
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            errs.append(f"{name}: must be an object")
            continue
        defaults = {f.name: f.default for f in fields(cls)}
        # badly typed fields are reported and fall back to their defaults so
        # that range checks on the remaining fields still run
        kwargs = {}
        for key, value in sec.items():
            if key not in defaults:
                errs.append(f"{name}.{key}: unknown field")
                continue
            msg = _type_error(value, defaults[key], (name, key) in _OPTIONAL_INT)
            if msg:
                errs.append(f"{name}.{key}: {msg}, got {value!r}")
                continue
            if isinstance(defaults[key], tuple):
                value = tuple(value)
            elif isinstance(defaults[key], float):
                value = float(value)
            kwargs[key] = value
        try:
            built[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            errs.append(f"{name}: {exc}")
            built[name] = cls()
    cfg = RunConfig(**built)
    errs += _range_violations(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Return a copy of ``raw`` with ``{"section.field": value}`` overrides applied (None skipped)."""
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    # a non-object section is left alone so validation reports it
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        out.setdefault(section, {})
        if isinstance(out[section], dict):
            out[section][key] = value
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataIOError(path, "cannot read config") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<root>: invalid JSON ({exc})"]) from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = read_config_file(path) if path is not None else {}
    return validate_config(apply_overrides(raw, overrides or {}))


def dump_config(cfg: RunConfig) -> str:
    """Canonical form: sorted keys, two-space indent, every field explicit."""
    return json.dumps(cfg.to_json(), sort_keys=True, indent=2) + "\n"
