"""Run configuration, named presets and the flat key/value config file.

File format (``config_version = 1`` on the first non-comment line)::

    # full-line comments start with '#'
    config_version = 1
    preset = "desk"
    mel.n_mels = 32
    denoiser.channel_multipliers = [1, 2, 2]
    guidance = 1.5

Values are JSON literals. Keys are ``section.field`` or top-level fields.
Environment variables ``TTAB_<SECTION>__<FIELD>`` (or ``TTAB_<FIELD>``)
override file values, e.g. ``TTAB_MEL__N_MELS=64``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .conditioning import ModalityGapSpec
from .diffusion.unet import DenoiserConfig
from .dsp import MelConfig
from .prior import PriorConfig

CONFIG_VERSION = 1
ENV_PREFIX = "TTAB_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    diffusion_steps: int = 200_000
    batch: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.0
    cond_dropout: float = 0.1
    checkpoint_every: int = 10_000
    prior_steps: int = 200_000
    log_every: int = 100


@dataclass(frozen=True)
class DataConfig:
    per_class: int = 64
    split_ratio: float = 0.9
    frames_per_video: int = 1
    resample_frames: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    """Desk-scale gap-experiment settings."""

    seeds: tuple[int, ...] = (0, 1, 2)
    fad_margin: float = 0.10
    cosine_margin: float = 0.3
    max_diffusion_loss: float = 0.2
    max_prior_loss: float = 0.05
    samples_per_query: int = 2


@dataclass(frozen=True)
class RunConfig:
    preset: str = "full"
    manifest: str = ""
    out_dir: str = "runs"
    seed: int = 0
    guidance: float = 1.5
    sample_count: int = 512
    train_schedule_steps: int = 4000
    inference_steps: int = 1000
    mel: MelConfig = field(default_factory=MelConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    gap: ModalityGapSpec = field(default_factory=ModalityGapSpec)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    adapters: dict = field(default_factory=dict)

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if self.guidance < 0:
            raise ConfigError(f"guidance must be >= 0, got {self.guidance}")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be positive")
        if not 1 <= self.inference_steps <= self.train_schedule_steps:
            raise ConfigError("inference_steps must be in [1, train_schedule_steps]")
        if tuple(self.denoiser.input_shape) != (self.mel.n_mels, self.mel.clip_frames):
            raise ConfigError(
                f"denoiser.input_shape {self.denoiser.input_shape} != (mel.n_mels, mel.clip_frames) "
                f"= {(self.mel.n_mels, self.mel.clip_frames)}"
            )
        if self.denoiser.cond_dim != self.prior.embed_dim:
            raise ConfigError("denoiser.cond_dim must equal prior.embed_dim")
        if self.gap.dim != self.denoiser.cond_dim and self.preset == "desk":
            raise ConfigError("gap.dim must equal denoiser.cond_dim for synthetic runs")
        if check_paths and self.manifest and not Path(self.manifest).exists():
            raise ConfigError(f"manifest {self.manifest!r} does not exist")
        return self

    def to_flat(self) -> dict:
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    flat[f"{f.name}.{sub.name}"] = _jsonable(getattr(value, sub.name))
            else:
                flat[f.name] = _jsonable(value)
        return flat

    def to_text(self) -> str:
        lines = [f"config_version = {CONFIG_VERSION}"]
        lines += [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in sorted(self.to_flat().items())]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def _coerce(template, value):
    if isinstance(template, tuple):
        return tuple(_coerce(template[0], v) if template else v for v in value)
    if isinstance(template, bool):
        return bool(value)
    if isinstance(template, float) and isinstance(value, int):
        return float(value)
    return value


def desk_preset() -> RunConfig:
    """Single-CPU toy scale: 32x32 mels, small networks, a few thousand steps."""
    mel = MelConfig(n_mels=32, clip_frames=32)
    return RunConfig(
        preset="desk",
        mel=mel,
        denoiser=DenoiserConfig(
            input_shape=(32, 32), base_channels=16, channel_multipliers=(1, 2, 2), attention_resolutions=(4,),
            cond_dim=32, time_embed_dim=64,
        ),
        prior=PriorConfig(
            n_layers=4, model_dim=64, n_heads=4, token_seq_len=16, embed_dim=32, lr=3e-4, ema_decay=0.995,
            batch=64,
        ),
        train=TrainConfig(diffusion_steps=2000, batch=16, lr=1e-3, checkpoint_every=500, prior_steps=1000,
                          log_every=250),
        data=DataConfig(per_class=96),
        sample_count=96,
        inference_steps=50,
        gap=ModalityGapSpec(dim=32),
    )


PRESETS = {"full": RunConfig, "desk": desk_preset}


def apply_overrides(cfg: RunConfig, flat: dict) -> RunConfig:
    top: dict = {}
    sections: dict[str, dict] = {}
    names = {f.name for f in dataclasses.fields(cfg)}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section not in names:
            raise ConfigError(f"unknown config key {key!r}")
        if name:
            sub = getattr(cfg, section)
            if not dataclasses.is_dataclass(sub) or name not in {f.name for f in dataclasses.fields(sub)}:
                raise ConfigError(f"unknown config key {key!r}")
            sections.setdefault(section, {})[name] = _coerce(getattr(sub, name), value)
        else:
            top[section] = _coerce(getattr(cfg, section), value)
    for section, values in sections.items():
        try:
            top[section] = dataclasses.replace(getattr(cfg, section), **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{section}] values: {exc}") from exc
    return dataclasses.replace(cfg, **top)


def parse_config_text(text: str) -> dict:
    flat = {}
    version = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        try:
            value = json.loads(raw.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: value for {key!r} is not a JSON literal ({exc.msg})") from None
        if key == "config_version":
            version = value
            continue
        flat[key] = value
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version must be {CONFIG_VERSION}, got {version}")
    return flat


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    flat = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower().replace("__", ".")
        try:
            flat[key] = json.loads(raw)
        except json.JSONDecodeError:
            flat[key] = raw
    return flat


def load_config(path=None, overrides: dict | None = None, environ=None, preset: str | None = None) -> RunConfig:
    flat = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {str(p)!r} not found")
        flat = parse_config_text(p.read_text())
    flat.update(env_overrides(environ))
    flat.update(overrides or {})
    name = preset or flat.pop("preset", None) or "full"
    flat.pop("preset", None)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return apply_overrides(PRESETS[name](), flat)
