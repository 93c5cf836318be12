"""Pipeline and training configuration, plus the key=value config file format.

Desk-scale defaults are chosen so the whole pipeline trains in minutes-to-an-
hour on a desktop CPU while keeping every algorithmic element: 64 synthetic
96x96 training images, 5k pre-training and 3k fine-tuning steps, window
radius 7 during training (15 at inference), learning rate 1e-3 with two
10^-0.5 drops at 60% and 85% of fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..matcher import MatcherArch
from ..refine import RefineArch


class ConfigError(Exception):
    """Raised for malformed config files or invalid option values."""


@dataclass(frozen=True)
class SigmaMode:
    """Noise level policy: a fixed sigma, or blind uniform over [low, high]."""

    kind: str = "fixed"
    sigma: float = 25.0
    low: float = 0.0
    high: float = 55.0

    def __post_init__(self):
        if self.kind not in ("fixed", "blind"):
            raise ConfigError(f"sigma mode must be 'fixed' or 'blind', got {self.kind!r}")
        if self.kind == "fixed" and self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.kind == "blind" and not self.low < self.high:
            raise ConfigError(f"blind range needs low < high, got [{self.low}, {self.high}]")

    def draw(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.sigma
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class DenoiseConfig:
    """Everything the denoising pipeline needs besides the checkpoints."""

    patch_size: int = 8
    context_size: int = 16
    window_radius: int = 15
    sigma_mode: SigmaMode = field(default_factory=SigmaMode)
    stage: str = "full"
    seed: int = 0
    dtype: str = "float32"
    matcher_arch: MatcherArch = field(default_factory=MatcherArch)
    refine_arch: RefineArch = field(default_factory=RefineArch)

    def __post_init__(self):
        if self.patch_size != 8:
            raise ConfigError("patch size is fixed at 8")
        if self.context_size != self.patch_size + 8:
            raise ConfigError("context size must equal patch size + 8")
        if self.window_radius < 1:
            raise ConfigError(f"window radius must be >= 1, got {self.window_radius}")
        if self.stage not in ("match", "full"):
            raise ConfigError(f"stage must be 'match' or 'full', got {self.stage!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass(frozen=True)
class TrainSchedule:
    """Step budgets, batch composition, and the learning-rate schedule.

    Reference-scale batch composition is 16 images per pre-training batch and
    256 reference patches per fine-tuning batch; the desk defaults shrink
    those counts but keep the batch semantics (all non-overlapping patches
    paired with a within-image shuffle; each reference scored against every
    window candidate).
    """

    pretrain_steps: int = 5000
    finetune_steps: int = 3000
    refine_steps: int = 3000
    lr: float = 1e-3
    drop_fracs: tuple[float, float] = (0.6, 0.85)
    train_radius: int = 7
    pretrain_images: int = 6
    finetune_refs: int = 12
    refine_batch: int = 2
    refine_crop: int = 48

    def __post_init__(self):
        if min(self.pretrain_steps, self.finetune_steps, self.refine_steps) < 0:
            raise ConfigError("step counts must be >= 0")
        if not all(0.0 <= f <= 1.0 for f in self.drop_fracs):
            raise ConfigError("lr drop milestones must be fractions in [0, 1]")

    def milestones(self, total_steps: int) -> tuple[int, ...]:
        return tuple(int(round(f * total_steps)) for f in self.drop_fracs)

    def lr_at(self, step: int, total_steps: int) -> float:
        """Learning rate for a step, after 10^-0.5 drops at each milestone."""
        drops = sum(step >= m for m in self.milestones(total_steps))
        return self.lr * 10.0 ** (-0.5 * drops)


_DENOISE_KEYS = {
    "window_radius": int,
    "stage": str,
    "seed": int,
    "dtype": str,
    "sigma": float,
    "sigma_mode": str,
    "blind_low": float,
    "blind_high": float,
    "matcher_base_channels": int,
    "matcher_fc_width": int,
    "refine_hidden": int,
}

_SCHEDULE_KEYS = {
    "pretrain_steps": int,
    "finetune_steps": int,
    "refine_steps": int,
    "lr": float,
    "train_radius": int,
    "pretrain_images": int,
    "finetune_refs": int,
    "refine_batch": int,
    "refine_crop": int,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines with # comments into a raw dict."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value in {raw!r}")
        if key not in _DENOISE_KEYS and key not in _SCHEDULE_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown option {key!r}")
        values[key] = value
    return values


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def apply_options(config: DenoiseConfig, schedule: TrainSchedule, options: dict):
    """Overlay raw option strings onto config dataclasses."""
    cfg_kwargs: dict = {}
    sched_kwargs: dict = {}
    sigma_kwargs: dict = {}
    arch_kwargs: dict = {}
    for key, raw in options.items():
        caster = _DENOISE_KEYS.get(key) or _SCHEDULE_KEYS.get(key)
        try:
            value = caster(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
        if key in _SCHEDULE_KEYS:
            sched_kwargs[key] = value
        elif key == "sigma":
            sigma_kwargs["sigma"] = value
        elif key == "sigma_mode":
            sigma_kwargs["kind"] = value
        elif key == "blind_low":
            sigma_kwargs["low"] = value
        elif key == "blind_high":
            sigma_kwargs["high"] = value
        elif key == "matcher_base_channels":
            arch_kwargs["base_channels"] = value
        elif key == "matcher_fc_width":
            arch_kwargs["fc_width"] = value
        elif key == "refine_hidden":
            cfg_kwargs["refine_arch"] = RefineArch(hidden=value)
        else:
            cfg_kwargs[key] = value
    if sigma_kwargs:
        cfg_kwargs["sigma_mode"] = replace(config.sigma_mode, **sigma_kwargs)
    if arch_kwargs:
        cfg_kwargs["matcher_arch"] = replace(config.matcher_arch, **arch_kwargs)
    try:
        config = replace(config, **cfg_kwargs) if cfg_kwargs else config
        schedule = replace(schedule, **sched_kwargs) if sched_kwargs else schedule
    except ConfigError:
        raise
    return config, schedule
