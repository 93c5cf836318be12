"""Training schedules, synthetic corpus, metrics, ablations, and the CLI."""

from .config import ConfigError, DenoiseConfig, SigmaMode, TrainSchedule, load_config_file
from .corpus import Corpus, synth_corpus
from .metrics import MetricsReport, evaluate, psnr, ssim

__all__ = [
    "ConfigError",
    "DenoiseConfig",
    "SigmaMode",
    "TrainSchedule",
    "load_config_file",
    "Corpus",
    "synth_corpus",
    "MetricsReport",
    "evaluate",
    "psnr",
    "ssim",
]
