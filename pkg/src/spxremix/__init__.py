"""Time-domain target speaker extraction with speaker reinforcement remixing."""

from .audio_io import AudioSignal, load_wav, resample, save_wav
from .errors import SpxError
from .metrics import MetricValue, sisdr, snr, stoi
from .model import TINY_CONFIG, SpxConfig, SpxModel, forward, load_checkpoint, save_checkpoint
from .reinforcement import DEFAULT_SIGMAS, ENHANCED_ONLY, UNPROCESSED, alpha_for_sigma, remix

__version__ = "0.1.0"

__all__ = [
    "AudioSignal", "load_wav", "save_wav", "resample", "SpxError", "MetricValue", "sisdr", "snr", "stoi",
    "SpxConfig", "SpxModel", "TINY_CONFIG", "forward", "load_checkpoint", "save_checkpoint",
    "DEFAULT_SIGMAS", "ENHANCED_ONLY", "UNPROCESSED", "alpha_for_sigma", "remix",
]
