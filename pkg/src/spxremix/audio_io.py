"""Mono WAV reading/writing and polyphase resampling."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, kaiser_beta, resample_poly

from .errors import FormatError, PreconditionError, UnsupportedCodecError

log = logging.getLogger(__name__)

PCM16_SCALE = 32768.0

# Resampler design: 32 lower-rate periods on each side of the centre tap,
# cutoff at 0.45 x the lower sample rate, ~50 dB Kaiser stopband.
RESAMPLE_HALF_LENGTH = 32
RESAMPLE_CUTOFF = 0.45
RESAMPLE_ATTENUATION_DB = 50.0


class MultiChannelWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class AudioSignal:
    """A mono waveform with its sample rate.

    ``samples`` is stored as a read-only float64 array.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise PreconditionError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        x = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioSignal":
        return AudioSignal(samples, self.sample_rate)


def load_wav(path) -> AudioSignal:
    """Read a PCM-16 or float-32 RIFF/WAVE file.

    Integer PCM is scaled by 1/32768. Multi-channel files yield channel 0
    and emit a :class:`MultiChannelWarning`.
    """
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported" in msg:
            raise UnsupportedCodecError(f"{path}: {msg}") from exc
        raise FormatError(f"{path}: {msg}") from exc
    except (EOFError, OSError, struct.error) as exc:
        raise FormatError(f"{path}: {exc}") from exc

    if data.dtype == np.int16:
        x = data.astype(np.float64) / PCM16_SCALE
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise UnsupportedCodecError(f"{path}: sample type {data.dtype} is not PCM-16 or float-32")

    if x.ndim == 2:
        if x.shape[1] > 1:
            warnings.warn(f"{path}: {x.shape[1]} channels, using channel 0", MultiChannelWarning, stacklevel=2)
        x = x[:, 0]
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: non-finite samples")
    return AudioSignal(x, rate)


def _to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.clip(samples, -1.0, 1.0) * PCM16_SCALE
    # round half away from zero
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, -32768, 32767).astype(np.int16)


def save_wav(signal: AudioSignal, path, encoding: str = "float32") -> None:
    if len(signal) == 0:
        raise PreconditionError("cannot write an empty signal")
    if encoding == "pcm16":
        data = _to_pcm16(signal.samples)
    elif encoding == "float32":
        data = signal.samples.astype(np.float32)
    else:
        raise PreconditionError(f"unknown encoding {encoding!r}; use 'pcm16' or 'float32'")
    wavfile.write(Path(path), signal.sample_rate, data)


@lru_cache(maxsize=32)
def resampling_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc lowpass for an up/down polyphase resampler.

    Taps are defined at the upsampled rate and sum to one; the polyphase
    application restores the ``up`` gain lost to zero insertion.
    """
    factor = max(up, down)
    numtaps = 2 * RESAMPLE_HALF_LENGTH * factor + 1
    # firwin cutoff is relative to the Nyquist of the upsampled rate
    cutoff = 2.0 * RESAMPLE_CUTOFF / factor
    h = firwin(numtaps, cutoff, window=("kaiser", kaiser_beta(RESAMPLE_ATTENUATION_DB)))
    h = h / h.sum()
    h.setflags(write=False)
    return h


def resample_ratio(source_rate: int, target_rate: int) -> tuple[int, int]:
    g = gcd(int(source_rate), int(target_rate))
    return int(target_rate) // g, int(source_rate) // g


def resampled_length(n: int, source_rate: int, target_rate: int) -> int:
    # round half up, computed exactly in integers
    return (2 * n * target_rate + source_rate) // (2 * source_rate)


def resample_array(x: np.ndarray, source_rate: int, target_rate: int) -> np.ndarray:
    if target_rate <= 0 or source_rate <= 0:
        raise PreconditionError("sample rates must be positive")
    if source_rate == target_rate:
        return np.array(x, dtype=np.float64, copy=True)
    up, down = resample_ratio(source_rate, target_rate)
    y = resample_poly(np.asarray(x, dtype=np.float64), up, down, window=np.array(resampling_filter(up, down)))
    n_out = resampled_length(len(x), source_rate, target_rate)
    if len(y) >= n_out:
        return y[:n_out]
    return np.concatenate([y, np.zeros(n_out - len(y))])


def resample(signal: AudioSignal, target_rate: int) -> AudioSignal:
    if int(target_rate) != target_rate or target_rate <= 0:
        raise PreconditionError(f"target_rate must be a positive integer, got {target_rate!r}")
    return AudioSignal(resample_array(signal.samples, signal.sample_rate, int(target_rate)), int(target_rate))
