"""Framing, overlap-add, STFT and one-third-octave band analysis."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio_io import AudioSignal
from .errors import ConfigurationError, PreconditionError

# STOI front-end constants
STOI_RATE = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_FFT = 512
NUM_BANDS = 15
MIN_BAND_FREQ = 150.0


@dataclass(frozen=True, eq=False)
class FrameMatrix:
    frames: np.ndarray  # [num_frames, frame_length]
    hop: int
    frame_length: int
    sample_rate: int = 1

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class Spectrogram:
    bins: np.ndarray  # complex, [num_frames, fft_size // 2 + 1]
    fft_size: int
    hop: int
    window: str
    sample_rate: int

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True, eq=False)
class ThirdOctaveBands:
    band_energies: np.ndarray  # [num_frames, 15]
    center_frequencies: np.ndarray


def num_frames(length: int, frame_length: int, hop: int) -> int:
    if length < frame_length:
        return 0
    return (length - frame_length) // hop + 1


def frame_array(x: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    if frame_length < 1 or hop < 1:
        raise PreconditionError("frame_length and hop must be >= 1")
    n = num_frames(len(x), frame_length, hop)
    if n == 0:
        return np.zeros((0, frame_length))
    windows = np.lib.stride_tricks.sliding_window_view(np.asarray(x, dtype=np.float64), frame_length)
    return windows[: (n - 1) * hop + 1 : hop].copy()


def frame_signal(signal: AudioSignal, frame_length: int, hop: int) -> FrameMatrix:
    """Split ``signal`` into overlapping frames; a trailing partial frame is dropped."""
    frames = frame_array(signal.samples, frame_length, hop)
    return FrameMatrix(frames, hop, frame_length, signal.sample_rate)


def overlap_add_array(frames: np.ndarray, hop: int) -> np.ndarray:
    n, frame_length = frames.shape
    if n == 0:
        return np.zeros(0)
    if hop > frame_length:
        raise PreconditionError(f"hop ({hop}) must not exceed frame_length ({frame_length})")
    out = np.zeros((n - 1) * hop + frame_length)
    for j in range(frame_length):
        out[j : j + (n - 1) * hop + 1 : hop] += frames[:, j]
    return out


def overlap_add(frames: FrameMatrix) -> AudioSignal:
    return AudioSignal(overlap_add_array(frames.frames, frames.hop), frames.sample_rate)


@lru_cache(maxsize=16)
def hann_window(frame_length: int) -> np.ndarray:
    """Hann window without the zero end points (MATLAB ``hanning``)."""
    w = np.hanning(frame_length + 2)[1:-1]
    w.setflags(write=False)
    return w


def stft_array(x: np.ndarray, frame_length: int, hop: int, fft_size: int) -> np.ndarray:
    frames = frame_array(x, frame_length, hop) * hann_window(frame_length)
    return np.fft.rfft(frames, n=fft_size, axis=1)


def stft(signal: AudioSignal, frame_length: int = STOI_FRAME, hop: int = STOI_HOP,
         fft_size: int = STOI_FFT, window: str = "hann") -> Spectrogram:
    if window != "hann":
        raise ConfigurationError(f"unsupported window {window!r}")
    if frame_length % 2 or fft_size < frame_length or hop < 1:
        raise ConfigurationError(
            f"need even frame_length <= fft_size and hop >= 1 (got {frame_length}, {fft_size}, {hop})")
    bins = stft_array(signal.samples, frame_length, hop, fft_size)
    return Spectrogram(bins, fft_size, hop, window, signal.sample_rate)


def band_center_frequencies(num_bands: int = NUM_BANDS, min_freq: float = MIN_BAND_FREQ) -> np.ndarray:
    return min_freq * 2.0 ** (np.arange(num_bands) / 3.0)


@lru_cache(maxsize=8)
def third_octave_matrix(sample_rate: int = STOI_RATE, fft_size: int = STOI_FFT,
                        num_bands: int = NUM_BANDS, min_freq: float = MIN_BAND_FREQ) -> np.ndarray:
    """Rectangular band masks, shape [num_bands, fft_size // 2 + 1].

    Band j nominally spans cf_j * 2**(-1/6) to cf_j * 2**(1/6). Each edge is
    snapped to the nearest FFT bin and the band covers bins [low, high), as
    in the reference STOI front end.
    """
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    cf = band_center_frequencies(num_bands, min_freq)
    low = np.argmin(np.abs(freqs[None, :] - (cf * 2.0 ** (-1.0 / 6.0))[:, None]), axis=1)
    high = np.argmin(np.abs(freqs[None, :] - (cf * 2.0 ** (1.0 / 6.0))[:, None]), axis=1)
    bins = np.arange(len(freqs))
    obm = ((bins[None, :] >= low[:, None]) & (bins[None, :] < high[:, None])).astype(np.float64)
    obm.setflags(write=False)
    return obm


def third_octave_analyze(spec: Spectrogram, sample_rate: int | None = None) -> ThirdOctaveBands:
    rate = spec.sample_rate if sample_rate is None else sample_rate
    if rate != STOI_RATE:
        raise ConfigurationError(f"third-octave analysis runs at {STOI_RATE} Hz, got {rate}")
    obm = third_octave_matrix(rate, spec.fft_size)
    energies = np.sqrt(np.abs(spec.bins) ** 2 @ obm.T)
    return ThirdOctaveBands(energies, band_center_frequencies())
