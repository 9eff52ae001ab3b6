"""Reference-based quality metrics: SI-SDR, STOI and SNR."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .audio_io import AudioSignal, resample_array
from .errors import InvalidReferenceError, ShapeError, TooShortError
from .signal_ops import (
    STOI_FFT,
    STOI_FRAME,
    STOI_HOP,
    STOI_RATE,
    frame_array,
    hann_window,
    overlap_add_array,
    stft_array,
    third_octave_matrix,
)

DB_CAP = 60.0

STOI_SEGMENT = 30
STOI_DYN_RANGE = 40.0
# lower SDR bound of -15 dB -> degraded envelopes clipped at (1 + 10**(15/20)) x clean
STOI_CLIP = 1.0 + 10.0 ** (15.0 / 20.0)
STOI_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    capped: bool = False

    def __float__(self) -> float:
        return self.value


def _cap(name: str, raw: float) -> MetricValue:
    if raw > DB_CAP:
        return MetricValue(name, DB_CAP, True)
    if raw < -DB_CAP:
        return MetricValue(name, -DB_CAP, True)
    return MetricValue(name, float(raw), False)


def _check_pair(a: AudioSignal, b: AudioSignal) -> None:
    if len(a) != len(b):
        raise ShapeError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ShapeError("signals are empty")


def _exact_ints(x: np.ndarray) -> tuple[list[int], int]:
    """Integers ``m`` and exponent ``e`` with ``x[i] == m[i] * 2**e`` exactly."""
    mant, exp = np.frexp(np.asarray(x, dtype=np.float64))
    m = (mant * 2.0**53).astype(np.int64)
    nz = m != 0
    if not nz.any():
        return [0] * len(m), 0
    e0 = int(exp[nz].min())
    shifts = (exp - e0).astype(np.int64)
    shifts[~nz] = 0
    return [int(a) << int(s) for a, s in zip(m.tolist(), shifts.tolist())], e0 - 53


def _idot(a: list[int], b: list[int]) -> int:
    return sum(map(int.__mul__, a, b))


def _log10_ratio(num: int, den: int) -> float:
    r = Fraction(num, den)
    try:
        f = float(r)
    except OverflowError:
        f = math.inf
    if f != 0.0 and math.isfinite(f):
        return math.log10(f)
    return math.log10(r.numerator) - math.log10(r.denominator)


def sisdr_raw(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Uncapped SI-SDR in dB, computed from exact integer inner products.

    With d = <s', s>, the projection energy is d^2/|s|^2 and the residual
    energy |s'|^2 - d^2/|s|^2, so the ratio reduces to
    d^2 / (|s'|^2 |s|^2 - d^2). The common power-of-two scale of each
    argument cancels, which makes the value exactly invariant to any
    representable rescaling of the estimate.
    """
    s, _ = _exact_ints(reference)
    e, _ = _exact_ints(estimate)
    ss = _idot(s, s)
    if ss == 0:
        raise InvalidReferenceError("reference has zero energy")
    d = _idot(e, s)
    num = d * d
    den = _idot(e, e) * ss - num
    if num == 0:
        return -math.inf
    if den == 0:
        return math.inf
    return 10.0 * _log10_ratio(num, den)


def sisdr(reference: AudioSignal, estimate: AudioSignal) -> MetricValue:
    _check_pair(reference, estimate)
    return _cap("sisdr_db", sisdr_raw(reference.samples, estimate.samples))


def snr(reference: AudioSignal, mixture: AudioSignal) -> MetricValue:
    _check_pair(reference, mixture)
    noise = mixture.samples - reference.samples
    ps = float(np.dot(reference.samples, reference.samples))
    pn = float(np.dot(noise, noise))
    if pn == 0.0:
        return MetricValue("snr_db", DB_CAP, True)
    if ps == 0.0:
        return MetricValue("snr_db", -DB_CAP, True)
    return _cap("snr_db", 10.0 * math.log10(ps / pn))


# STOI framing follows the reference definition: frame starts run over
# 0, hop, ... strictly below len - frame_length, so the signal is framed
# without its final sample.

def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = STOI_DYN_RANGE,
                         frame_length: int = STOI_FRAME, hop: int = STOI_HOP):
    """Drop frames whose clean energy is more than ``dyn_range`` dB below the loudest.

    Kept frames are Hann-windowed and overlap-added back into waveforms, so
    the mask taken from ``x`` is applied identically to ``y``.
    """
    w = hann_window(frame_length)
    xf = frame_array(x[:-1], frame_length, hop) * w
    yf = frame_array(y[:-1], frame_length, hop) * w
    if xf.shape[0] == 0:
        raise TooShortError("signal shorter than one STOI frame")
    energies = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + STOI_EPS)
    keep = energies > energies.max() - dyn_range
    return overlap_add_array(xf[keep], hop), overlap_add_array(yf[keep], hop)


def band_envelopes(x: np.ndarray) -> np.ndarray:
    """One-third-octave band magnitudes, [15, num_frames], for a 10 kHz waveform."""
    spec = stft_array(x[:-1], STOI_FRAME, STOI_HOP, STOI_FFT)
    return np.sqrt(third_octave_matrix() @ (np.abs(spec) ** 2).T)


def stoi_from_envelopes(x_tob: np.ndarray, y_tob: np.ndarray) -> float:
    n = x_tob.shape[1]
    if n < STOI_SEGMENT:
        raise TooShortError(f"{n} STOI frames after silence removal; need at least {STOI_SEGMENT}")
    xs = np.lib.stride_tricks.sliding_window_view(x_tob, STOI_SEGMENT, axis=1)  # [bands, segs, 30]
    ys = np.lib.stride_tricks.sliding_window_view(y_tob, STOI_SEGMENT, axis=1)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + STOI_EPS)
    yp = np.minimum(ys * scale, xs * STOI_CLIP)
    yp = yp - yp.mean(axis=2, keepdims=True)
    xc = xs - xs.mean(axis=2, keepdims=True)
    yp = yp / (np.linalg.norm(yp, axis=2, keepdims=True) + STOI_EPS)
    xc = xc / (np.linalg.norm(xc, axis=2, keepdims=True) + STOI_EPS)
    return float(np.sum(xc * yp) / (xs.shape[0] * xs.shape[1]))


def stoi(clean: AudioSignal, degraded: AudioSignal) -> MetricValue:
    """Short-time objective intelligibility of ``degraded`` against ``clean``."""
    _check_pair(clean, degraded)
    x = resample_array(clean.samples, clean.sample_rate, STOI_RATE)
    y = resample_array(degraded.samples, degraded.sample_rate, STOI_RATE)
    if not np.any(x):
        raise InvalidReferenceError("clean signal is silent")
    x, y = remove_silent_frames(x, y)
    return MetricValue("stoi", stoi_from_envelopes(band_envelopes(x), band_envelopes(y)))
