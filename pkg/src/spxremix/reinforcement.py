"""Target speaker reinforcement: blend the enhanced signal with the raw mixture.

The blend is ``z(n) = s'(n) + alpha * y(n)`` where ``alpha`` is chosen so that
the energy ratio between the enhanced part and the added mixture part equals
a requested value ``sigma`` in dB.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .audio_io import AudioSignal
from .errors import InvalidInputError, ShapeError


class Sigma(enum.Enum):
    """Non-numeric remix operating points."""

    ENHANCED_ONLY = "inf"
    UNPROCESSED = "unprocessed"

    def __str__(self) -> str:
        return self.value


ENHANCED_ONLY = Sigma.ENHANCED_ONLY
UNPROCESSED = Sigma.UNPROCESSED

SigmaValue = Union[float, Sigma]

DEFAULT_SIGMAS: tuple[SigmaValue, ...] = (ENHANCED_ONLY, 20.0, 10.0, 0.0, -10.0, -20.0)


class DegenerateRemixWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RemixSpec:
    sigma_db: SigmaValue
    alpha: float
    degenerate: bool = False

    def __post_init__(self):
        if self.alpha < 0 or not math.isfinite(self.alpha):
            raise InvalidInputError(f"alpha must be finite and non-negative, got {self.alpha}")
        if self.sigma_db is ENHANCED_ONLY and self.alpha != 0.0:
            raise InvalidInputError("ENHANCED_ONLY requires alpha = 0")


def parse_sigma(token) -> SigmaValue:
    """Map ``'inf'`` (or a float infinity) to ENHANCED_ONLY, anything else to a float dB value."""
    if isinstance(token, Sigma):
        return token
    if isinstance(token, str):
        t = token.strip().lower()
        if t in ("inf", "+inf", "infinity", "∞"):
            return ENHANCED_ONLY
        if t == "unprocessed":
            return UNPROCESSED
        try:
            token = float(t)
        except ValueError:
            raise InvalidInputError(f"invalid sigma {token!r}; expected a number in dB or 'inf'") from None
    value = float(token)
    if value == math.inf:
        return ENHANCED_ONLY
    if not math.isfinite(value):
        raise InvalidInputError(f"invalid sigma {token!r}")
    return value


def format_sigma(sigma: SigmaValue) -> str:
    if isinstance(sigma, Sigma):
        return sigma.value
    return f"{sigma:g}"


def _check_aligned(enhanced: AudioSignal, mixture: AudioSignal) -> None:
    if len(enhanced) != len(mixture):
        raise ShapeError(f"length mismatch: enhanced {len(enhanced)} vs mixture {len(mixture)}")
    if enhanced.sample_rate != mixture.sample_rate:
        raise ShapeError(f"rate mismatch: {enhanced.sample_rate} vs {mixture.sample_rate}")


def alpha_for_sigma(enhanced: AudioSignal, mixture: AudioSignal, sigma_db: SigmaValue) -> RemixSpec:
    sigma_db = parse_sigma(sigma_db)
    if sigma_db is UNPROCESSED:
        raise InvalidInputError("UNPROCESSED is a report row, not a remix ratio")
    if len(enhanced) != len(mixture):
        raise ShapeError(f"length mismatch: enhanced {len(enhanced)} vs mixture {len(mixture)}")
    if sigma_db is ENHANCED_ONLY:
        return RemixSpec(ENHANCED_ONLY, 0.0)
    e_enh = float(np.dot(enhanced.samples, enhanced.samples))
    e_mix = float(np.dot(mixture.samples, mixture.samples))
    if e_mix == 0.0:
        raise InvalidInputError("mixture has zero energy; a finite sigma is undefined")
    if e_enh == 0.0:
        warnings.warn("enhanced signal is silent; remixing with alpha = 0", DegenerateRemixWarning, stacklevel=2)
        return RemixSpec(sigma_db, 0.0, degenerate=True)
    alpha = math.sqrt(e_enh / e_mix) * 10.0 ** (-sigma_db / 20.0)
    return RemixSpec(sigma_db, alpha)


def remix(enhanced: AudioSignal, mixture: AudioSignal, spec: RemixSpec) -> AudioSignal:
    _check_aligned(enhanced, mixture)
    if spec.alpha == 0.0:
        return enhanced.with_samples(enhanced.samples)
    return enhanced.with_samples(enhanced.samples + spec.alpha * mixture.samples)


def achieved_sigma(enhanced: AudioSignal, mixture: AudioSignal, alpha: float) -> float:
    """Energy ratio in dB between ``enhanced`` and ``alpha * mixture``."""
    if alpha == 0.0:
        return math.inf
    scaled = alpha * mixture.samples
    return 10.0 * math.log10(float(np.dot(enhanced.samples, enhanced.samples)) / float(np.dot(scaled, scaled)))


def sigma_sweep(enhanced: AudioSignal, mixture: AudioSignal,
                sigmas: Iterable[SigmaValue] = DEFAULT_SIGMAS) -> list[tuple[SigmaValue, AudioSignal]]:
    _check_aligned(enhanced, mixture)
    out = []
    for sigma in sigmas:
        spec = alpha_for_sigma(enhanced, mixture, sigma)
        out.append((spec.sigma_db, remix(enhanced, mixture, spec)))
    return out
