"""Synthetic two-speaker toy task used by the learning-trend acceptance checks.

Each "speaker" is a band-limited carrier modulated by a slowly varying noise
envelope: speaker ``a`` is a low harmonic complex, speaker ``b`` is band-pass
noise around 2.5 kHz. Noise is white. Mixtures come from corpus.build_manifest.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal as sps

from spxremix.audio_io import AudioSignal, save_wav
from spxremix.corpus import MixtureRecipe, build_manifest

RATE = 16000


def _envelope(n, rng):
    sos = sps.butter(2, 6.0, fs=RATE, output="sos")
    env = sps.sosfiltfilt(sos, rng.standard_normal(n))
    env = np.maximum(env / (np.std(env) + 1e-12), 0.0)
    # floor keeps pauses within the 40 dB range STOI treats as speech
    return 0.05 + env / (env.max() + 1e-12)


def _speaker_a(n, rng):
    t = np.arange(n) / RATE
    f0 = 180.0 + 40.0 * rng.random()
    carrier = sum(np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 5))
    return carrier


def _speaker_b(n, rng):
    sos = sps.butter(4, [2000.0, 3000.0], btype="bandpass", fs=RATE, output="sos")
    return sps.sosfilt(sos, rng.standard_normal(n))


def utterance(speaker: str, seconds: float, rng) -> np.ndarray:
    n = int(seconds * RATE)
    carrier = (_speaker_a if speaker == "a" else _speaker_b)(n, rng)
    x = carrier * _envelope(n, rng)
    return 0.3 * x / np.max(np.abs(x))


def write_pools(root, n_per_speaker: int, n_noise: int, seed: int, seconds: float = 6.5):
    root = Path(root)
    rng = np.random.default_rng(seed)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    (root / "noise").mkdir(parents=True, exist_ok=True)
    for spk in ("a", "b"):
        for i in range(n_per_speaker):
            save_wav(AudioSignal(utterance(spk, seconds, rng), RATE), root / "clean" / f"{spk}_{i:03d}.wav")
    for i in range(n_noise):
        save_wav(AudioSignal(0.1 * rng.standard_normal(int(8 * RATE)), RATE), root / "noise" / f"white_{i:02d}.wav")
    return root / "clean", root / "noise"


def build_split(root, name: str, n_utts: int, seed: int, n_per_speaker: int = 12, n_noise: int = 6):
    """Generate pools and a mixture corpus under ``root/name``; return the manifest path."""
    base = Path(root) / name
    clean, noise = write_pools(base / "pools", n_per_speaker, n_noise, seed)
    build_manifest(clean, noise, MixtureRecipe(seed=seed, num_utterances=n_utts), base / "corpus")
    return base / "corpus" / "manifest.jsonl"
