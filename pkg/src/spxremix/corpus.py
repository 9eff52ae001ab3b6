"""Synthetic noisy-mixture corpus generation.

Clean files are named ``<speaker>_<anything>.wav``; the token before the
first underscore is the speaker id. Output layout under ``out_dir``::

    manifest.jsonl
    mixture/<id>.wav  target/<id>.wav  noise/<id>.wav  enrolment/<id>.wav
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .audio_io import AudioSignal, load_wav, save_wav
from .errors import ConfigurationError, InvalidInputError, PreconditionError
from .manifest import read_manifest, write_manifest

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
PEAK_TARGET = 0.99


@dataclass(frozen=True)
class MixtureRecipe:
    snr_range_db: tuple[float, float] = (0.0, 5.0)
    length_range_s: tuple[float, float] = (1.0, 6.0)
    seed: int = 0
    num_utterances: int | None = None  # default: one per usable clean file
    encoding: str = "float32"

    def __post_init__(self):
        lo, hi = self.snr_range_db
        if not lo <= hi:
            raise ConfigurationError(f"snr_range_db must satisfy low <= high, got {self.snr_range_db}")
        mn, mx = self.length_range_s
        if not 0.1 <= mn <= mx:
            raise ConfigurationError(f"length_range_s must satisfy 0.1 <= min <= max, got {self.length_range_s}")
        if self.num_utterances is not None and self.num_utterances < 1:
            raise ConfigurationError("num_utterances must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureRecipe":
        d = dict(d)
        for k in ("snr_range_db", "length_range_s"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)


@dataclass
class MixtureRecord:
    id: str
    mixture_path: str
    target_path: str
    enrolment_path: str
    noise_path: str
    snr_db: float
    speaker_id: str
    length_s: float
    rescale: float = 1.0
    clean_source: str = ""
    enrolment_source: str = ""
    noise_source: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def speaker_of(path) -> str:
    return Path(path).stem.split("_", 1)[0]


def noise_gain(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    pc = float(np.dot(clean, clean))
    pn = float(np.dot(noise, noise))
    if pc == 0.0 or pn == 0.0:
        raise InvalidInputError("clean and noise must both have nonzero energy")
    return math.sqrt(pc / pn) * 10.0 ** (-snr_db / 20.0)


def mix_at_snr(clean: AudioSignal, noise: AudioSignal, snr_db: float,
               rng: np.random.Generator | None = None) -> AudioSignal:
    """Add ``noise`` to ``clean`` scaled to the requested SNR.

    A noise excerpt of the clean signal's length is taken at a random offset
    (offset 0 when ``rng`` is None).
    """
    if clean.sample_rate != noise.sample_rate:
        raise InvalidInputError(f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}")
    if len(noise) < len(clean):
        raise InvalidInputError(f"noise ({len(noise)} samples) is shorter than clean ({len(clean)})")
    start = 0 if rng is None else int(rng.integers(0, len(noise) - len(clean) + 1))
    crop = noise.samples[start:start + len(clean)]
    g = noise_gain(clean.samples, crop, snr_db)
    return clean.with_samples(clean.samples + g * crop)


@dataclass
class _Plan:
    id: str
    speaker: str
    clean: Path
    clean_start: int
    length: int
    noise: Path
    noise_start: int
    snr_db: float
    enrolment: Path


def _wav_files(d) -> list[Path]:
    files = sorted(p for p in Path(d).iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise PreconditionError(f"no .wav files in {d}")
    return files


def plan_corpus(clean_files, noise_files, recipe: MixtureRecipe, lengths: dict, rate: int) -> list[_Plan]:
    """Draw every random choice for the corpus up front (deterministic in ``recipe.seed``).

    ``lengths`` maps each file path to its sample count.
    """
    rng = np.random.default_rng(recipe.seed)
    min_len = int(math.ceil(recipe.length_range_s[0] * rate))
    by_speaker: dict[str, list[Path]] = {}
    for f in clean_files:
        by_speaker.setdefault(speaker_of(f), []).append(f)
    targets = []
    for spk in sorted(by_speaker):
        utts = by_speaker[spk]
        if len(utts) < 2:
            warnings.warn(f"speaker {spk!r} has a single utterance; excluded (no distinct enrolment)", stacklevel=2)
            continue
        for f in utts:
            if lengths[f] < min_len:
                warnings.warn(f"{f.name} is shorter than {recipe.length_range_s[0]} s; not used as a target",
                              stacklevel=2)
            else:
                targets.append(f)
    if not targets:
        raise PreconditionError("no usable clean utterances (need >= 2 per speaker and the minimum length)")

    count = recipe.num_utterances or len(targets)
    order: list[int] = []
    while len(order) < count:
        order.extend(rng.permutation(len(targets)).tolist())
    plans = []
    for i, t_idx in enumerate(order[:count]):
        target = targets[t_idx]
        spk = speaker_of(target)
        dur = rng.uniform(*recipe.length_range_s)
        n = min(max(int(round(dur * rate)), min_len), lengths[target])
        clean_start = int(rng.integers(0, lengths[target] - n + 1))
        usable = [f for f in noise_files if lengths[f] >= n]
        if not usable:
            raise InvalidInputError(f"no noise file has at least {n} samples")
        noise = usable[int(rng.integers(0, len(usable)))]
        noise_start = int(rng.integers(0, lengths[noise] - n + 1))
        snr_db = float(rng.uniform(*recipe.snr_range_db))
        others = [f for f in by_speaker[spk] if f != target]
        enrol = others[int(rng.integers(0, len(others)))]
        plans.append(_Plan(f"{i:06d}_{spk}", spk, target, clean_start, n, noise, noise_start, snr_db, enrol))
    return plans


def _render(plan: _Plan, audio: dict, out_dir: Path, encoding: str) -> MixtureRecord:
    clean_sig = audio[plan.clean]
    rate = clean_sig.sample_rate
    clean = clean_sig.samples[plan.clean_start:plan.clean_start + plan.length]
    noise = audio[plan.noise].samples[plan.noise_start:plan.noise_start + plan.length]
    noise = noise_gain(clean, noise, plan.snr_db) * noise
    mixture = clean + noise
    peak = float(np.max(np.abs(mixture)))
    rescale = 1.0
    if peak > 1.0:
        rescale = PEAK_TARGET / peak
        clean, noise, mixture = clean * rescale, noise * rescale, mixture * rescale
    rel = {k: f"{k}/{plan.id}.wav" for k in ("mixture", "target", "noise", "enrolment")}
    save_wav(AudioSignal(mixture, rate), out_dir / rel["mixture"], encoding)
    save_wav(AudioSignal(clean, rate), out_dir / rel["target"], encoding)
    save_wav(AudioSignal(noise, rate), out_dir / rel["noise"], encoding)
    save_wav(audio[plan.enrolment], out_dir / rel["enrolment"], encoding)
    return MixtureRecord(
        id=plan.id, mixture_path=rel["mixture"], target_path=rel["target"], enrolment_path=rel["enrolment"],
        noise_path=rel["noise"], snr_db=plan.snr_db, speaker_id=plan.speaker, length_s=plan.length / rate,
        rescale=rescale, clean_source=plan.clean.name, enrolment_source=plan.enrolment.name,
        noise_source=plan.noise.name)


def build_manifest(clean_dir, noise_dir, recipe: MixtureRecipe, out_dir, jobs: int = 1) -> list[MixtureRecord]:
    clean_files = _wav_files(clean_dir)
    noise_files = _wav_files(noise_dir)
    audio = {f: load_wav(f) for f in clean_files + noise_files}
    rates = {a.sample_rate for a in audio.values()}
    if len(rates) != 1:
        raise InvalidInputError(f"clean and noise files must share one sample rate, found {sorted(rates)}")
    rate = rates.pop()
    plans = plan_corpus(clean_files, noise_files, recipe, {f: len(a) for f, a in audio.items()}, rate)

    out_dir = Path(out_dir)
    for sub in ("mixture", "target", "noise", "enrolment"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            records = list(pool.map(lambda p: _render(p, audio, out_dir, recipe.encoding), plans))
    else:
        records = [_render(p, audio, out_dir, recipe.encoding) for p in plans]
    write_manifest([r.to_dict() for r in records], out_dir / MANIFEST_NAME)
    return records


def verify_manifest(manifest_path) -> list[tuple[str, float, float]]:
    """Re-measure each mixture's SNR from disk: rows of (id, manifest snr_db, measured snr_db)."""
    rows = []
    for e in read_manifest(manifest_path):
        clean = load_wav(e.target_path)
        mix = load_wav(e.mixture_path)
        rows.append((e.id, float(e.extra["snr_db"]), metrics.snr(clean, mix).value))
    return rows
