import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from spxremix.audio_io import AudioSignal, load_wav, save_wav
from spxremix.corpus import (
    MANIFEST_NAME,
    MixtureRecipe,
    build_manifest,
    mix_at_snr,
    noise_gain,
    plan_corpus,
    speaker_of,
    verify_manifest,
)
from spxremix.errors import ConfigurationError, InvalidInputError, PreconditionError
from spxremix.manifest import read_manifest, write_manifest
from spxremix.metrics import snr
from spxremix.training import load_utterances

RATE = 8000


def sig(x, rate=RATE):
    return AudioSignal(np.asarray(x, dtype=float), rate)


@pytest.fixture
def pools(tmp_path):
    r = np.random.default_rng(0)
    clean, noise = tmp_path / "clean", tmp_path / "noise"
    clean.mkdir()
    noise.mkdir()
    for spk, n in (("alice", 3), ("bob", 2), ("carol", 1)):
        for i in range(n):
            save_wav(sig(0.5 * np.sin(np.arange(7 * RATE) * (0.05 + 0.01 * i)) * r.uniform(0.2, 1)),
                     clean / f"{spk}_{i:02d}.wav")
    for i in range(2):
        save_wav(sig(0.3 * r.standard_normal(8 * RATE)), noise / f"n{i}.wav")
    return clean, noise


def test_equal_energy_gain_is_one():
    c = np.array([1.0, -1.0, 1.0, -1.0])
    n = np.array([1.0, 1.0, -1.0, -1.0])
    assert noise_gain(c, n, 0.0) == 1.0
    assert np.array_equal(mix_at_snr(sig(c), sig(n), 0.0).samples, c + n)


@pytest.mark.parametrize("target", [3.2, 60.0, -7.5, 0.0])
def test_snr_round_trip(rng, target):
    for _ in range(20):
        clean = sig(rng.standard_normal(500) * rng.uniform(0.01, 2))
        noise = sig(rng.standard_normal(800) * rng.uniform(0.01, 2))
        mix = mix_at_snr(clean, noise, target, rng)
        assert abs(snr(clean, mix).value - target) < 1e-6


def test_noise_crop_offset(rng):
    clean = sig(rng.standard_normal(10))
    noise = sig(np.arange(1, 31, dtype=float))
    mix = mix_at_snr(clean, noise, 0.0)  # no rng: offset 0
    crop = mix.samples - clean.samples
    assert np.allclose(crop / crop[0], np.arange(1, 11))


def test_mix_errors(rng):
    with pytest.raises(InvalidInputError):
        mix_at_snr(sig(np.zeros(10)), sig(rng.standard_normal(10)), 0.0)
    with pytest.raises(InvalidInputError):
        mix_at_snr(sig(rng.standard_normal(10)), sig(np.zeros(10)), 0.0)
    with pytest.raises(InvalidInputError):
        mix_at_snr(sig(rng.standard_normal(10)), sig(rng.standard_normal(9)), 0.0)
    with pytest.raises(InvalidInputError):
        mix_at_snr(sig(rng.standard_normal(10)), sig(rng.standard_normal(10), 16000), 0.0)


@pytest.mark.parametrize("kwargs", [dict(snr_range_db=(5, 0)), dict(length_range_s=(3, 2)),
                                    dict(length_range_s=(0.05, 1)), dict(num_utterances=0)])
def test_recipe_invariants(kwargs):
    with pytest.raises(ConfigurationError):
        MixtureRecipe(**kwargs)


def test_speaker_prefix():
    assert speaker_of("/x/spk01_utt_3.wav") == "spk01"
    assert speaker_of("solo.wav") == "solo"


def test_build_manifest(pools, tmp_path):
    clean, noise = pools
    with pytest.warns(UserWarning, match="carol"):
        records = build_manifest(clean, noise, MixtureRecipe(seed=3, num_utterances=12), tmp_path / "out")
    assert len(records) == 12
    assert {r.speaker_id for r in records} == {"alice", "bob"}
    for r in records:
        assert r.clean_source != r.enrolment_source
        assert speaker_of(r.clean_source) == speaker_of(r.enrolment_source) == r.speaker_id
        assert 0 <= r.snr_db <= 5 and 1 <= r.length_s <= 6
        for p in (r.mixture_path, r.target_path, r.noise_path, r.enrolment_path):
            a = load_wav(tmp_path / "out" / p).samples
            assert np.all(np.isfinite(a)) and np.max(np.abs(a)) <= 1
    for uid, want, got in verify_manifest(tmp_path / "out" / MANIFEST_NAME):
        assert abs(want - got) < 1e-6, uid


def test_build_manifest_deterministic(pools, tmp_path):
    clean, noise = pools
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        build_manifest(clean, noise, MixtureRecipe(seed=9, num_utterances=6), tmp_path / "a")
        build_manifest(clean, noise, MixtureRecipe(seed=9, num_utterances=6), tmp_path / "b", jobs=3)
        build_manifest(clean, noise, MixtureRecipe(seed=10, num_utterances=6), tmp_path / "c")
    a = (tmp_path / "a" / MANIFEST_NAME).read_bytes()
    assert a == (tmp_path / "b" / MANIFEST_NAME).read_bytes()
    assert a != (tmp_path / "c" / MANIFEST_NAME).read_bytes()
    for f in sorted((tmp_path / "a").rglob("*.wav")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_peak_rescale_recorded(tmp_path):
    clean, noise = tmp_path / "clean", tmp_path / "noise"
    clean.mkdir()
    noise.mkdir()
    r = np.random.default_rng(1)
    for i in range(2):
        save_wav(sig(0.95 * np.sign(r.standard_normal(3 * RATE))), clean / f"s_{i}.wav")
    save_wav(sig(0.9 * r.standard_normal(4 * RATE)), noise / "n.wav")
    records = build_manifest(clean, noise, MixtureRecipe(seed=0, num_utterances=4), tmp_path / "out")
    assert all(rec.rescale < 1 for rec in records)
    for rec in records:
        mix = load_wav(tmp_path / "out" / rec.mixture_path).samples
        assert np.max(np.abs(mix)) <= 1
        line = json.loads((tmp_path / "out" / MANIFEST_NAME).read_text().splitlines()[0])
        assert "rescale" in line
    for _, want, got in verify_manifest(tmp_path / "out" / MANIFEST_NAME):
        assert abs(want - got) < 1e-6


def test_no_usable_speakers(tmp_path):
    clean, noise = tmp_path / "clean", tmp_path / "noise"
    clean.mkdir()
    noise.mkdir()
    save_wav(sig(np.ones(2 * RATE) * 0.1), clean / "solo_0.wav")
    save_wav(sig(np.ones(2 * RATE) * 0.1), noise / "n.wav")
    with pytest.warns(UserWarning), pytest.raises(PreconditionError):
        build_manifest(clean, noise, MixtureRecipe(), tmp_path / "out")
    (tmp_path / "empty").mkdir()
    with pytest.raises(PreconditionError, match="no .wav files"):
        build_manifest(clean, tmp_path / "empty", MixtureRecipe(), tmp_path / "out")


def test_manifest_readable_by_training(pools, tmp_path):
    clean, noise = pools
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        build_manifest(clean, noise, MixtureRecipe(seed=1, num_utterances=4), tmp_path / "out")
    utts = load_utterances(read_manifest(tmp_path / "out" / MANIFEST_NAME))
    assert len(utts) == 4 and all(len(u.mixture) == len(u.target) for u in utts)


def test_snr_draws_uniform():
    # the planner alone: 10^4 records over synthetic file lengths
    clean = [Path(f"s{k}_{i}.wav") for k in range(10) for i in range(3)]
    noise = [Path(f"n{i}.wav") for i in range(4)]
    lengths = {f: 7 * RATE for f in clean} | {f: 10 * RATE for f in noise}
    plans = plan_corpus(clean, noise, MixtureRecipe(seed=0, num_utterances=10_000), lengths, RATE)
    snrs = np.array([p.snr_db for p in plans])
    lens = np.array([p.length for p in plans]) / RATE
    assert snrs.min() >= 0 and snrs.max() <= 5 and lens.min() >= 1 and lens.max() <= 6
    counts = np.histogram(snrs, bins=5, range=(0, 5))[0] / len(snrs)
    assert np.all(np.abs(counts - 0.2) <= 0.03), counts
    assert all(p.enrolment != p.clean for p in plans)


def test_manifest_format_errors(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"id": "a", "mixture_path": "m.wav", "target_path": "t.wav"}\n')
    with pytest.raises(Exception, match="enrolment_path"):
        read_manifest(p)
    p.write_text("{not json\n")
    with pytest.raises(Exception, match="m.jsonl:1"):
        read_manifest(p)


def test_manifest_round_trip(tmp_path):
    recs = [{"id": "x", "mixture_path": "a/m.wav", "target_path": None, "enrolment_path": "e.wav", "snr_db": 1.5}]
    write_manifest(recs, tmp_path / "m.jsonl")
    (e,) = read_manifest(tmp_path / "m.jsonl")
    assert e.mixture_path == tmp_path / "a" / "m.wav" and e.target_path is None and e.extra == {"snr_db": 1.5}
    assert (tmp_path / "m.jsonl").read_text() == json.dumps(recs[0], sort_keys=True) + "\n"
