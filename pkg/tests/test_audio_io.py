import wave

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.io import wavfile

from spxremix.audio_io import (
    AudioSignal,
    MultiChannelWarning,
    load_wav,
    resample,
    resampled_length,
    save_wav,
)
from spxremix.errors import FormatError, PreconditionError, UnsupportedCodecError


def test_pcm16_scaling(tmp_path):
    p = tmp_path / "a.wav"
    wavfile.write(p, 16000, np.array([0, 16384, -32768], dtype=np.int16))
    sig = load_wav(p)
    assert sig.samples.tolist() == [0.0, 0.5, -1.0]
    assert sig.sample_rate == 16000


def test_one_second_header(tmp_path):
    p = tmp_path / "a.wav"
    wavfile.write(p, 16000, np.zeros(16000, dtype=np.int16))
    sig = load_wav(p)
    assert len(sig) == 16000 and sig.sample_rate == 16000
    assert sig.duration == 1.0


def test_float32_round_trip_bit_identical(tmp_path, rng):
    p, q = tmp_path / "a.wav", tmp_path / "b.wav"
    wavfile.write(p, 16000, rng.uniform(-1, 1, 999).astype(np.float32))
    first = load_wav(p)
    save_wav(first, q)
    assert np.array_equal(load_wav(q).samples, first.samples)
    assert p.read_bytes() == q.read_bytes()


def test_pcm16_clamp_and_rounding(tmp_path):
    p = tmp_path / "a.wav"
    save_wav(AudioSignal([1.5, -1.0, -1.5, 0.5 / 32768, -0.5 / 32768, 1.49 / 32768], 8000), p, "pcm16")
    _, data = wavfile.read(p)
    assert data.tolist() == [32767, -32768, -32768, 1, -1, 1]


def test_pcm16_round_trip_within_half_lsb(tmp_path, rng):
    p = tmp_path / "a.wav"
    x = rng.uniform(-0.99, 0.99, 500)
    save_wav(AudioSignal(x, 16000), p, "pcm16")
    assert np.max(np.abs(load_wav(p).samples - x)) <= 0.5 / 32768 + 1e-15


def test_empty_signal_rejected(tmp_path):
    with pytest.raises(PreconditionError):
        save_wav(AudioSignal([], 16000), tmp_path / "a.wav")


def test_unknown_encoding_rejected(tmp_path):
    with pytest.raises(PreconditionError):
        save_wav(AudioSignal([0.1], 16000), tmp_path / "a.wav", "mp3")


def test_multichannel_takes_first(tmp_path):
    p = tmp_path / "st.wav"
    wavfile.write(p, 16000, np.array([[0.25, -0.5], [0.5, 0.75]], dtype=np.float32))
    with pytest.warns(MultiChannelWarning):
        sig = load_wav(p)
    assert sig.samples.tolist() == [0.25, 0.5]


def test_unsupported_sample_type(tmp_path):
    p = tmp_path / "i32.wav"
    wavfile.write(p, 16000, np.array([1, 2, 3], dtype=np.int32))
    with pytest.raises(UnsupportedCodecError):
        load_wav(p)


def test_adpcm_is_unsupported_codec(tmp_path):
    p = tmp_path / "adpcm.wav"
    fmt = (b"fmt " + (20).to_bytes(4, "little") + (2).to_bytes(2, "little") + (1).to_bytes(2, "little")
           + (16000).to_bytes(4, "little") + (8000).to_bytes(4, "little") + (256).to_bytes(2, "little")
           + (4).to_bytes(2, "little") + (2).to_bytes(2, "little") + (505).to_bytes(2, "little"))
    data = b"data" + (256).to_bytes(4, "little") + bytes(256)
    body = b"WAVE" + fmt + data
    p.write_bytes(b"RIFF" + len(body).to_bytes(4, "little") + body)
    with pytest.raises(UnsupportedCodecError):
        load_wav(p)


def test_malformed_header(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"RIFX\x00\x00garbage")
    with pytest.raises(FormatError):
        load_wav(p)


def test_truncated_file(tmp_path):
    p = tmp_path / "t.wav"
    with wave.open(str(p), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(bytes(200))
    p.write_bytes(p.read_bytes()[:30])
    with pytest.raises(FormatError):
        load_wav(p)


def test_signal_is_read_only():
    sig = AudioSignal([1.0, 2.0], 8000)
    with pytest.raises(ValueError):
        sig.samples[0] = 3.0


def test_invalid_rate():
    with pytest.raises(PreconditionError):
        AudioSignal([0.0], 0)


def test_resample_length_example():
    assert len(resample(AudioSignal(np.zeros(16000), 16000), 10000)) == 10000


def test_resample_sine_rms():
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 1000 * t)
    y = resample(AudioSignal(x, 16000), 10000).samples
    core = y[500:-500]
    assert abs(np.sqrt(np.mean(core ** 2)) / np.sqrt(0.5) - 1) < 0.01


@pytest.mark.parametrize("src,tgt", [(16000, 10000), (10000, 16000), (16000, 8000), (44100, 16000)])
def test_resample_passband_flat(src, tgt):
    # tones below 0.4 x the lower rate keep their level within 0.1 dB
    n = 2 * src
    t = np.arange(n) / src
    for f in np.linspace(50, 0.4 * min(src, tgt), 12):
        x = np.sin(2 * np.pi * f * t)
        y = resample(AudioSignal(x, src), tgt).samples
        core = y[len(y) // 4: -len(y) // 4]
        ratio_db = 10 * np.log10(np.mean(core ** 2) / 0.5)
        assert abs(ratio_db) < 0.1, (f, ratio_db)


def test_resample_identity_copies():
    sig = AudioSignal([0.1, 0.2], 16000)
    out = resample(sig, 16000)
    assert out is not sig and np.array_equal(out.samples, sig.samples)


def test_resample_bad_rate():
    with pytest.raises(PreconditionError):
        resample(AudioSignal([0.0], 16000), 0)


@given(n=st.integers(0, 50000), src=st.sampled_from([8000, 10000, 16000, 22050, 44100, 48000]),
       tgt=st.sampled_from([8000, 10000, 16000, 22050, 44100, 48000]))
def test_resampled_length_rounds(n, src, tgt):
    exact = n * tgt / src
    got = resampled_length(n, src, tgt)
    assert abs(got - exact) <= 0.5
    assert got == int(np.floor(exact + 0.5))


@given(n=st.integers(1, 3000), tgt=st.sampled_from([8000, 10000, 22050]))
def test_resample_output_length(n, tgt):
    x = np.random.default_rng(n).standard_normal(n)
    assert len(resample(AudioSignal(x, 16000), tgt)) == resampled_length(n, 16000, tgt)
