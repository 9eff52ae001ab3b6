import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spxremix.audio_io import AudioSignal
from spxremix.errors import InvalidReferenceError, ShapeError, TooShortError
from spxremix.metrics import sisdr, sisdr_raw, snr, stoi
from stoi_pairs import RATE, make_pair

GOLDEN = Path(__file__).parent / "data" / "stoi_golden.json"


def sig(x, rate=16000):
    return AudioSignal(np.asarray(x, dtype=float), rate)


def f32_pair(seed, n=1000):
    # float32-valued samples: products with 0.5, 2 and 10 stay exact in float64
    r = np.random.default_rng(seed)
    return (r.standard_normal(n).astype(np.float32).astype(np.float64),
            r.standard_normal(n).astype(np.float32).astype(np.float64))


def test_sisdr_hand_example():
    v = sisdr(sig([1, 1, 1, 1]), sig([1, 1, 1, 0]))
    assert abs(v.value - 10 * math.log10(3)) < 1e-9 and not v.capped


def test_sisdr_perfect_and_scaled_are_capped(rng):
    s = rng.standard_normal(100)
    for est in (s, 2 * s):
        v = sisdr(sig(s), sig(est))
        assert v.value == 60.0 and v.capped


def test_sisdr_orthogonal():
    v = sisdr(sig([1, 0]), sig([0, 1]))
    assert v.value == -60.0 and v.capped


def test_sisdr_errors():
    with pytest.raises(InvalidReferenceError):
        sisdr(sig([0, 0, 0]), sig([1, 2, 3]))
    with pytest.raises(ShapeError):
        sisdr(sig([1, 2]), sig([1, 2, 3]))
    with pytest.raises(ShapeError):
        sisdr(sig([]), sig([]))


def test_sisdr_matches_float_formula(rng):
    s, e = rng.standard_normal(500), rng.standard_normal(500)
    beta = e @ s / (s @ s)
    ref = 10 * np.log10(np.sum((beta * s) ** 2) / np.sum((beta * s - e) ** 2))
    assert sisdr(sig(s), sig(e)).value == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_sisdr_scale_invariance_bit_exact(c):
    for seed in range(100):
        s, e = f32_pair(seed)
        assert sisdr(sig(s), sig(c * e)).value == sisdr(sig(s), sig(e)).value


@given(seed=st.integers(0, 2 ** 31), k=st.integers(-20, 20))
def test_sisdr_power_of_two_and_sign(seed, k):
    r = np.random.default_rng(seed)
    s, e = r.standard_normal(64), r.standard_normal(64)
    base = sisdr(sig(s), sig(e)).value
    assert sisdr(sig(s), sig(2.0 ** k * e)).value == base
    assert sisdr(sig(-s), sig(-e)).value == base


@given(seed=st.integers(0, 2 ** 31))
def test_sisdr_in_range_and_deterministic(seed):
    r = np.random.default_rng(seed)
    s, e = r.standard_normal(32), r.standard_normal(32)
    a, b = sisdr(sig(s), sig(e)), sisdr(sig(s), sig(e))
    assert a == b and -60 <= a.value <= 60


def test_sisdr_raw_extremes():
    assert sisdr_raw(np.array([1.0, 2.0]), np.array([2.0, 4.0])) == math.inf
    assert sisdr_raw(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == -math.inf


def test_snr_examples(rng):
    s = rng.standard_normal(1000)
    n = rng.standard_normal(1000)
    n *= np.linalg.norm(s) / np.linalg.norm(n)
    assert abs(snr(sig(s), sig(s + n)).value) < 1e-9
    v = snr(sig(s), sig(s))
    assert v.value == 60 and v.capped
    assert snr(sig(s), sig(s + 10 * n)).value == pytest.approx(snr(sig(s), sig(s + n)).value - 20, abs=1e-9)


def test_stoi_self_is_one():
    c, _ = make_pair(0, 0.0)
    assert abs(stoi(sig(c), sig(c)).value - 1.0) < 1e-6


def test_stoi_snr_ordering():
    c, lo = make_pair(3, -10.0)
    _, hi = make_pair(3, 10.0)
    assert stoi(sig(c), sig(lo)).value < stoi(sig(c), sig(hi)).value


def test_stoi_gain_invariance():
    c, y = make_pair(5, 0.0)
    assert abs(stoi(sig(c), sig(y)).value - stoi(sig(c), sig(0.1 * y)).value) < 1e-6


def test_stoi_errors(rng):
    with pytest.raises(InvalidReferenceError):
        stoi(sig(np.zeros(16000)), sig(rng.standard_normal(16000)))
    with pytest.raises(TooShortError):
        stoi(sig(rng.standard_normal(4000)), sig(rng.standard_normal(4000)))
    with pytest.raises(ShapeError):
        stoi(sig(np.ones(100)), sig(np.ones(99)))


def test_stoi_at_native_rate_matches_resampled_path(rng):
    x = rng.standard_normal(10000)
    y = x + rng.standard_normal(10000)
    assert -1 <= stoi(sig(x, 10000), sig(y, 10000)).value <= 1


def test_stoi_matches_reference_golden():
    golden = json.loads(GOLDEN.read_text())
    assert golden["sample_rate"] == RATE and len(golden["pairs"]) == 80
    for row in golden["pairs"]:
        c, y = make_pair(row["seed"], row["snr_db"])
        assert abs(stoi(sig(c), sig(y)).value - row["stoi"]) <= 0.01, row


def test_metrics_deterministic():
    c, y = make_pair(1, 5.0)
    assert stoi(sig(c), sig(y)) == stoi(sig(c), sig(y))
