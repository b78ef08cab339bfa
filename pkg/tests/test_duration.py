import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from t2avc.alignment import DurationStats, PhonemeInventory
from t2avc.audio import SAMPLE_RATE, Waveform
from t2avc.duration import (
    DurationError,
    StretchSpec,
    duration_modified_source,
    duration_ratio,
    target_mean_duration,
    tempo_stretch,
)
from t2avc.encoder import EncoderOutput

INV = PhonemeInventory.from_labels(["AA", "B", "C"])
AA, B, C = 1, 2, 3


def stats(table, global_mean):
    return DurationStats(table, global_mean, INV)


def sine(freq, n, sr=SAMPLE_RATE):
    return Waveform(0.5 * np.sin(2 * np.pi * freq * np.arange(n) / sr), sr)


def peak_hz(x, sr=SAMPLE_RATE):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n=16 * len(x)))
    return np.argmax(spec) * sr / (16 * len(x))


class TestTargetDuration:
    def test_mean_of_target_means(self):
        s = stats({"T": {AA: (0.2, 3), B: (0.4, 1)}}, {"T": 0.3})
        assert target_mean_duration({AA, B}, s, "T") == pytest.approx(0.3)

    def test_global_fallback(self):
        s = stats({"T": {B: (0.25, 2)}}, {"T": 0.25})
        assert target_mean_duration({AA}, s, "T") == pytest.approx(0.25)

    def test_errors(self):
        s = stats({"T": {AA: (0.2, 1)}}, {"T": 0.2})
        with pytest.raises(DurationError, match="target"):
            target_mean_duration({AA}, s, "U")
        with pytest.raises(DurationError, match="empty"):
            target_mean_duration(set(), s, "T")
        with pytest.raises(DurationError):
            target_mean_duration({AA}, stats({"Q": {}}, {"Q": None}), "Q")

    @given(st.dictionaries(st.sampled_from([AA, B, C]), st.floats(0.01, 1.0), max_size=3),
           st.sets(st.sampled_from([AA, B, C]), min_size=1))
    @settings(max_examples=60, deadline=None)
    def test_lookup_oracle(self, means, query):
        g = float(np.mean(list(means.values()))) if means else None
        s = stats({"T": {p: (m, 1) for p, m in means.items()}}, {"T": g})
        if g is None:
            with pytest.raises(DurationError):
                target_mean_duration(query, s, "T")
            return
        expected = sum(means.get(p, g) for p in query) / len(query)
        assert target_mean_duration(query, s, "T") == pytest.approx(expected, rel=1e-12)


class TestStretch:
    def test_identity(self):
        w = Waveform(np.random.default_rng(0).normal(size=5000))
        out = tempo_stretch(w, StretchSpec(1.0))
        assert np.array_equal(out.samples, w.samples)

    def test_length_contract(self):
        out = tempo_stretch(sine(220.5, 22050), StretchSpec(1.5))
        assert abs(len(out) - 33075) <= 0.02 * 33075

    def test_pitch_preserved(self):
        out = tempo_stretch(sine(220.5, 22050), StretchSpec(0.8))
        assert abs(len(out) - 17640) <= 0.02 * 17640
        cents = 1200 * math.log2(peak_hz(out.samples) / 220.5)
        assert abs(cents) < 20

    def test_ratio_bounds(self):
        with pytest.raises(DurationError):
            StretchSpec(0.2)
        with pytest.raises(DurationError):
            StretchSpec(4.5)
        with pytest.raises(DurationError):
            StretchSpec(1.0, method="psola")

    def test_too_short(self):
        with pytest.raises(DurationError):
            tempo_stretch(Waveform(np.zeros(100)), StretchSpec(1.5))

    def test_round_trip_preserves_waveform_shape(self):
        # stretching by r then 1/r gives back a signal highly correlated with the input
        # (compared at the best lag within the WSOLA search tolerance)
        rng = np.random.default_rng(1)
        t = np.arange(22050) / SAMPLE_RATE
        x = np.sin(2 * np.pi * 180 * t) + 0.5 * np.sin(2 * np.pi * 540 * t + 1) + 0.01 * rng.normal(size=len(t))
        back = tempo_stretch(tempo_stretch(Waveform(x), StretchSpec(1.25)), StretchSpec(0.8)).samples
        n = min(len(back), len(x)) - 2000
        tol = int(0.01 * SAMPLE_RATE)
        ref = x[1000:1000 + n]
        best = max(np.corrcoef(ref, back[1000 + lag:1000 + lag + n])[0, 1] for lag in range(-tol, tol + 1))
        assert best > 0.9


def encoder_output(labels, durs_s):
    labels = np.asarray(labels)
    logits = np.full((len(labels), len(INV)), -5.0)
    logits[np.arange(len(labels)), labels] = 5.0
    return EncoderOutput(np.zeros((len(labels), 80)), logits, np.log(np.asarray(durs_s, float))[:, None])


class TestDurationModifiedSource:
    def test_equal_durations_identity(self):
        out = encoder_output([0, AA, AA, B, B, 0], [1, 0.1, 0.1, 0.1, 0.1, 1])
        s = stats({"T": {AA: (0.1, 1), B: (0.1, 1)}}, {"T": 0.1})
        w = sine(200, 8000)
        stretched, q = duration_modified_source(w, out, s, "T")
        assert q.t_t == pytest.approx(q.t_s) and np.array_equal(stretched.samples, w.samples)

    def test_double_duration(self):
        out = encoder_output([AA, AA, B, B], [0.1, 0.1, 0.1, 0.1])
        s = stats({"T": {AA: (0.2, 1), B: (0.2, 1)}}, {"T": 0.2})
        w = sine(200, 11025)
        stretched, q = duration_modified_source(w, out, s, "T")
        assert q.t_t / q.t_s == pytest.approx(2.0)
        assert abs(len(stretched) - 2 * len(w)) <= 0.02 * 2 * len(w)

    def test_ratio_from_known_alignment(self):
        # segments AA (0.12 s), B (0.3 s), AA (0.06 s): t_s averages segments
        out = encoder_output([0, AA, AA, B, B, B, 0, AA], [1, .12, .12, .3, .3, .3, 1, .06])
        s = stats({"T": {AA: (0.25, 4)}}, {"T": 0.25})  # B falls back to the global mean
        q = duration_ratio(out, s, "T")
        t_s = (0.12 + 0.3 + 0.06) / 3
        assert q.t_s == pytest.approx(t_s, rel=1e-6)
        assert q.t_t / q.t_s == pytest.approx(0.25 / t_s, rel=1e-6)
