import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from t2avc.audio import (
    HOP_LENGTH,
    LOG_FLOOR,
    SAMPLE_RATE,
    WIN_LENGTH,
    AudioError,
    GriffinLimVocoder,
    MelSpectrogram,
    Waveform,
    griffin_lim_invert,
    hz_to_mel,
    load_mel,
    load_wav,
    mel_filterbank,
    mel_spectrogram,
    mel_to_hz,
    n_frames_for,
    pad_frames_to_multiple,
    resample,
    save_mel,
    save_wav,
    trim_frames,
)


def tone(freq, seconds=1.0, sr=SAMPLE_RATE, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


def peak_hz(x, sr):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n=8 * len(x)))
    return np.argmax(spec) * sr / (8 * len(x))


class TestResample:
    def test_duration_preserved(self):
        out = resample(tone(440, sr=44100), SAMPLE_RATE)
        assert abs(len(out) - 22050) <= 1
        assert out.sample_rate_hz == SAMPLE_RATE

    def test_same_rate_is_identity(self):
        w = tone(300)
        out = resample(w, SAMPLE_RATE)
        assert np.array_equal(out.samples, w.samples)
        assert out.samples is not w.samples

    def test_tone_frequency_kept(self):
        out = resample(tone(440, sr=44100), SAMPLE_RATE)
        assert abs(peak_hz(out.samples, SAMPLE_RATE) - 440) <= 1.0


class TestMel:
    def test_frame_count_one_second(self):
        m = mel_spectrogram(tone(440))
        assert m.n_frames == 1 + (22050 - 1024) // 256 == 83
        assert m.frames.shape == (83, 80)

    @given(st.integers(WIN_LENGTH, 6000))
    @settings(max_examples=20, deadline=None)
    def test_frame_count_formula(self, n):
        assert mel_spectrogram(Waveform(np.zeros(n))).n_frames == n_frames_for(n) == 1 + (n - 1024) // 256

    def test_silence_hits_floor(self):
        m = mel_spectrogram(Waveform(np.zeros(4000)))
        assert np.all(m.frames == LOG_FLOOR)

    def test_white_noise_above_floor(self):
        rng = np.random.default_rng(0)
        m = mel_spectrogram(Waveform(0.1 * rng.standard_normal(22050)))
        assert np.all(m.frames > LOG_FLOOR)

    def test_rejects_wrong_rate_and_short_input(self):
        with pytest.raises(AudioError):
            mel_spectrogram(tone(440, sr=16000))
        with pytest.raises(AudioError):
            mel_spectrogram(Waveform(np.zeros(WIN_LENGTH - 1)))

    def test_filterbank_against_independent_construction(self):
        # Slaney triangles built directly from band-edge frequencies
        fb = mel_filterbank()
        freqs = np.linspace(0, SAMPLE_RATE / 2, 513)
        edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(8000.0), 82))
        ref = np.zeros_like(fb)
        for i in range(80):
            lo, c, hi = edges[i], edges[i + 1], edges[i + 2]
            up = (freqs - lo) / (c - lo)
            down = (hi - freqs) / (hi - c)
            ref[i] = np.clip(np.minimum(up, down), 0, None) * 2.0 / (hi - lo)
        np.testing.assert_allclose(fb, ref, atol=1e-12)

    def test_mel_scale_roundtrip_and_breakpoint(self):
        f = np.array([0.0, 500.0, 1000.0, 4000.0, 8000.0])
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
        assert hz_to_mel(1000.0) == pytest.approx(15.0)


class TestPadding:
    @pytest.mark.parametrize("f,k,expected", [(130, 4, 132), (128, 4, 128), (1, 4, 4)])
    def test_examples(self, f, k, expected):
        m = MelSpectrogram(np.zeros((f, 80)))
        padded, orig = pad_frames_to_multiple(m, k)
        assert padded.n_frames == expected and orig == f
        assert np.all(padded.frames[f:] == LOG_FLOOR)
        assert trim_frames(padded, orig).frames.shape == (f, 80)

    @given(st.integers(1, 200), st.integers(1, 16))
    @settings(max_examples=50, deadline=None)
    def test_property(self, f, k):
        padded, orig = pad_frames_to_multiple(MelSpectrogram(np.ones((f, 80))), k)
        assert padded.n_frames % k == 0 and 0 <= padded.n_frames - f < k and orig == f


class TestGriffinLim:
    def test_tone_peak_preserved(self):
        out = griffin_lim_invert(mel_spectrogram(tone(440)), n_iters=60)
        assert abs(peak_hz(out.samples, SAMPLE_RATE) - 440) <= 5.0

    def test_silence(self):
        out = griffin_lim_invert(MelSpectrogram(np.full((20, 80), LOG_FLOOR)), 30)
        assert np.sqrt(np.mean(out.samples ** 2)) < 1e-3

    def test_error_decreases_with_iterations(self):
        rng = np.random.default_rng(1)
        t = np.arange(22050) / SAMPLE_RATE
        x = 0.3 * np.sin(2 * np.pi * 220 * t) * (1 + 0.5 * np.sin(2 * np.pi * 3 * t)) + 0.02 * rng.standard_normal(len(t))
        m = mel_spectrogram(Waveform(x))
        errs = []
        for n in (10, 30, 60):
            back = mel_spectrogram(griffin_lim_invert(m, n))
            errs.append(np.mean(np.abs(back.frames - m.frames)))
        assert errs[0] > errs[1] > errs[2]

    def test_length_and_determinism(self):
        m = mel_spectrogram(tone(300, 0.5))
        a = GriffinLimVocoder(10, seed=3).invert(m)
        b = GriffinLimVocoder(10, seed=3).invert(m)
        assert len(a) == (m.n_frames - 1) * HOP_LENGTH + WIN_LENGTH
        assert np.array_equal(a.samples, b.samples)


class TestIO:
    def test_wav_roundtrip(self, tmp_path):
        w = tone(440, 0.2)
        save_wav(tmp_path / "a.wav", w)
        back = load_wav(tmp_path / "a.wav")
        assert back.sample_rate_hz == SAMPLE_RATE
        np.testing.assert_allclose(back.samples, w.samples, atol=1.0 / 32767)

    def test_mel_roundtrip(self, tmp_path):
        m = mel_spectrogram(tone(440, 0.3))
        save_mel(tmp_path / "a.mel", m)
        back = load_mel(tmp_path / "a.mel")
        np.testing.assert_allclose(back.frames, m.frames.astype(np.float32))
        assert back.hop_s == m.hop_s

    def test_mel_bad_magic(self, tmp_path):
        (tmp_path / "bad.mel").write_bytes(b"XXXX" + bytes(24))
        with pytest.raises(AudioError):
            load_mel(tmp_path / "bad.mel")

    def test_stereo_rejected(self, tmp_path):
        from scipy.io import wavfile
        wavfile.write(tmp_path / "s.wav", SAMPLE_RATE, np.zeros((100, 2), dtype=np.int16))
        with pytest.raises(AudioError):
            load_wav(tmp_path / "s.wav")
