import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from t2avc.audio import HOP_LENGTH, SAMPLE_RATE, Waveform
from t2avc.duration import StretchSpec, tempo_stretch
from t2avc.metrics import FS, MetricError, dtw_path, estoi, p_align, stoi, third_octave_bands
from t2avc.synthetic import TYPICAL, WORDS, synth_utterance

pystoi = pytest.importorskip("pystoi")


@pytest.fixture(scope="module")
def speech():
    w, _ = synth_utterance(WORDS["MUSE"] + WORDS["SUMA"], TYPICAL, np.random.default_rng(0))
    return w


def add_noise(x, snr_db, seed=0):
    n = np.random.default_rng(seed).normal(size=len(x))
    n *= np.sqrt(np.mean(x ** 2) / np.mean(n ** 2)) * 10 ** (-snr_db / 20)
    return x + n


class TestStoi:
    def test_identity(self, speech):
        assert stoi(speech, speech) == pytest.approx(1.0, abs=1e-3)
        assert estoi(speech, speech) == pytest.approx(1.0, abs=1e-3)

    def test_scale_invariance(self, speech):
        scaled = Waveform(0.3 * speech.samples, speech.sample_rate_hz)
        assert stoi(speech, scaled) == pytest.approx(1.0, abs=1e-3)
        assert estoi(speech, scaled) == pytest.approx(1.0, abs=1e-3)

    def test_noise_ladder_monotone(self, speech):
        for fn in (stoi, estoi):
            scores = [fn(speech, Waveform(add_noise(speech.samples, snr))) for snr in (20, 10, 0, -10)]
            assert all(a > b for a, b in zip(scores, scores[1:]))

    @pytest.mark.parametrize("snr", [10, 0, -5])
    def test_matches_reference_implementation_at_10khz(self, speech, snr):
        # at the analysis rate no resampling is involved, so both implementations see the same samples
        from scipy.signal import resample_poly
        x = resample_poly(speech.samples, 200, 441)
        y = add_noise(x, snr, seed=1)
        ref, deg = Waveform(x, FS), Waveform(y, FS)
        assert stoi(ref, deg) == pytest.approx(pystoi.stoi(x, y, FS), abs=1e-6)
        assert estoi(ref, deg) == pytest.approx(pystoi.stoi(x, y, FS, extended=True), abs=1e-6)

    def test_bands_match_reference(self):
        from pystoi.utils import thirdoct
        obm, _ = thirdoct(FS, 512, 15, 150)
        np.testing.assert_array_equal(third_octave_bands(), obm)

    def test_errors(self, speech):
        with pytest.raises(MetricError, match="equal length"):
            stoi(speech, Waveform(speech.samples[:-10]))
        with pytest.raises(MetricError):
            stoi(Waveform(np.zeros(2000)), Waveform(np.zeros(2000)))

    @given(st.integers(0, 10_000), st.floats(-10, 30))
    @settings(max_examples=10, deadline=None)
    def test_bounded(self, seed, snr):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=8000) * np.repeat(rng.uniform(0.1, 1, 20), 400)
        y = add_noise(x, snr, seed)
        for fn in (stoi, estoi):
            assert 0.0 <= fn(Waveform(x, FS), Waveform(y, FS)) <= 1.0


class TestAlignment:
    def test_dtw_identity_is_diagonal(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(12, 4))
        from scipy.spatial.distance import cdist
        assert dtw_path(cdist(a, a)) == [(i, i) for i in range(12)]

    def test_dtw_matches_bruteforce_cost(self):
        rng = np.random.default_rng(1)
        cost = rng.uniform(size=(5, 6))

        def best(i, j, memo={}):
            if (i, j) in memo:
                return memo[(i, j)]
            if i == 0 and j == 0:
                v = cost[0, 0]
            else:
                prev = [best(a, b) for a, b in ((i - 1, j - 1), (i - 1, j), (i, j - 1)) if a >= 0 and b >= 0]
                v = cost[i, j] + min(prev)
            memo[(i, j)] = v
            return v
        path = dtw_path(cost)
        assert path[0] == (0, 0) and path[-1] == (4, 5)
        assert all(0 <= b[0] - a[0] <= 1 and 0 <= b[1] - a[1] <= 1 for a, b in zip(path, path[1:]))
        assert sum(cost[i, j] for i, j in path) == pytest.approx(best(4, 5))

    def test_identical_inputs(self, speech):
        ref, test, path = p_align(speech, speech)
        assert all(i == j for i, j in path)
        assert len(ref) == len(test)
        np.testing.assert_array_equal(ref.samples, test.samples)

    def test_stretched_copy_slope(self, speech):
        slow = tempo_stretch(speech, StretchSpec(2.0))
        ref, test, path = p_align(speech, slow)
        assert len(ref) == len(test)
        i, j = np.array(path).T
        slope = np.polyfit(i, j, 1)[0]
        assert slope == pytest.approx(2.0, rel=0.15)

    def test_random_pair_equal_lengths(self):
        rng = np.random.default_rng(3)
        a, b = Waveform(rng.normal(size=9000)), Waveform(rng.normal(size=15000))
        ref, test, _ = p_align(a, b)
        assert len(ref) == len(test) == (1 + (9000 - 1024) // HOP_LENGTH) * HOP_LENGTH

    def test_silent_input(self):
        with pytest.raises(MetricError):
            p_align(Waveform(np.zeros(5000)), Waveform(np.ones(5000) * 0.1))
