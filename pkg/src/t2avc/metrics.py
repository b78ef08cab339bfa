"""STOI / ESTOI intelligibility measures and DTW prior alignment.

Both measures follow the published definitions: 10 kHz analysis, 256-sample
Hann frames at 50% overlap, 15 one-third-octave bands from 150 Hz and 30-frame
(384 ms) segments. Frames more than 40 dB below the loudest reference frame
are discarded first.
"""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.signal import resample_poly
from scipy.spatial.distance import cdist

from .audio import HOP_LENGTH, LOG_FLOOR, SAMPLE_RATE, Waveform, mel_spectrogram, resample

FS = 10000
N_FRAME = 256
NFFT = 512
NUM_BANDS = 15
MIN_FREQ = 150.0
SEG_FRAMES = 30
BETA_DB = -15.0
DYN_RANGE_DB = 40.0


class MetricError(ValueError):
    pass


@lru_cache(maxsize=4)
def third_octave_bands(fs: int = FS, nfft: int = NFFT, num_bands: int = NUM_BANDS,
                       min_freq: float = MIN_FREQ) -> np.ndarray:
    """Binary (num_bands, nfft//2 + 1) matrix grouping FFT bins into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands)
    cf = 2.0 ** (k / 3.0) * min_freq
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        lo_bin = np.argmin((f - lo[i]) ** 2)
        hi_bin = np.argmin((f - hi[i]) ** 2)
        obm[i, lo_bin:hi_bin] = 1.0
    return obm


def _window():
    return np.hanning(N_FRAME + 2)[1:-1]


def _frames(x, hop):
    # frame starts are range(0, len(x) - N_FRAME, hop), as in the reference definition
    n = max(0, -(-(len(x) - N_FRAME) // hop))
    idx = np.arange(N_FRAME)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = DYN_RANGE_DB,
                         hop: int = N_FRAME // 2) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames of ``x`` (and the same frames of ``y``) below ``max - dyn_range`` dB."""
    w = _window()
    xf = _frames(x, hop) * w
    yf = _frames(y, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = len(xf)
    length = (n - 1) * hop + N_FRAME if n else 0
    xs, ys = np.zeros(length), np.zeros(length)
    for i in range(n):
        xs[i * hop:i * hop + N_FRAME] += xf[i]
        ys[i * hop:i * hop + N_FRAME] += yf[i]
    return xs, ys


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, N_FRAME // 2) * _window(), n=NFFT, axis=1)
    return np.sqrt(third_octave_bands() @ (np.abs(spec) ** 2).T)


def _prepare(ref: Waveform, deg: Waveform) -> tuple[np.ndarray, np.ndarray]:
    if len(ref) != len(deg):
        raise MetricError(f"signals must have equal length ({len(ref)} vs {len(deg)}); align them first")
    if ref.sample_rate_hz != deg.sample_rate_hz:
        raise MetricError("signals must share a sample rate")
    r = Fraction(FS, ref.sample_rate_hz)
    x = resample_poly(ref.samples, r.numerator, r.denominator) if r != 1 else ref.samples
    y = resample_poly(deg.samples, r.numerator, r.denominator) if r != 1 else deg.samples
    if len(x) < N_FRAME:
        raise MetricError("signal too short for STOI analysis")
    x, y = remove_silent_frames(x, y)
    if len(x) < N_FRAME:
        raise MetricError("signal is silent")
    x_env, y_env = _band_envelopes(x), _band_envelopes(y)
    if x_env.shape[1] < SEG_FRAMES:
        raise MetricError(f"need at least {SEG_FRAMES} active frames (384 ms), got {x_env.shape[1]}")
    return x_env, y_env


def _segments(env: np.ndarray) -> np.ndarray:
    """(n_seg, bands, SEG_FRAMES) sliding segments ending at every frame."""
    n = env.shape[1]
    idx = np.arange(SEG_FRAMES)[None, :] + np.arange(n - SEG_FRAMES + 1)[:, None]
    return np.transpose(env[:, idx], (1, 0, 2))


def _row_normalise(a: np.ndarray, axis: int) -> np.ndarray:
    a = a - a.mean(axis=axis, keepdims=True)
    return a / (np.linalg.norm(a, axis=axis, keepdims=True) + np.finfo(float).eps)


def stoi(ref: Waveform, deg: Waveform) -> float:
    x_env, y_env = _prepare(ref, deg)
    xs, ys = _segments(x_env), _segments(y_env)
    eps = np.finfo(float).eps
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + eps)
    clip = 10 ** (-BETA_DB / 20)
    y_prime = np.minimum(ys * scale, xs * (1 + clip))
    corr = np.sum(_row_normalise(xs, 2) * _row_normalise(y_prime, 2), axis=2)
    return float(np.clip(corr.mean(), 0.0, 1.0))


def estoi(ref: Waveform, deg: Waveform) -> float:
    x_env, y_env = _prepare(ref, deg)
    xs, ys = _segments(x_env), _segments(y_env)
    xn = _row_normalise(_row_normalise(xs, 2), 1)
    yn = _row_normalise(_row_normalise(ys, 2), 1)
    return float(np.clip(np.sum(xn * yn, axis=(1, 2)).mean() / SEG_FRAMES, 0.0, 1.0))


# --------------------------------------------------------------------------
# prior alignment
# --------------------------------------------------------------------------

def dtw_path(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost monotone path from (0, 0) to (N-1, M-1) with unit steps."""
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev, c = acc[i], acc[i - 1], cost[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = c[j - 1] + best
    i, j = n, m
    path = [(n - 1, m - 1)]
    while (i, j) != (1, 1):
        moves = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(moves, key=lambda mv: mv[0])
        path.append((i - 1, j - 1))
    return path[::-1]


def p_align(ref: Waveform, test: Waveform) -> tuple[Waveform, Waveform, list[tuple[int, int]]]:
    """Warp ``test`` onto ``ref``'s time axis using DTW over mel frames.

    Each reference frame takes the hop-sized chunk of the first test frame
    matched to it. Both outputs have ``F_ref * hop`` samples.
    """
    if len(ref) == 0 or len(test) == 0:
        raise MetricError("cannot align empty signals")
    ref = resample(ref, SAMPLE_RATE) if ref.sample_rate_hz != SAMPLE_RATE else ref
    test = resample(test, SAMPLE_RATE) if test.sample_rate_hz != SAMPLE_RATE else test
    mr, mt = mel_spectrogram(ref).frames, mel_spectrogram(test).frames
    if np.all(mr <= LOG_FLOOR + 1e-9) or np.all(mt <= LOG_FLOOR + 1e-9):
        raise MetricError("cannot align all-silent signals")
    path = dtw_path(cdist(mr, mt))
    match = np.full(len(mr), -1)
    for i, j in path:
        if match[i] < 0:
            match[i] = j
    hop = HOP_LENGTH
    chunks = [test.samples[j * hop:(j + 1) * hop] for j in match]
    warped = np.concatenate([np.pad(c, (0, hop - len(c))) for c in chunks])
    ref_out = ref.samples[:len(mr) * hop]
    ref_out = np.pad(ref_out, (0, len(mr) * hop - len(ref_out)))
    return Waveform(ref_out, SAMPLE_RATE), Waveform(warped, SAMPLE_RATE), path
