"""Target-duration lookup and pitch-preserving tempo modification (WSOLA)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.signal import correlate

from .alignment import DurationStats
from .audio import Waveform
from .encoder import DurationQuery, EncoderOutput, source_duration_query

MIN_RATIO = 0.25
MAX_RATIO = 4.0
# ratios this close to 1 come from exp/log round-off and are treated as identity
IDENTITY_TOL = 1e-9


class DurationError(ValueError):
    pass


@dataclass(frozen=True)
class StretchSpec:
    """Output duration is ``ratio`` times the input duration."""

    ratio: float
    method: str = "wsola"
    window_s: float = 0.05
    tolerance_s: float = 0.01

    def __post_init__(self):
        if not MIN_RATIO <= self.ratio <= MAX_RATIO:
            raise DurationError(f"stretch ratio {self.ratio:.4g} outside [{MIN_RATIO}, {MAX_RATIO}]")
        if self.method != "wsola":
            raise DurationError(f"unknown stretch method {self.method!r}")


def target_mean_duration(phonemes: Iterable[int], stats: DurationStats, target: str) -> float:
    """Mean of the target speaker's per-phoneme durations over ``phonemes``.

    Phonemes the target never produced fall back to the target's global mean.
    """
    phonemes = sorted(set(phonemes))
    if not phonemes:
        raise DurationError("empty phoneme set")
    if target not in stats.table:
        raise DurationError(f"no duration statistics for target speaker {target!r}")
    table = stats.table[target]
    fallback = stats.global_mean_s.get(target)
    values = []
    for p in phonemes:
        if p in table:
            values.append(table[p][0])
        elif fallback is not None:
            values.append(fallback)
        else:
            raise DurationError(f"speaker {target!r} has no phoneme durations to fall back on")
    return math.fsum(values) / len(values)


def _periodic_hann(n):
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def wsola(x: np.ndarray, ratio: float, win: int, tol: int) -> np.ndarray:
    """Waveform-similarity overlap-add with 50% synthesis overlap.

    Each analysis frame is taken within ``±tol`` samples of its nominal
    position, at the offset best matching the natural continuation of the
    previously copied frame.
    """
    hs = win // 2
    ha = hs / ratio
    n_out = int(round(ratio * len(x)))
    pad = win // 2 + tol
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + 2 * win + int(math.ceil(ha)))])
    window = _periodic_hann(win)
    n_frames = int(math.ceil((n_out + win / 2) / hs)) + 1
    y = np.zeros(n_frames * hs + win)
    wsum = np.zeros_like(y)
    prev = None
    for k in range(n_frames):
        nominal = int(round(k * ha)) + tol
        if prev is None:
            start = nominal
        else:
            natural = xp[prev + hs:prev + hs + win]
            lo = max(nominal - tol, 0)
            hi = min(nominal + tol, len(xp) - win)
            region = xp[lo:hi + win]
            if np.any(natural) and np.any(region):
                score = correlate(region, natural, mode="valid")
                start = lo + int(np.argmax(score))
            else:
                start = min(max(nominal, lo), hi)
        frame = xp[start:start + win]
        if len(frame) < win:
            frame = np.pad(frame, (0, win - len(frame)))
        y[k * hs:k * hs + win] += window * frame
        wsum[k * hs:k * hs + win] += window
        prev = start
    y = y / np.maximum(wsum, 1e-3)
    return y[win // 2:win // 2 + n_out]


def tempo_stretch(w: Waveform, spec: StretchSpec) -> Waveform:
    """Change duration by ``spec.ratio`` without changing pitch."""
    if abs(spec.ratio - 1.0) <= IDENTITY_TOL:
        return Waveform(w.samples.copy(), w.sample_rate_hz)
    win = int(round(spec.window_s * w.sample_rate_hz))
    tol = int(round(spec.tolerance_s * w.sample_rate_hz))
    if len(w) < 2 * win:
        raise DurationError(f"input of {len(w)} samples is shorter than two stretch windows ({2 * win})")
    return Waveform(wsola(w.samples, spec.ratio, win, tol), w.sample_rate_hz)


def duration_ratio(encoder_out: EncoderOutput, stats: DurationStats, target: str) -> DurationQuery:
    """Source query completed with the target mean duration ``t_t``."""
    q = source_duration_query(encoder_out)
    t_t = target_mean_duration(q.phoneme_set, stats, target)
    return DurationQuery(q.phoneme_set, q.t_s, t_t)


def duration_modified_source(w: Waveform, encoder_out: EncoderOutput, stats: DurationStats,
                             target: str, spec: StretchSpec | None = None) -> tuple[Waveform, DurationQuery]:
    """Stretch the whole utterance by ``t_t / t_s``."""
    q = duration_ratio(encoder_out, stats, target)
    ratio = q.t_t / q.t_s
    base = spec or StretchSpec(1.0)
    stretch = StretchSpec(ratio, base.method, base.window_s, base.tolerance_s)
    return tempo_stretch(w, stretch), q
