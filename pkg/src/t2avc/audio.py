"""Waveform I/O, resampling, mel analysis and Griffin-Lim inversion.

All audio lives at 22 050 Hz internally. Mel frames use a 1024-sample Hann
window and a 256-sample hop without centre padding, so a waveform of ``N``
samples yields ``1 + (N - 1024) // 256`` frames.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 22050
N_FFT = 1024
WIN_LENGTH = 1024
HOP_LENGTH = 256
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR_AMP = 1e-5
LOG_FLOOR = math.log(LOG_FLOOR_AMP)

MEL_MAGIC = b"MELS"
MEL_VERSION = 1


class AudioError(ValueError):
    """Raised for malformed or unsupported audio input."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class MelSpectrogram:
    """Log-mel matrix with shape ``(F, n_mels)``."""

    frames: np.ndarray
    hop_s: float = HOP_LENGTH / SAMPLE_RATE
    window_s: float = WIN_LENGTH / SAMPLE_RATE
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise AudioError(f"mel frames must be a non-empty (F, n_mels) matrix, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise AudioError("mel spectrogram contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames) -> "MelSpectrogram":
        return MelSpectrogram(frames, self.hop_s, self.window_s, self.sample_rate_hz)


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------

def load_wav(path) -> Waveform:
    """Read a mono WAV file. Integer PCM is scaled to [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise AudioError(f"{path}: only mono audio is supported, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = np.clip(data.astype(np.float64), -1.0, 1.0)
    return Waveform(x, int(rate))


def save_wav(path, w: Waveform) -> None:
    """Write ``w`` as 16-bit PCM, clipping to [-1, 1]."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0 - 1.0 / 32768.0) * 32768.0).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(w.sample_rate_hz), pcm)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def resample(w: Waveform, target_hz: int) -> Waveform:
    if target_hz <= 0:
        raise AudioError(f"target rate must be positive, got {target_hz}")
    if len(w) == 0:
        raise AudioError("cannot resample an empty waveform")
    if target_hz == w.sample_rate_hz:
        return Waveform(w.samples.copy(), w.sample_rate_hz)
    ratio = Fraction(int(target_hz), int(w.sample_rate_hz))
    y = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(y, int(target_hz))


# --------------------------------------------------------------------------
# STFT / mel
# --------------------------------------------------------------------------

@lru_cache(maxsize=8)
def hann_window(n: int) -> np.ndarray:
    # periodic Hann: overlap-adds to a constant at hop n/2 and n/4
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames_for(n_samples: int, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> int:
    return 1 + (n_samples - win) // hop


def stft(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP_LENGTH) -> np.ndarray:
    """Complex STFT of shape ``(F, n_fft // 2 + 1)``, no centre padding."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < n_fft:
        raise AudioError(f"signal of {len(x)} samples is shorter than one window ({n_fft})")
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    return np.fft.rfft(frames * hann_window(n_fft), axis=1)


def istft(spec: np.ndarray, n_fft: int = N_FFT, hop: int = HOP_LENGTH) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (weighted overlap-add)."""
    n = spec.shape[0]
    win = hann_window(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * win
    length = (n - 1) * hop + n_fft
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n):
        out[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += win ** 2
    return out / np.maximum(norm, 1e-8)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=8)
def mel_filterbank(sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular, area-normalised filterbank of shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0.0, sr / 2.0, n_fft // 2 + 1)
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (hz_pts[2:n_mels + 2] - hz_pts[:n_mels]))[:, None]
    weights.setflags(write=False)
    return weights


def mel_spectrogram(w: Waveform, n_mels: int = N_MELS) -> MelSpectrogram:
    if w.sample_rate_hz != SAMPLE_RATE:
        raise AudioError(f"mel analysis expects {SAMPLE_RATE} Hz audio, got {w.sample_rate_hz} Hz; resample first")
    if len(w) < WIN_LENGTH:
        raise AudioError(f"waveform of {len(w)} samples is shorter than one analysis window ({WIN_LENGTH})")
    mag = np.abs(stft(w.samples))
    mel = mag @ mel_filterbank(n_mels=n_mels).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR_AMP)))


def pad_frames_to_multiple(m: MelSpectrogram, k: int) -> tuple[MelSpectrogram, int]:
    """Pad with log-floor frames up to the next multiple of ``k``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    f = m.n_frames
    target = -(-f // k) * k
    if target == f:
        return m, f
    pad = np.full((target - f, m.n_mels), LOG_FLOOR)
    return m.with_frames(np.concatenate([m.frames, pad], axis=0)), f


def trim_frames(m: MelSpectrogram, n: int) -> MelSpectrogram:
    return m.with_frames(m.frames[:n])


# --------------------------------------------------------------------------
# vocoders
# --------------------------------------------------------------------------

class Vocoder(Protocol):
    name: str

    def invert(self, m: MelSpectrogram) -> Waveform: ...


def mel_to_linear(m: MelSpectrogram, n_refine: int = 50) -> np.ndarray:
    """Approximate non-negative solution of ``lin @ fb.T == exp(mel)``.

    Starts from the clipped pseudo-inverse and refines with multiplicative
    NNLS updates, which keep the estimate non-negative.
    """
    fb = mel_filterbank(n_mels=m.n_mels)
    mel_mag = np.exp(m.frames)
    lin = np.maximum(mel_mag @ np.linalg.pinv(fb).T, 1e-8)
    numer = mel_mag @ fb
    gram = fb.T @ fb
    for _ in range(n_refine):
        lin *= numer / np.maximum(lin @ gram, 1e-12)
    return lin


def griffin_lim_invert(m: MelSpectrogram, n_iters: int = 60, seed: int = 0) -> Waveform:
    """Reconstruct a waveform from a log-mel matrix with Griffin-Lim.

    The initial phase is drawn from ``seed`` so the output is deterministic.
    Output length is ``(F - 1) * hop + n_fft`` samples.
    """
    if n_iters < 1:
        raise ValueError(f"n_iters must be >= 1, got {n_iters}")
    if not np.all(np.isfinite(m.frames)):
        raise AudioError("cannot invert a non-finite mel spectrogram")
    target = mel_to_linear(m)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(target.shape))
    spec = target * angles
    for _ in range(n_iters):
        x = istft(spec)
        rebuilt = stft(x)
        spec = target * np.exp(1j * np.angle(rebuilt))
    x = istft(spec)
    return Waveform(np.clip(x, -1.0, 1.0), SAMPLE_RATE)


@dataclass
class GriffinLimVocoder:
    n_iters: int = 60
    seed: int = 0
    name: str = field(default="griffin-lim", init=False)

    def invert(self, m: MelSpectrogram) -> Waveform:
        return griffin_lim_invert(m, self.n_iters, self.seed)


# --------------------------------------------------------------------------
# mel binary format
# --------------------------------------------------------------------------
# little-endian: b"MELS", u32 version, u32 F, u32 n_mels, u32 sample_rate,
# u32 hop_samples, u32 win_samples, then F * n_mels f32 values row-major.
_MEL_HEADER = struct.Struct("<4sIIIIII")


def save_mel(path, m: MelSpectrogram) -> None:
    hop = int(round(m.hop_s * m.sample_rate_hz))
    win = int(round(m.window_s * m.sample_rate_hz))
    header = _MEL_HEADER.pack(MEL_MAGIC, MEL_VERSION, m.n_frames, m.n_mels, m.sample_rate_hz, hop, win)
    Path(path).write_bytes(header + m.frames.astype("<f4").tobytes())


def load_mel(path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _MEL_HEADER.size:
        raise AudioError(f"{path}: truncated mel file")
    magic, version, f, n_mels, rate, hop, win = _MEL_HEADER.unpack_from(raw)
    if magic != MEL_MAGIC:
        raise AudioError(f"{path}: bad magic {magic!r}")
    if version != MEL_VERSION:
        raise AudioError(f"{path}: unsupported mel file version {version}")
    data = np.frombuffer(raw, dtype="<f4", offset=_MEL_HEADER.size)
    if data.size != f * n_mels:
        raise AudioError(f"{path}: expected {f * n_mels} values, found {data.size}")
    return MelSpectrogram(data.reshape(f, n_mels).astype(np.float64), hop / rate, win / rate, rate)
