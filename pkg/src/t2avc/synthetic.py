"""Formant-synthesised toy corpora with exact phoneme alignments.

Each "phoneme" is a fixed spectral envelope (three resonances for voiced
sounds, band-limited noise for fricatives). Speakers differ in f0,
spectral tilt and speaking rate, which is enough structure for every stage
of the pipeline to have something learnable and measurable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .alignment import SILENCE
from .audio import SAMPLE_RATE, Waveform, save_wav

# label -> (F1, F2, F3) in Hz, or None for a fricative
PHONEMES: dict[str, tuple[float, float, float] | None] = {
    "AA": (730.0, 1090.0, 2440.0),
    "IY": (270.0, 2290.0, 3010.0),
    "UW": (300.0, 870.0, 2240.0),
    "EH": (530.0, 1840.0, 2480.0),
    "M": (250.0, 1100.0, 2300.0),
    "S": None,
}
VOWELS = {"AA", "IY", "UW", "EH"}

WORDS: dict[str, tuple[str, ...]] = {
    "MAS": ("M", "AA", "S"),
    "SIM": ("S", "IY", "M"),
    "MUSE": ("M", "UW", "S", "EH"),
    "AIMS": ("EH", "IY", "M", "S"),
    "SUMA": ("S", "UW", "M", "AA"),
    "MEMO": ("M", "EH", "M", "UW"),
    "ISSA": ("IY", "S", "AA"),
    "UMAS": ("UW", "M", "AA", "S"),
}


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0_hz: float
    tilt_db_per_octave: float
    phone_dur_s: float
    dur_jitter: float = 0.1


TYPICAL = SpeakerProfile("CTL01", f0_hz=120.0, tilt_db_per_octave=-3.0, phone_dur_s=0.09)
ATYPICAL = SpeakerProfile("DYS01", f0_hz=190.0, tilt_db_per_octave=-12.0, phone_dur_s=0.16)


def _envelope(freqs: np.ndarray, formants, tilt_db: float) -> np.ndarray:
    env = np.zeros_like(freqs)
    for i, fc in enumerate(formants):
        bw = 60.0 + 40.0 * i
        env += (1.0 / (i + 1)) / (1.0 + ((freqs - fc) / bw) ** 2)
    tilt = 10.0 ** (tilt_db * np.log2(np.maximum(freqs, 50.0) / 100.0) / 20.0)
    return env * tilt


def synth_utterance(phones, speaker: SpeakerProfile, rng: np.random.Generator,
                    lead_s: float = 0.2, tail_s: float = 0.2):
    """Render ``phones`` for ``speaker``. Returns (waveform, [(label, start, end)])."""
    durs = []
    for p in phones:
        base = speaker.phone_dur_s * (1.2 if p in VOWELS else 0.8)
        durs.append(base * float(np.exp(rng.normal(0.0, speaker.dur_jitter))))
    total = lead_s + sum(durs) + tail_s
    n = int(round(total * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE

    bounds = np.cumsum([lead_s, *durs])
    rows = [(p, float(a), float(b)) for p, a, b in zip(phones, bounds[:-1], bounds[1:])]

    f0 = speaker.f0_hz * (1.0 + 0.02 * np.sin(2 * np.pi * 4.0 * t))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    n_harm = int(7800.0 // speaker.f0_hz)
    harm_freqs = speaker.f0_hz * np.arange(1, n_harm + 1)

    # per-sample gains for voiced harmonics and the fricative noise band
    ramp = int(0.01 * SAMPLE_RATE)
    voiced_amp = np.zeros((n_harm, n))
    noise_amp = np.zeros(n)
    for p, a, b in rows:
        i0, i1 = int(round(a * SAMPLE_RATE)), int(round(b * SAMPLE_RATE))
        win = np.ones(i1 - i0)
        r = min(ramp, (i1 - i0) // 2)
        if r:
            win[:r] = np.linspace(0, 1, r)
            win[-r:] = np.linspace(1, 0, r)
        if PHONEMES[p] is None:
            noise_amp[i0:i1] += 0.25 * win
        else:
            gain = 0.5 if p == "M" else 1.0
            voiced_amp[:, i0:i1] += gain * _envelope(harm_freqs, PHONEMES[p], speaker.tilt_db_per_octave)[:, None] * win

    y = np.zeros(n)
    for k in range(n_harm):
        if voiced_amp[k].any():
            y += voiced_amp[k] * np.sin((k + 1) * phase)
    sos = butter(4, [3500.0, 7500.0], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    hiss = sosfilt(sos, rng.standard_normal(n))
    tilt_gain = 10.0 ** (speaker.tilt_db_per_octave * np.log2(5000.0 / 100.0) / 20.0 / 4.0)
    y += noise_amp * hiss * tilt_gain
    y += 1e-4 * rng.standard_normal(n)
    y *= 0.5 / np.max(np.abs(y))
    return Waveform(y, SAMPLE_RATE), rows


def inventory_labels() -> list[str]:
    return [SILENCE, *sorted(PHONEMES)]


def write_corpus(out_dir, speakers, n_per_speaker: int, seed: int = 0,
                 words: dict[str, tuple[str, ...]] | None = None, group: str | None = None,
                 manifest_name: str = "manifest.jsonl") -> Path:
    """Render WAVs and alignment files; return the JSON-lines manifest path."""
    words = words or WORDS
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(words)
    rows = []
    for s_idx, spk in enumerate(speakers):
        rng = np.random.default_rng([seed, s_idx])
        for i in range(n_per_speaker):
            word = names[i % len(names)]
            wav, ali = synth_utterance(words[word], spk, rng)
            uid = f"{spk.speaker_id}_{i:03d}_{word}"
            wav_path = out / "wav" / f"{uid}.wav"
            ali_path = out / "align" / f"{uid}.tsv"
            save_wav(wav_path, wav)
            ali_path.parent.mkdir(parents=True, exist_ok=True)
            ali_path.write_text("".join(f"{p}\t{a:.6f}\t{b:.6f}\n" for p, a, b in ali), encoding="utf-8")
            row = {"id": uid, "audio_path": str(wav_path.relative_to(out)), "speaker_id": spk.speaker_id,
                   "word": word, "alignment_path": str(ali_path.relative_to(out))}
            if group:
                row["group"] = group
            rows.append(row)
    manifest = out / manifest_name
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    return manifest
