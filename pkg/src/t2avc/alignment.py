"""Phoneme alignments, the per-phoneme mean-mel dictionary and duration tables.

Alignment files are UTF-8 text with one interval per line::

    label<TAB>start_s<TAB>end_s

Blank lines and lines starting with ``#`` are ignored. Any gap between
intervals is silence.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SILENCE = "sil"


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered phoneme labels; index 0 is always silence."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != SILENCE:
            raise AlignmentError(f"inventory must start with the silence symbol {SILENCE!r}")
        if len(set(self.symbols)) != len(self.symbols):
            raise AlignmentError("inventory labels must be unique")

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "PhonemeInventory":
        rest = sorted({lab for lab in labels if lab != SILENCE})
        return cls((SILENCE, *rest))

    def __len__(self):
        return len(self.symbols)

    def index(self, label: str) -> int:
        try:
            return self._lookup[label]
        except KeyError:
            raise AlignmentError(f"unknown phoneme label {label!r}") from None

    @property
    def _lookup(self) -> dict[str, int]:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {s: i for i, s in enumerate(self.symbols)}
            object.__setattr__(self, "_cache", cache)
        return cache

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(list(self.symbols))

    @classmethod
    def from_json(cls, text: str) -> "PhonemeInventory":
        return cls(tuple(json.loads(text)))


@dataclass(frozen=True)
class Interval:
    phoneme_id: int
    start_s: float
    end_s: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class PhonemeAlignment:
    intervals: tuple[Interval, ...] = ()

    def __post_init__(self):
        prev_end = -math.inf
        for iv in self.intervals:
            if iv.start_s < 0 or iv.end_s <= iv.start_s:
                raise AlignmentError(f"invalid interval [{iv.start_s}, {iv.end_s})")
            if iv.start_s < prev_end:
                raise AlignmentError(f"overlapping intervals at {iv.start_s} s")
            prev_end = iv.end_s


def read_alignment_lines(path) -> list[tuple[str, float, float]]:
    rows = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 3:
            raise AlignmentError(f"{path}:{lineno}: expected 'label<TAB>start<TAB>end', got {line!r}")
        try:
            rows.append((parts[0], float(parts[1]), float(parts[2])))
        except ValueError:
            raise AlignmentError(f"{path}:{lineno}: non-numeric time in {line!r}") from None
    return rows


def parse_alignment(path, inventory: PhonemeInventory) -> PhonemeAlignment:
    """Read and validate an alignment file against ``inventory``."""
    rows = read_alignment_lines(path)
    for label, _, _ in rows:
        if label not in inventory._lookup:
            raise AlignmentError(f"{path}: unknown phoneme label {label!r}")
    rows.sort(key=lambda r: (r[1], r[2]))
    for (la, sa, ea), (lb, sb, eb) in zip(rows, rows[1:]):
        if sb < ea:
            raise AlignmentError(f"{path}: interval {lb} [{sb}, {eb}) overlaps {la} [{sa}, {ea})")
    for label, s, e in rows:
        if s < 0 or e <= s:
            raise AlignmentError(f"{path}: interval {label} has end <= start ({s}, {e})")
    return PhonemeAlignment(tuple(Interval(inventory.index(lab), s, e) for lab, s, e in rows))


def write_alignment(path, alignment: PhonemeAlignment, inventory: PhonemeInventory) -> None:
    lines = [f"{inventory.symbols[iv.phoneme_id]}\t{iv.start_s:.6f}\t{iv.end_s:.6f}" for iv in alignment.intervals]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def textgrid_to_rows(path, tier: str = "phones") -> list[tuple[str, float, float]]:
    """Extract (label, start, end) rows from a long-format Praat TextGrid tier.

    Empty labels and the usual aligner silence markers become gaps.
    """
    text = Path(path).read_text(encoding="utf-8")
    blocks = re.split(r'item \[\d+\]:', text)[1:]
    for block in blocks:
        name = re.search(r'name = "([^"]*)"', block)
        if not name or name.group(1) != tier:
            continue
        rows = []
        for xmin, xmax, label in re.findall(
                r'xmin = ([\d.eE+-]+)\s+xmax = ([\d.eE+-]+)\s+text = "([^"]*)"', block):
            if label.strip() and label.strip().lower() not in {"sil", "sp", "spn", "<eps>"}:
                rows.append((label.strip(), float(xmin), float(xmax)))
        return rows
    raise AlignmentError(f"{path}: no tier named {tier!r}")


def frame_labels(a: PhonemeAlignment, n_frames: int, hop_s: float) -> np.ndarray:
    """Label frame ``i`` by the interval containing its centre ``(i + 0.5) * hop_s``.

    Intervals are half-open ``[start, end)``; uncovered frames get silence (0).
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    centres = (np.arange(n_frames) + 0.5) * hop_s
    labels = np.zeros(n_frames, dtype=np.int64)
    for iv in a.intervals:
        labels[(centres >= iv.start_s) & (centres < iv.end_s)] = iv.phoneme_id
    return labels


def frame_log_durations(a: PhonemeAlignment, labels_len: int, hop_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame log duration (s) of the owning phoneme, plus a non-silence mask."""
    centres = (np.arange(labels_len) + 0.5) * hop_s
    log_dur = np.zeros(labels_len)
    mask = np.zeros(labels_len, dtype=bool)
    for iv in a.intervals:
        if iv.phoneme_id == 0:
            continue
        sel = (centres >= iv.start_s) & (centres < iv.end_s)
        log_dur[sel] = math.log(iv.duration_s)
        mask[sel] = True
    return log_dur, mask


# --------------------------------------------------------------------------
# mean-mel dictionary
# --------------------------------------------------------------------------

class _KahanSum:
    """Row-wise compensated accumulator for a ``(P, D)`` matrix."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add_row(self, i: int, values: np.ndarray) -> None:
        y = values - self.comp[i]
        t = self.total[i] + y
        self.comp[i] = (t - self.total[i]) - y
        self.total[i] = t


@dataclass
class SimsDictionary:
    """Mean log-mel vector per phoneme; rows with zero count are undefined."""

    means: np.ndarray
    counts: np.ndarray
    inventory: PhonemeInventory

    def lookup(self, phoneme_id: int) -> np.ndarray:
        if self.counts[phoneme_id] == 0:
            raise AlignmentError(
                f"phoneme {self.inventory.symbols[phoneme_id]!r} never observed; its mean mel is undefined")
        return self.means[phoneme_id]

    @property
    def defined(self) -> np.ndarray:
        return self.counts > 0


def build_sims_dictionary(corpus: Iterable[tuple[np.ndarray, Sequence[int]]],
                          inventory: PhonemeInventory) -> SimsDictionary:
    """Average mel frames per phoneme over ``(mel_frames, frame_labels)`` pairs."""
    acc = None
    counts = np.zeros(len(inventory), dtype=np.int64)
    n_mels = None
    for frames, labels in corpus:
        frames = np.asarray(frames, dtype=np.float64)
        labels = np.asarray(labels)
        if frames.shape[0] != len(labels):
            raise AlignmentError(f"{frames.shape[0]} frames but {len(labels)} labels")
        if n_mels is None:
            n_mels = frames.shape[1]
            acc = _KahanSum((len(inventory), n_mels))
        elif frames.shape[1] != n_mels:
            raise AlignmentError(f"inconsistent mel dimension {frames.shape[1]} != {n_mels}")
        for row, p in zip(frames, labels):
            acc.add_row(int(p), row)
        counts += np.bincount(labels, minlength=len(inventory))
    if acc is None:
        raise AlignmentError("cannot build a dictionary from an empty corpus")
    means = np.full((len(inventory), n_mels), np.nan)
    seen = counts > 0
    means[seen] = acc.total[seen] / counts[seen, None]
    return SimsDictionary(means, counts, inventory)


def ground_truth_sims(frames: np.ndarray, labels: Sequence[int], sims: SimsDictionary) -> np.ndarray:
    """Replace every frame by its phoneme's mean mel vector."""
    labels = np.asarray(labels)
    frames = np.asarray(frames)
    if len(labels) != frames.shape[0]:
        raise AlignmentError(f"{len(labels)} labels for {frames.shape[0]} frames")
    missing = [int(p) for p in np.unique(labels) if sims.counts[p] == 0]
    if missing:
        names = ", ".join(sims.inventory.symbols[p] for p in missing)
        raise AlignmentError(f"no mean mel for phonemes: {names}")
    return sims.means[labels].copy()


# --------------------------------------------------------------------------
# duration statistics
# --------------------------------------------------------------------------

@dataclass
class DurationStats:
    """speaker -> phoneme id -> (mean duration in seconds, occurrence count)."""

    table: dict[str, dict[int, tuple[float, int]]]
    global_mean_s: dict[str, float | None]
    inventory: PhonemeInventory

    def speakers(self) -> list[str]:
        return sorted(self.table)


def build_duration_stats(corpus: Iterable[tuple[str, PhonemeAlignment]],
                         inventory: PhonemeInventory) -> DurationStats:
    sums: dict[str, dict[int, list[float]]] = {}
    seen_any = False
    for speaker, alignment in corpus:
        seen_any = True
        per = sums.setdefault(speaker, {})
        for iv in alignment.intervals:
            if iv.phoneme_id == 0:
                continue
            per.setdefault(iv.phoneme_id, []).append(iv.duration_s)
    if not seen_any:
        raise AlignmentError("cannot build duration statistics from an empty corpus")
    table = {}
    global_mean = {}
    for speaker, per in sums.items():
        table[speaker] = {p: (math.fsum(d) / len(d), len(d)) for p, d in sorted(per.items())}
        means = [m for m, _ in table[speaker].values()]
        global_mean[speaker] = math.fsum(means) / len(means) if means else None
    return DurationStats(table, global_mean, inventory)


# --------------------------------------------------------------------------
# binary serialisation
# --------------------------------------------------------------------------
# Both files: 4-byte magic, u32 version, u32 length + UTF-8 JSON inventory,
# followed by a type-specific little-endian body.
_SIMS_MAGIC = b"SIMD"
_DUR_MAGIC = b"DURS"
_STATS_VERSION = 1


def _pack_header(magic: bytes, inventory: PhonemeInventory) -> bytes:
    inv = inventory.to_json().encode()
    return magic + struct.pack("<II", _STATS_VERSION, len(inv)) + inv


def _unpack_header(raw: bytes, magic: bytes, path) -> tuple[PhonemeInventory, int]:
    if raw[:4] != magic:
        raise AlignmentError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != _STATS_VERSION:
        raise AlignmentError(f"{path}: unsupported version {version}")
    inv = PhonemeInventory.from_json(raw[12:12 + n].decode())
    return inv, 12 + n


def save_sims_dictionary(path, sims: SimsDictionary) -> None:
    p, d = sims.means.shape
    body = struct.pack("<II", p, d) + sims.counts.astype("<i8").tobytes() + sims.means.astype("<f8").tobytes()
    Path(path).write_bytes(_pack_header(_SIMS_MAGIC, sims.inventory) + body)


def load_sims_dictionary(path) -> SimsDictionary:
    raw = Path(path).read_bytes()
    inv, off = _unpack_header(raw, _SIMS_MAGIC, path)
    p, d = struct.unpack_from("<II", raw, off)
    off += 8
    counts = np.frombuffer(raw, "<i8", p, off).astype(np.int64)
    off += 8 * p
    means = np.frombuffer(raw, "<f8", p * d, off).reshape(p, d).copy()
    return SimsDictionary(means, counts, inv)


def save_duration_stats(path, stats: DurationStats) -> None:
    # body is JSON: durations are few and human inspection is useful
    body = {
        spk: {
            "global_mean_s": stats.global_mean_s[spk],
            "phonemes": {str(p): [m, c] for p, (m, c) in per.items()},
        }
        for spk, per in sorted(stats.table.items())
    }
    payload = json.dumps(body, sort_keys=True).encode()
    Path(path).write_bytes(_pack_header(_DUR_MAGIC, stats.inventory) + struct.pack("<I", len(payload)) + payload)


def load_duration_stats(path) -> DurationStats:
    raw = Path(path).read_bytes()
    inv, off = _unpack_header(raw, _DUR_MAGIC, path)
    (n,) = struct.unpack_from("<I", raw, off)
    body = json.loads(raw[off + 4:off + 4 + n].decode())
    table = {spk: {int(p): (float(m), int(c)) for p, (m, c) in v["phonemes"].items()} for spk, v in body.items()}
    global_mean = {spk: v["global_mean_s"] for spk, v in body.items()}
    return DurationStats(table, global_mean, inv)
