"""Speaker embeddings, cosine similarity and the source/target/generated protocol.

External embedding files hold one record per line::

    utterance_id<TAB>hex

where ``hex`` is the lowercase hex encoding of ``d_e`` little-endian float32
values (``8 * d_e`` hex digits).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .audio import Waveform, mel_spectrogram, resample, SAMPLE_RATE

MIN_EMBED_S = 0.5


class EmbeddingError(ValueError):
    pass


@dataclass
class SpeakerEmbedding:
    v: np.ndarray
    speaker_id: str | None = None

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.v)):
            raise EmbeddingError("embedding has non-finite entries")
        if np.linalg.norm(self.v) == 0:
            raise EmbeddingError("embedding is the zero vector")

    @property
    def dim(self) -> int:
        return self.v.shape[0]


class EmbeddingProvider(Protocol):
    name: str
    dim: int

    def embed(self, w: Waveform, utterance_id: str | None = None) -> SpeakerEmbedding: ...


class StatsEmbeddingProvider:
    """Non-neural reference: per-bin log-mel mean and std over voiced frames,
    projected by a fixed seeded Gaussian matrix and length-normalised."""

    name = "mel-stats"

    def __init__(self, dim: int = 256, seed: int = 1234, n_mels: int = 80, voiced_range: float = 3.5):
        self.dim = dim
        self.seed = seed
        self.voiced_range = voiced_range
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((dim, 2 * n_mels)) / math.sqrt(2 * n_mels)

    def stats(self, frames: np.ndarray) -> np.ndarray:
        level = frames.mean(axis=1)
        voiced = frames[level >= level.max() - self.voiced_range]
        return np.concatenate([voiced.mean(axis=0), voiced.std(axis=0)])

    def embed_frames(self, frames: np.ndarray) -> np.ndarray:
        v = self.projection @ self.stats(np.asarray(frames, dtype=np.float64))
        return v / np.linalg.norm(v)

    def embed(self, w: Waveform, utterance_id: str | None = None) -> SpeakerEmbedding:
        if w.duration_s < MIN_EMBED_S:
            raise EmbeddingError(f"need at least {MIN_EMBED_S} s of audio, got {w.duration_s:.3f} s")
        if w.sample_rate_hz != SAMPLE_RATE:
            w = resample(w, SAMPLE_RATE)
        return SpeakerEmbedding(self.embed_frames(mel_spectrogram(w).frames))


class FileEmbeddingProvider:
    """Embeddings precomputed by an external verifier, looked up by utterance id."""

    name = "file"

    def __init__(self, path):
        self.table = read_embedding_file(path)
        dims = {v.shape[0] for v in self.table.values()}
        if len(dims) != 1:
            raise EmbeddingError(f"{path}: inconsistent embedding sizes {sorted(dims)}")
        self.dim = dims.pop()

    def embed(self, w: Waveform | None = None, utterance_id: str | None = None) -> SpeakerEmbedding:
        if utterance_id is None:
            raise EmbeddingError("file-based embeddings are looked up by utterance id")
        try:
            return SpeakerEmbedding(self.table[utterance_id])
        except KeyError:
            raise EmbeddingError(f"no embedding for utterance {utterance_id!r}") from None


def write_embedding_file(path, table: Mapping[str, np.ndarray]) -> None:
    lines = [f"{uid}\t{np.asarray(v, dtype='<f4').tobytes().hex()}\n" for uid, v in table.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_embedding_file(path) -> dict[str, np.ndarray]:
    table = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            uid, hexdata = line.split("\t")
            table[uid] = np.frombuffer(bytes.fromhex(hexdata.strip()), dtype="<f4").astype(np.float64)
        except ValueError as exc:
            raise EmbeddingError(f"{path}:{lineno}: malformed embedding record ({exc})") from None
    return table


def cosine_similarity(a, b) -> float:
    a = a.v if isinstance(a, SpeakerEmbedding) else np.asarray(a, dtype=np.float64)
    b = b.v if isinstance(b, SpeakerEmbedding) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EmbeddingError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def mean_embedding(embs: Sequence[SpeakerEmbedding], speaker_id: str | None = None) -> SpeakerEmbedding:
    return SpeakerEmbedding(np.mean([e.v for e in embs], axis=0), speaker_id)


@dataclass
class SimilarityReport:
    s_t: float
    s_g: float
    t_g: float
    n_pairs: int

    def as_percent(self) -> dict[str, float]:
        return {"S_T": 100 * self.s_t, "S_G": 100 * self.s_g, "T_G": 100 * self.t_g}


def _mean_cross(xs, ys) -> float:
    return float(np.mean([cosine_similarity(x, y) for x, y in itertools.product(xs, ys)]))


def similarity_protocol(sources: Mapping[str, Sequence], targets: Mapping[str, Sequence],
                        converted: Mapping[tuple[str, str], Sequence]) -> SimilarityReport:
    """Mean cosine over every (source speaker, target speaker) pair.

    For each pair, S-T averages all source x target utterance pairs, S-G all
    source x generated pairs and T-G all target x generated pairs; the three
    figures are then averaged over speaker pairs.
    """
    pairs = [(s, t) for s in sorted(sources) for t in sorted(targets) if converted.get((s, t))]
    if not pairs:
        raise EmbeddingError("no converted utterances for any source/target pair")
    st, sg, tg = [], [], []
    for s, t in pairs:
        gen = converted[(s, t)]
        st.append(_mean_cross(sources[s], targets[t]))
        sg.append(_mean_cross(sources[s], gen))
        tg.append(_mean_cross(targets[t], gen))
    return SimilarityReport(float(np.mean(st)), float(np.mean(sg)), float(np.mean(tg)), len(pairs))
