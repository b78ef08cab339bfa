"""Severity reports over intelligibility groups and augmentation-set generation."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .audio import Waveform, load_wav, save_wav
from .checkpoint import derive_seed
from .manifest import ManifestRow, write_manifest
from .metrics import MetricError, estoi, p_align, stoi

log = logging.getLogger(__name__)

GROUPS = ("VL", "L", "M", "H")


@dataclass
class Utterance:
    id: str
    speaker_id: str
    word: str
    audio: Waveform
    group: str | None = None


@dataclass
class MetricReport:
    per_speaker: dict[str, dict[str, float]]
    per_group: dict[str, dict[str, float]]
    counts: dict[str, int]
    missing: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"per_speaker": self.per_speaker, "per_group": self.per_group, "counts": self.counts,
                "missing": self.missing}


def pair_scores(control: Utterance, test: Utterance) -> tuple[float, float]:
    ref, warped, _ = p_align(control.audio, test.audio)
    return stoi(ref, warped), estoi(ref, warped)


def p_metric_report(control: Sequence[Utterance], test: Sequence[Utterance],
                    groups: Mapping[str, str] | None = None) -> MetricReport:
    """P-STOI / P-ESTOI per speaker and per intelligibility group.

    Each test utterance is scored against every control rendition of the same
    word; its score is the mean over renditions. Speaker scores average their
    utterances and group scores average their speakers.
    """
    by_word: dict[str, list[Utterance]] = defaultdict(list)
    for c in control:
        by_word[c.word].append(c)
    utt_scores: dict[str, list[tuple[float, float]]] = defaultdict(list)
    missing = []
    for u in sorted(test, key=lambda u: u.id):
        refs = by_word.get(u.word)
        if not refs:
            missing.append(u.id)
            log.warning("no control rendition of word %r for %s", u.word, u.id)
            continue
        try:
            scores = [pair_scores(c, u) for c in sorted(refs, key=lambda c: c.id)]
        except MetricError as exc:
            missing.append(u.id)
            log.warning("skipping %s: %s", u.id, exc)
            continue
        utt_scores[u.speaker_id].append(tuple(np.mean(scores, axis=0)))
    per_speaker = {}
    counts = {}
    for spk, vals in sorted(utt_scores.items()):
        arr = np.asarray(vals)
        per_speaker[spk] = {"P-STOI": float(arr[:, 0].mean()), "P-ESTOI": float(arr[:, 1].mean())}
        counts[spk] = len(vals)
    group_of = dict(groups or {})
    for u in test:
        if u.group and u.speaker_id not in group_of:
            group_of[u.speaker_id] = u.group
    members: dict[str, list[str]] = defaultdict(list)
    for spk in per_speaker:
        if spk in group_of:
            members[group_of[spk]].append(spk)
    per_group = {}
    for g, spks in members.items():
        per_group[g] = {m: float(np.mean([per_speaker[s][m] for s in spks])) for m in ("P-STOI", "P-ESTOI")}
        counts[f"group:{g}"] = len(spks)
    return MetricReport(per_speaker, per_group, counts, missing)


def group_order(labels) -> list[str]:
    known = [g for g in GROUPS if g in labels]
    return known + sorted(set(labels) - set(GROUPS))


def write_reports(prefix, reports: Mapping[str, MetricReport], similarity: dict | None = None) -> tuple[Path, Path]:
    """TSV shaped like a metric x group table, plus a JSON twin."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    labels = set()
    for r in reports.values():
        labels |= set(r.per_group)
    cols = group_order(labels)
    lines = ["metric\t" + "\t".join(cols)]
    for metric in ("P-STOI", "P-ESTOI"):
        for name, r in reports.items():
            cells = [f"{r.per_group[g][metric]:.4f}" if g in r.per_group else "" for g in cols]
            lines.append(f"{metric} ({name})\t" + "\t".join(cells))
    tsv = prefix.with_suffix(".tsv")
    tsv.write_text("\n".join(lines) + "\n", encoding="utf-8")
    payload = {name: r.to_json() for name, r in reports.items()}
    if similarity is not None:
        payload["similarity"] = similarity
    js = prefix.with_suffix(".json")
    js.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return tsv, js


@dataclass
class AugmentationSummary:
    manifest: Path
    written: int
    expected: int
    failures: list[tuple[str, str, str]]


def generate_augmentation_set(control: Sequence[ManifestRow], targets: Sequence[str],
                              convert: Callable[[Waveform, str, int], Waveform], out_dir,
                              root_seed: int = 0, base_dir=None) -> AugmentationSummary:
    """Convert every control utterance towards every target speaker.

    ``convert(waveform, target, seed)`` runs the conversion; each
    (utterance, target) pair gets its own seed derived from ``root_seed``.
    Failures are logged, skipped and listed in the summary.
    """
    out = Path(out_dir)
    rows = []
    failures = []
    for row in sorted(control, key=lambda r: r.id):
        src = load_wav(row.resolve(base_dir))
        for target in sorted(targets):
            uid = f"{row.id}__to__{target}"
            seed = derive_seed(root_seed, "augment", row.id, target)
            try:
                wav = convert(src, target, seed)
            except Exception as exc:  # noqa: BLE001 - one bad item must not stop the batch
                log.error("conversion %s failed: %s", uid, exc)
                failures.append((row.id, target, str(exc)))
                continue
            rel = Path("wav") / target / f"{uid}.wav"
            save_wav(out / rel, wav)
            rows.append(ManifestRow(id=uid, audio_path=str(rel), speaker_id=target, word=row.word,
                                    source_id=row.id, source_speaker=row.speaker_id, target_id=target))
    manifest = write_manifest(out / "manifest.jsonl", rows)
    expected = len(control) * len(targets)
    log.info("augmentation: %d/%d utterances written", len(rows), expected)
    return AugmentationSummary(manifest, len(rows), expected, failures)
