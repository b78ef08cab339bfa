"""JSON-lines utterance manifests.

One object per line with keys ``id``, ``audio_path``, ``speaker_id``,
``word`` and optionally ``alignment_path`` and ``group``. Augmentation
output rows also carry ``source_id``, ``source_speaker`` and ``target_id``.
Relative paths resolve against the manifest's directory.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    id: str
    audio_path: str
    speaker_id: str
    word: str
    alignment_path: str | None = None
    group: str | None = None
    source_id: str | None = None
    source_speaker: str | None = None
    target_id: str | None = None

    def resolve(self, base_dir=None) -> Path:
        p = Path(self.audio_path)
        return p if p.is_absolute() or base_dir is None else Path(base_dir) / p

    def resolve_alignment(self, base_dir=None) -> Path | None:
        if self.alignment_path is None:
            return None
        p = Path(self.alignment_path)
        return p if p.is_absolute() or base_dir is None else Path(base_dir) / p

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


_FIELDS = {f.name for f in fields(ManifestRow)}
_REQUIRED = ("id", "audio_path", "speaker_id", "word")


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        missing = [k for k in _REQUIRED if k not in obj]
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing keys {missing}")
        unknown = set(obj) - _FIELDS
        if unknown:
            raise ManifestError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
        rows.append(ManifestRow(**obj))
    ids = [r.id for r in rows]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate utterance ids")
    return rows


def write_manifest(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    return path
