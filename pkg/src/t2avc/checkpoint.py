"""Versioned binary checkpoints and deterministic seed derivation.

Checkpoint layout (little-endian)::

    b"T2AV"            magic
    u32                format version
    u32                header length N
    N bytes            UTF-8 JSON header {"kind", "config", "meta"}
    remaining bytes    torch.save() payload of the state dict
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import torch

MAGIC = b"T2AV"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def derive_seed(root: int, *parts) -> int:
    """Stable 63-bit seed for ``(root, *parts)``; independent of call order."""
    key = "\x1f".join([str(int(root)), *map(str, parts)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def state_digest(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, kind: str, config: dict, state: dict, meta: dict | None = None) -> None:
    header = json.dumps({"kind": kind, "config": config, "meta": meta or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu() for k, v in state.items()}, buf)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + buf.getvalue())


def load_checkpoint(path, kind: str) -> tuple[dict, dict, dict]:
    """Return ``(config, state_dict, meta)``; refuses other kinds or versions."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    header = json.loads(raw[12:12 + n].decode())
    if header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    state = torch.load(io.BytesIO(raw[12 + n:]), map_location="cpu", weights_only=True)
    return header["config"], state, header["meta"]
