"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ADVN"  u32 version  |  u32 member_count
    per member:   u32 len + spec descriptor (UTF-8 JSON)
                  parameters as f64, in layer order (weights row-major, then bias)
    u32 len + metadata (UTF-8 JSON: step, member seeds, mode, digests)
    8-byte checksum

The checksum is the first 8 bytes of SHA-256 over everything between the
version field and the checksum.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Ensemble, ModelParams, ModelSpec, param_count, param_shapes

MAGIC = b"ADVN"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for a malformed checkpoint; ``kind`` is magic, version, checksum or format."""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(f"{kind} error: {message}")


@dataclass
class Checkpoint:
    ensemble: Ensemble
    step: int = 0
    rng_digest: str = ""
    config_digest: str = ""
    extra: dict = field(default_factory=dict)


def _checksum(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:8]


def encode(ckpt: Checkpoint) -> bytes:
    parts = [struct.pack("<I", len(ckpt.ensemble.members))]
    for m in ckpt.ensemble.members:
        desc = m.spec.descriptor().encode("utf-8")
        parts.append(struct.pack("<I", len(desc)))
        parts.append(desc)
        for a in m.arrays:
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    meta = {
        "step": int(ckpt.step),
        "mode": ckpt.ensemble.mode,
        "seeds": [int(m.seed) for m in ckpt.ensemble.members],
        "rng_digest": ckpt.rng_digest,
        "config_digest": ckpt.config_digest,
        "extra": ckpt.extra,
    }
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(mb)))
    parts.append(mb)
    payload = b"".join(parts)
    return MAGIC + struct.pack("<I", VERSION) + payload + _checksum(payload)


def decode(raw: bytes) -> Checkpoint:
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, found {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError("version", f"unsupported version {version} (expected {VERSION})")
    payload, tail = raw[8:-8], raw[-8:]
    if len(raw) < 16 or _checksum(payload) != tail:
        raise CheckpointError("checksum", "payload checksum mismatch (truncated or corrupted file)")
    try:
        return _parse_payload(payload)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError("format", str(exc)) from None


def _parse_payload(payload: bytes) -> Checkpoint:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise ValueError("unexpected end of payload")
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    specs, arrays = [], []
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        spec = ModelSpec.from_dict(json.loads(take(n).decode("utf-8")))
        member = []
        for shape in param_shapes(spec):
            size = int(np.prod(shape))
            member.append(np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape))
        specs.append(spec)
        arrays.append(member)
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(take(n).decode("utf-8"))
    if pos != len(payload):
        raise ValueError("trailing bytes after metadata")
    members = [ModelParams(s, a, seed) for s, a, seed in zip(specs, arrays, meta["seeds"])]
    return Checkpoint(Ensemble(members, meta["mode"]), meta["step"], meta["rng_digest"],
                      meta["config_digest"], meta.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint | Ensemble, path) -> Path:
    if isinstance(ckpt, Ensemble):
        ckpt = Checkpoint(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def parameter_bytes(ensemble: Ensemble) -> int:
    return 8 * sum(param_count(m.spec) for m in ensemble.members)
