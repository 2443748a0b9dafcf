"""Binary ensemble checkpoints.

Layout (all integers little-endian)::

    b"OENS1"
    u32  header length H
    H    bytes of UTF-8 JSON: {"spec_digest", "specs", "member_count", "tensor_count"}
    per tensor, in member order then sorted name order:
        u16 name length, name bytes ("m<member>/<param>")
        u8  ndim, ndim x u32 dims
        f64 payload, row-major

``spec_digest`` is the SHA-256 of the canonical JSON of every member spec;
a mismatch on load means the file was edited or truncated.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .engine import NetworkSpec, ParameterSet
from .ensemble import Ensemble, Member
from .errors import CheckpointError, ConfigError

MAGIC = b"OENS1"


def _digest(specs: list[list[dict]]) -> str:
    blob = json.dumps(specs, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def dumps(ensemble: Ensemble) -> bytes:
    specs = [m.spec.to_list() for m in ensemble.members]
    names = [(i, n) for i, m in enumerate(ensemble.members) for n in sorted(m.params.tensors)]
    header = json.dumps(
        {"spec_digest": _digest(specs), "specs": specs, "member_count": len(specs), "tensor_count": len(names)},
        sort_keys=True,
    ).encode("utf-8")
    out = [MAGIC, struct.pack("<I", len(header)), header]
    for i, name in names:
        t = np.ascontiguousarray(ensemble.members[i].params.tensors[name], dtype="<f8")
        key = f"m{i}/{name}".encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.tobytes())
    return b"".join(out)


def loads(blob: bytes) -> Ensemble:
    if blob[:5] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = 5

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
        specs_raw = header["specs"]
        if _digest(specs_raw) != header["spec_digest"]:
            raise CheckpointError("spec digest mismatch")
        specs = [NetworkSpec.from_list(s) for s in specs_raw]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc

    tensors: list[dict[str, np.ndarray]] = [{} for _ in specs]
    for _ in range(header["tensor_count"]):
        (klen,) = struct.unpack("<H", take(2))
        key = take(klen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        member, _, name = key.partition("/")
        idx = int(member[1:])
        if not 0 <= idx < len(specs):
            raise CheckpointError(f"tensor {key!r} names a missing member")
        tensors[idx][name] = data
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")

    members = []
    for spec, tmap in zip(specs, tensors):
        params = ParameterSet(tmap)
        try:
            params.check_matches(spec)
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
        members.append(Member(spec, params))
    return Ensemble(members)


def save(ensemble: Ensemble, path) -> None:
    Path(path).write_bytes(dumps(ensemble))


def load(path) -> Ensemble:
    return loads(Path(path).read_bytes())
