"""Binary checkpoint format.

Layout (little-endian)::

    b"CDRW" | version u16 | manifest_len u32 | manifest (UTF-8 JSON)
    repeated: name_len u16 | name | rank u8 | dims u32 * rank | f64 data

Adam moments are stored as ``<name>.adam_m`` / ``<name>.adam_v`` records and
the step counter as a rank-0 record ``__adam_t__``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore

MAGIC = b"CDRW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_records(records: dict[str, np.ndarray], manifest: dict | None = None) -> bytes:
    man = json.dumps(manifest or {}, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", VERSION, len(man)), man]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_records(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    try:
        version, mlen = struct.unpack_from("<HI", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        pos = 10
        manifest = json.loads(blob[pos:pos + mlen].decode("utf-8"))
        pos += mlen
        records = {}
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"{source}: truncated record {name!r}")
            records[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: truncated or corrupt checkpoint ({exc})") from None
    return records, manifest


def save_checkpoint(path, params: ParamStore, manifest: dict | None = None, include_optimizer: bool = True) -> None:
    records = params.values()
    if include_optimizer:
        for k in params.names():
            records[f"{k}.adam_m"] = params.m[k]
            records[f"{k}.adam_v"] = params.v[k]
        records["__adam_t__"] = np.asarray(float(params.t))
    Path(path).write_bytes(encode_records(records, manifest))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    records, manifest = decode_records(Path(path).read_bytes(), str(path))
    names = [k for k in records if not k.endswith((".adam_m", ".adam_v")) and k != "__adam_t__"]
    store = ParamStore({k: records[k] for k in names})
    for k in names:
        if f"{k}.adam_m" in records:
            store.m[k] = records[f"{k}.adam_m"]
            store.v[k] = records[f"{k}.adam_v"]
    if "__adam_t__" in records:
        store.t = int(records["__adam_t__"])
    return store, manifest
