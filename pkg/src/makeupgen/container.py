"""Self-describing binary container for checkpoints and tokens.

Byte layout (all integers little-endian):

    offset  size        content
    0       8           magic ``b"MKGCTNR1"``
    8       4           uint32 header length ``n``
    12      n           UTF-8 JSON header
    12+n    ...         array payload, concatenated C-order

The JSON header carries::

    {
      "schema_version": 1,
      "kind": "<record kind>",
      "meta": { ... caller metadata, JSON-serializable ... },
      "arrays": [
        {"name": str, "dtype": str, "shape": [int, ...], "offset": int}
      ]
    }

Array offsets are relative to the start of the payload.  The layout is
stable across releases; readers reject unknown magic or schema
versions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MKGCTNR1"
SCHEMA_VERSION = 1


class ContainerError(ValueError):
    """Corrupt, truncated or incompatible container file."""


@dataclass(frozen=True)
class Container:
    kind: str
    meta: dict
    arrays: dict[str, np.ndarray]


def write_container(
    path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]
) -> None:
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
            }
        )
        payload += arr.tobytes()
    header = json.dumps(
        {
            "schema_version": SCHEMA_VERSION,
            "kind": kind,
            "meta": meta,
            "arrays": entries,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def read_container(path: str | Path, expect_kind: str | None = None) -> Container:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise ContainerError(f"{path}: not a container file")
    (header_len,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + header_len:
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header ({exc})") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ContainerError(
            f"{path}: schema version {header.get('schema_version')} "
            f"unsupported (expected {SCHEMA_VERSION})"
        )
    kind = header.get("kind", "")
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(
            f"{path}: kind {kind!r} does not match expected {expect_kind!r}"
        )
    payload = raw[12 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise ContainerError(f"{path}: array {entry['name']!r} truncated")
        arr = np.frombuffer(
            payload, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
            offset=start,
        ).reshape(shape)
        arrays[entry["name"]] = arr.copy()
    return Container(kind=kind, meta=header.get("meta", {}), arrays=arrays)
