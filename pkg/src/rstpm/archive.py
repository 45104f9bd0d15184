"""Single-file tensor archive used for model bundles and raw map dumps.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"RSTPMARC"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length L
    20      L     header: UTF-8 JSON object
    20+L    ...   payload: concatenated tensor blocks

The header holds ``{"version": 1, "meta": {...}, "tensors": [...]}``; each
tensor entry is ``{"name", "shape", "offset", "nbytes", "crc32"}`` where
``offset`` is relative to the payload start and the block is raw
little-endian float32 in C (row-major) order. ``crc32`` is zlib's CRC-32 of
the block bytes. JSON is written with sorted keys so identical content
produces identical bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"RSTPMARC"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def write_archive(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries, blocks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype="<f4")).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(data), "crc32": zlib.crc32(data)})
        blocks.append(data)
        offset += len(data)
    header = json.dumps({"version": VERSION, "meta": dict(meta or {}), "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for b in blocks:
            fh.write(b)


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: file too short for an archive header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a tensor archive (bad magic)")
    if version != VERSION:
        raise FormatError(f"{path}: archive version {version}, this reader supports {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: header version {header.get('version')} != {VERSION}")
    tensors = {}
    for e in header["tensors"]:
        lo, hi = start + e["offset"], start + e["offset"] + e["nbytes"]
        if hi > len(raw):
            raise FormatError(f"{path}: truncated; tensor {e['name']!r} is missing or incomplete")
        block = raw[lo:hi]
        if zlib.crc32(block) != e["crc32"]:
            raise FormatError(f"{path}: checksum mismatch in tensor {e['name']!r}")
        arr = np.frombuffer(block, dtype="<f4").astype(np.float32)
        tensors[e["name"]] = arr.reshape(e["shape"])
    return tensors, header["meta"]
