"""Versioned binary blobs and SID table TSV files.

Blob layout::

    b"DIGB" | u16 version | u32 header length | u32 crc32(header + payload)
    | header (UTF-8 JSON: kind, meta, array specs) | payload (raw little-endian arrays)
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DIGB"
BLOB_VERSION = 1
SID_TABLE_VERSION = 1
_HEAD = struct.Struct("<4sHII")


class CorruptBlobError(ValueError):
    pass


def write_blob(path: Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    specs, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        specs.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": specs}, sort_keys=True).encode()
    payload = b"".join(chunks)
    crc = zlib.crc32(header + payload)
    Path(path).write_bytes(_HEAD.pack(MAGIC, BLOB_VERSION, len(header), crc) + header + payload)


def read_blob(path: Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise CorruptBlobError(f"{path}: truncated")
    magic, version, hlen, crc = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptBlobError(f"{path}: bad magic")
    if version != BLOB_VERSION:
        raise CorruptBlobError(f"{path}: unsupported version {version}")
    body = buf[_HEAD.size:]
    if zlib.crc32(body) != crc:
        raise CorruptBlobError(f"{path}: checksum mismatch")
    if hlen > len(body):
        raise CorruptBlobError(f"{path}: header length exceeds file size")
    try:
        header = json.loads(body[:hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptBlobError(f"{path}: unreadable header") from exc
    if kind is not None and header["kind"] != kind:
        raise CorruptBlobError(f"{path}: expected {kind}, found {header['kind']}")
    payload = body[hlen:]
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=spec["offset"])
        arrays[spec["name"]] = arr.reshape(spec["shape"]).copy()
    return header["meta"], arrays


def write_sid_table(path: Path, item_ids: np.ndarray, sid_table: np.ndarray, K: int) -> None:
    lines = [f"# digrec-sid-table v{SID_TABLE_VERSION} L={sid_table.shape[1]} K={K}"]
    for iid, row in zip(item_ids, sid_table):
        lines.append(f"{int(iid)}\t{','.join(str(int(s)) for s in row)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_sid_table(path: Path) -> tuple[np.ndarray, np.ndarray]:
    ids, rows = [], []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        iid, codes = line.split("\t")
        ids.append(int(iid))
        rows.append([int(s) for s in codes.split(",")])
    return np.asarray(ids, dtype=np.int64), np.asarray(rows, dtype=np.int64)
