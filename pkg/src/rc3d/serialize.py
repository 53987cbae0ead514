"""RC3D tensor files and checkpoint blobs.

A tensor record is ``b"RC3D"``, a little-endian uint32 format version, a
uint32 rank, one uint32 per extent, then the float32 little-endian payload.
A checkpoint is one blob of consecutive records plus a JSON manifest giving
each parameter's name, byte offset, byte length and shape.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RC3D"
VERSION = 1
BLOB_NAME = "weights.rc3d"
MANIFEST_NAME = "manifest.json"


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; return (array, end offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic at byte {offset}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = offset + 12
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = pos + 4 * count
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
    return arr.astype(np.float32), end


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


def save_checkpoint(directory, tensors: Mapping[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        rec = encode_tensor(tensors[name])
        entries.append({"name": name, "offset": offset, "length": len(rec),
                        "shape": list(np.shape(tensors[name]))})
        chunks.append(rec)
        offset += len(rec)
    (directory / BLOB_NAME).write_bytes(b"".join(chunks))
    manifest = {"format": "RC3D", "version": VERSION, "blob": BLOB_NAME, "tensors": entries}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    buf = (directory / manifest["blob"]).read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        arr, end = decode_tensor(buf, entry["offset"])
        if end - entry["offset"] != entry["length"] or list(arr.shape) != entry["shape"]:
            raise FormatError(f"manifest entry {entry['name']!r} disagrees with blob")
        out[entry["name"]] = arr
    return out
