"""SPT1 tensor files, checkpoint containers and PGM label maps.

SPT1 layout: b"SPT1", u8 rank, rank x u32 LE extents, f32 LE payload (row-major).
A checkpoint is one container of back-to-back SPT1 records plus a JSON
manifest of (name, shape, offset) so checkpoints can be diffed by name.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPT1"


class FormatError(IOError):
    pass


def encode_spt(array) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f4")
    if not 1 <= a.ndim <= 255:
        raise FormatError(f"SPT1 needs rank 1..255, got {a.ndim}")
    head = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_spt(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise FormatError(f"bad SPT1 magic at byte {offset}")
    if len(buf) < offset + 5:
        raise FormatError("truncated SPT1 header")
    rank = buf[offset + 4]
    pos = offset + 5
    if rank < 1 or len(buf) < pos + 4 * rank:
        raise FormatError("truncated or invalid SPT1 header")
    shape = struct.unpack(f"<{rank}I", bytes(buf[pos:pos + 4 * rank]))
    pos += 4 * rank
    nbytes = 4 * int(np.prod(shape))
    if len(buf) < pos + nbytes:
        raise FormatError("truncated SPT1 payload")
    arr = np.frombuffer(bytes(buf[pos:pos + nbytes]), dtype="<f4").reshape(shape).astype(np.float32)
    return arr, pos + nbytes


def write_spt(path, array):
    Path(path).write_bytes(encode_spt(array))


def read_spt(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_spt(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after SPT1 record")
    return arr


def save_checkpoint(directory, state: dict[str, np.ndarray], stem="checkpoint"):
    """Write ``<stem>.spt`` and ``<stem>.json`` atomically (temp file then rename)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = io.BytesIO()
    manifest = []
    for name in sorted(state):
        offset = blob.tell()
        arr = np.asarray(state[name])
        blob.write(encode_spt(arr.reshape(arr.shape or (1,))))
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
    for suffix, data in ((".spt", blob.getvalue()),
                         (".json", json.dumps({"tensors": manifest}, indent=1).encode())):
        tmp = directory / f".{stem}{suffix}.tmp"
        tmp.write_bytes(data)
        os.replace(tmp, directory / f"{stem}{suffix}")


def load_checkpoint(directory, stem="checkpoint") -> dict[str, np.ndarray]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / f"{stem}.json").read_text())["tensors"]
    except (OSError, ValueError, KeyError) as e:
        raise FormatError(f"cannot read checkpoint manifest in {directory}: {e}") from e
    buf = (directory / f"{stem}.spt").read_bytes()
    state = {}
    for entry in manifest:
        arr, _ = decode_spt(buf, entry["offset"])
        state[entry["name"]] = arr.reshape(entry["shape"])
    return state


def write_pgm(path, labels: np.ndarray):
    """Binary PGM (P5, maxval 255) of a uint8 label map."""
    lab = np.asarray(labels, dtype=np.uint8)
    h, w = lab.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + lab.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)
