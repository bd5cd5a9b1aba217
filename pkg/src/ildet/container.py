"""ILDET1 binary container.

Layout: magic ``b"ILDET1"``, version (u32 LE), header length (u32 LE), UTF-8
JSON header, then raw little-endian float64 payloads. The header carries a
``tensors`` manifest of ``{name, shape, offset}`` entries; offsets are byte
offsets from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"ILDET1"
VERSION = 1


class ContainerError(ValueError):
    """Malformed or incompatible ILDET1 file."""


def write_container(path, header: dict, tensors: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    manifest = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    full = dict(header)
    full["tensors"] = manifest
    head = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<I", len(head)))
            f.write(head)
            for blob in blobs:
                f.write(blob)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_container(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not an ILDET1 file")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<I", data, pos + 4)
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    payload = memoryview(data)[pos + hlen:]
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 8 * count > len(payload):
            raise ContainerError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(payload[start:start + 8 * count], dtype="<f8").astype(np.float64)
        tensors[entry["name"]] = arr.reshape(shape)
    return header, tensors
