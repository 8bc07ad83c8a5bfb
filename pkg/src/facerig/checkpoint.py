"""Versioned binary checkpoint container.

Layout: 8-byte magic, uint32 format version, uint64 header length, a JSON
header (metadata plus an array index of name/dtype/shape/offset), then the
concatenated raw array payload.  All integers and array payloads are
little-endian; arrays are C-order.  Loading parses everything up front and
raises before returning any partial state.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FRIGCKPT"
FORMAT_VERSION = 1

REQUIRED_NAMESPACES = ("codec/", "diffusion/", "guidance/", "projection/")


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    """Write named arrays plus a JSON metadata record."""
    index = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "metadata": metadata, "arrays": index},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def load_checkpoint(
    path, required_namespaces: tuple[str, ...] | None = REQUIRED_NAMESPACES
) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (arrays, metadata).

    Raises ValueError on a bad magic header, a format version mismatch
    (naming expected and found versions), or a missing required namespace.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic header)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise ValueError(
            f"{path}: checkpoint format version mismatch: expected "
            f"{FORMAT_VERSION}, found {version}"
        )
    (header_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos: pos + header_len].decode("utf-8"))
    pos += header_len

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start = pos + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(raw):
            raise ValueError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(raw[start:stop], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()

    if required_namespaces:
        for ns in required_namespaces:
            if not any(name.startswith(ns) for name in arrays):
                raise ValueError(f"{path}: checkpoint is missing namespace {ns!r}")
    return arrays, header["metadata"]
