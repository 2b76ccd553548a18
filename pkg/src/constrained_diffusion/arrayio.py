"""Self-describing binary container for named float arrays.

Layout: an 8-byte magic, a little-endian uint32 header length, a UTF-8 JSON
header describing each array (name, dtype, shape, byte offset) plus free-form
metadata, then the raw C-order little-endian array payloads. Checkpoints,
datasets, and sample runs all share this format.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ARRC0001"

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata block to ``path``.

    Float arrays are stored as little-endian float64, integer arrays as
    little-endian int64. Round trip is bit exact.
    """
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = np.ascontiguousarray(arr, dtype="<f8")
            dtype = "<f8"
        elif arr.dtype.kind in "iub":
            arr = np.ascontiguousarray(arr, dtype="<i8")
            dtype = "<i8"
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by :func:`save_arrays`.

    Raises :class:`FormatError` on a bad magic, truncated header, or
    truncated payload; no partial result is returned.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not an array container")
    (header_len,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    header_start = len(MAGIC) + 4
    if len(data) < header_start + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[header_start : header_start + header_len].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: invalid header ({exc})") from exc
    payload = data[header_start + header_len :]
    arrays = {}
    for entry in header.get("arrays", []):
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"{path}: unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise FormatError(f"{path}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape).copy()
    return arrays, header.get("meta", {})
