"""Binary blob files: a JSON header followed by flat little-endian float64 arrays.

Every on-disk artifact of the package that carries numeric state (network
checkpoints, optimizer state, simulation banks) uses this one container so
files are portable and diffable with a hex dump:

    bytes 0..3    magic ``b"SQB1"``
    bytes 4..11   little-endian uint64: header length in bytes
    next          UTF-8 JSON header; must contain ``"arrays": [{"shape": [...]}, ...]``
    rest          the arrays' raw float64 little-endian bytes, concatenated in order
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SQB1"


def write_blob(path, header: dict, arrays: list[np.ndarray]) -> None:
    """Write ``arrays`` (coerced to float64) with ``header`` metadata to ``path``.

    The header is augmented with an ``"arrays"`` manifest recording each
    array's shape; array order is preserved.
    """
    manifest = []
    payload = bytearray()
    for arr in arrays:
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        manifest.append({"shape": list(arr.shape)})
        payload += arr.astype("<f8", copy=False).tobytes()
    full_header = dict(header)
    full_header["arrays"] = manifest
    raw = json.dumps(full_header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(bytes(payload))


def read_blob(path) -> tuple[dict, list[np.ndarray]]:
    """Read a blob written by :func:`write_blob`; returns (header, arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a blob file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = []
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            arrays.append(data.reshape(shape).astype(np.float64))
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after declared arrays")
    return header, arrays
