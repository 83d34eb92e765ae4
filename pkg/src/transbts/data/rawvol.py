"""Self-describing raw volume files (``.rawvol``).

Layout::

    b"RAWVOL1\\n"                 8-byte magic
    uint32 little-endian         manifest length in bytes
    manifest                     UTF-8 JSON: shape, spacing, dtype, endian
    payload                      flat little-endian C-order array

Each file carries its own manifest, so a phantom case directory holds
exactly one file per volume.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"RAWVOL1\n"
DTYPES = {"float32": "<f4", "uint8": "|u1", "int16": "<i2"}


def encode_rawvol(array: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> bytes:
    array = np.asarray(array)
    name = array.dtype.name
    if name not in DTYPES:
        raise DataError(f"rawvol does not store dtype {name}")
    manifest = {
        "format": "rawvol",
        "version": 1,
        "shape": list(array.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": name,
        "endian": "little",
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    payload = np.ascontiguousarray(array, dtype=DTYPES[name]).tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_rawvol(blob: bytes) -> tuple[np.ndarray, dict]:
    if blob[:8] != MAGIC:
        raise DataError("not a rawvol file (bad magic)")
    (n,) = struct.unpack("<I", blob[8:12])
    try:
        manifest = json.loads(blob[12 : 12 + n])
    except ValueError as exc:
        raise DataError(f"corrupt rawvol manifest: {exc}") from None
    dtype = np.dtype(DTYPES.get(manifest.get("dtype"), "V"))
    if dtype.kind == "V":
        raise DataError(f"unsupported rawvol dtype {manifest.get('dtype')!r}")
    shape = tuple(manifest["shape"])
    payload = blob[12 + n :]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise DataError(f"rawvol payload has {len(payload)} bytes, manifest implies {expected}")
    array = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return array, manifest


def write_rawvol(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    Path(path).write_bytes(encode_rawvol(array, spacing))


def read_rawvol(path) -> tuple[np.ndarray, dict]:
    return decode_rawvol(Path(path).read_bytes())
