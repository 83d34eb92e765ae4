"""Checkpoint files: a JSON manifest followed by a little-endian raw payload.

Layout::

    b"TBTSCKPT"          8-byte magic
    uint64 LE            manifest length
    manifest             UTF-8 JSON (sorted keys)
    payload              concatenated arrays; offsets are relative to here

The manifest lists every stored array (parameters, normalization buffers
and, when an optimizer state is saved, the Adam moments) with its shape,
dtype, byte offset and size, plus the model config and training metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import DataError

MAGIC = b"TBTSCKPT"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, message, name):
        super().__init__(message)
        self.name = name


class CheckpointTruncatedError(CheckpointError):
    pass


def encode_checkpoint(config: ModelConfig, arrays: list[tuple[str, str, np.ndarray]], metadata: dict) -> bytes:
    """``arrays`` holds ``(kind, name, array)`` triples in storage order."""
    entries, chunks, offset = [], [], 0
    for kind, name, array in arrays:
        dtype = array.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"{name}: cannot store dtype {dtype}")
        raw = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        entries.append(
            {"kind": kind, "name": name, "shape": list(array.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "metadata": metadata,
        "tensors": entries,
        "payload_size": offset,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def read_manifest(blob: bytes) -> tuple[dict, int]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < 16:
        raise CheckpointTruncatedError("checkpoint ends inside its preamble")
    (n,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + n:
        raise CheckpointTruncatedError("checkpoint ends inside its manifest")
    try:
        manifest = json.loads(blob[16 : 16 + n])
    except ValueError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    _validate_layout(manifest)
    return manifest, 16 + n


def _validate_layout(manifest: dict) -> None:
    end = 0
    for entry in sorted(manifest["tensors"], key=lambda e: e["offset"]):
        if entry["offset"] < end:
            raise CheckpointError(f"{entry['name']}: overlapping payload offsets")
        size = int(np.prod(entry["shape"])) * np.dtype(_DTYPES[entry["dtype"]]).itemsize
        if size != entry["nbytes"]:
            raise CheckpointShapeError(
                f"{entry['name']}: shape {entry['shape']} needs {size} bytes, manifest says {entry['nbytes']}",
                entry["name"],
            )
        end = entry["offset"] + entry["nbytes"]
    if end != manifest["payload_size"]:
        raise CheckpointError(f"payload size {manifest['payload_size']} != sum of tensor sizes {end}")


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    manifest, start = read_manifest(blob)
    payload = memoryview(blob)[start:]
    if len(payload) != manifest["payload_size"]:
        raise CheckpointTruncatedError(
            f"payload has {len(payload)} bytes, manifest declares {manifest['payload_size']}"
        )
    arrays = {}
    for e in manifest["tensors"]:
        dtype = np.dtype(_DTYPES[e["dtype"]])
        arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(e["shape"])), offset=e["offset"])
        arrays[(e["kind"], e["name"])] = arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return manifest, arrays


def write_bytes_atomic(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
