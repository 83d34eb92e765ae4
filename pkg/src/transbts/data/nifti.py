"""Reader (and a minimal writer) for uncompressed single-file NIfTI-1 volumes.

Supported voxel types: uint8 (2), int16 (4) and float32 (16). Byte order is
detected from ``sizeof_hdr``. Data is returned in ``(x, y, z[, t])`` index
order, i.e. the on-disk Fortran order reshaped accordingly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError

HEADER_SIZE = 348
MIN_FILE_SIZE = 352

# (struct code, field name); 348 bytes in total
_FIELDS = [
    ("i", "sizeof_hdr"),
    ("10s", "data_type"),
    ("18s", "db_name"),
    ("i", "extents"),
    ("h", "session_error"),
    ("b", "regular"),
    ("b", "dim_info"),
    ("8h", "dim"),
    ("f", "intent_p1"),
    ("f", "intent_p2"),
    ("f", "intent_p3"),
    ("h", "intent_code"),
    ("h", "datatype"),
    ("h", "bitpix"),
    ("h", "slice_start"),
    ("8f", "pixdim"),
    ("f", "vox_offset"),
    ("f", "scl_slope"),
    ("f", "scl_inter"),
    ("h", "slice_end"),
    ("b", "slice_code"),
    ("b", "xyzt_units"),
    ("f", "cal_max"),
    ("f", "cal_min"),
    ("f", "slice_duration"),
    ("f", "toffset"),
    ("i", "glmax"),
    ("i", "glmin"),
    ("80s", "descrip"),
    ("24s", "aux_file"),
    ("h", "qform_code"),
    ("h", "sform_code"),
    ("6f", "quatern"),
    ("4f", "srow_x"),
    ("4f", "srow_y"),
    ("4f", "srow_z"),
    ("16s", "intent_name"),
    ("4s", "magic"),
]
_FORMAT = "".join(code for code, _ in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE

DATATYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}
MAGICS = (b"n+1\x00", b"ni1\x00")


class NiftiError(DataError):
    """Base class for NIfTI parse failures."""


class NiftiHeaderError(NiftiError):
    """``sizeof_hdr`` or ``dim`` is invalid in either byte order."""


class NiftiMagicError(NiftiError):
    """Magic string is neither ``n+1`` nor ``ni1``."""


class NiftiDatatypeError(NiftiError):
    """Voxel datatype code is not supported."""


class NiftiTruncatedError(NiftiError):
    """The byte stream ends before the header or voxel payload does."""


@dataclass
class Nifti1Header:
    sizeof_hdr: int = HEADER_SIZE
    dim: tuple[int, ...] = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype: int = 16
    bitpix: int = 32
    pixdim: tuple[float, ...] = (1.0,) * 8
    vox_offset: float = 352.0
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    magic: bytes = b"n+1\x00"
    endian: str = "<"
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.dim[1 : self.dim[0] + 1])

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self.pixdim[1 : self.dim[0] + 1])


def _unpack(blob: bytes, endian: str) -> dict:
    values = struct.unpack(endian + _FORMAT, blob[:HEADER_SIZE])
    out, i = {}, 0
    for code, name in _FIELDS:
        count = int(code[:-1]) if code[:-1] and code[-1] != "s" else 1
        out[name] = values[i] if count == 1 else tuple(values[i : i + count])
        i += count
    return out


def parse_header(blob: bytes) -> Nifti1Header:
    if len(blob) < HEADER_SIZE:
        raise NiftiTruncatedError(f"{len(blob)} bytes is shorter than a NIfTI-1 header")
    (size_le,) = struct.unpack("<i", blob[:4])
    if size_le == HEADER_SIZE:
        endian = "<"
    elif struct.unpack(">i", blob[:4])[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise NiftiHeaderError(f"sizeof_hdr is {size_le}, expected {HEADER_SIZE} in either byte order")
    raw = _unpack(blob, endian)
    if raw["magic"] not in MAGICS:
        raise NiftiMagicError(f"bad magic {raw['magic']!r}")
    dim = raw["dim"]
    if not 1 <= dim[0] <= 7 or any(d < 1 for d in dim[1 : dim[0] + 1]):
        raise NiftiHeaderError(f"invalid dim {dim}")
    if raw["datatype"] not in DATATYPES:
        raise NiftiDatatypeError(f"unsupported datatype code {raw['datatype']}")
    return Nifti1Header(
        sizeof_hdr=HEADER_SIZE,
        dim=dim,
        datatype=raw["datatype"],
        bitpix=raw["bitpix"],
        pixdim=raw["pixdim"],
        vox_offset=raw["vox_offset"],
        scl_slope=raw["scl_slope"],
        scl_inter=raw["scl_inter"],
        magic=raw["magic"],
        endian=endian,
        raw=raw,
    )


def parse_nifti1(blob: bytes, image: bytes | None = None, apply_scaling: bool = True):
    """Parse a NIfTI-1 byte stream into ``(header, array)``.

    For two-file (``ni1``) data pass the ``.img`` bytes as ``image``. When
    ``scl_slope`` is nonzero the returned array is ``raw * slope + inter`` in
    float32; otherwise, and for the identity scaling (1, 0), the stored dtype
    is returned unchanged.
    """
    header = parse_header(blob)
    if header.magic == b"n+1\x00":
        if len(blob) < MIN_FILE_SIZE:
            raise NiftiTruncatedError(f"{len(blob)} bytes is shorter than the minimal single-file size")
        offset, source = int(header.vox_offset), blob
    else:
        if image is None:
            raise NiftiTruncatedError("two-file (ni1) header given without image bytes")
        offset, source = int(header.vox_offset), image
    dtype = DATATYPES[header.datatype].newbyteorder(header.endian)
    count = int(np.prod(header.shape))
    nbytes = count * dtype.itemsize
    if len(source) < offset + nbytes:
        raise NiftiTruncatedError(f"payload needs {nbytes} bytes at offset {offset}, only {len(source) - offset} present")
    data = np.frombuffer(source, dtype=dtype, count=count, offset=offset)
    data = data.astype(dtype.newbyteorder("="), copy=False).reshape(header.shape, order="F")
    slope = header.scl_slope
    identity = slope == 1 and header.scl_inter == 0
    if apply_scaling and slope and np.isfinite(slope) and not identity:
        data = (data.astype(np.float32) * np.float32(slope) + np.float32(header.scl_inter)).astype(np.float32)
    return header, np.array(data, order="C")


def read_nifti1(path):
    return parse_nifti1(Path(path).read_bytes())


def encode_nifti1(
    array: np.ndarray,
    spacing=None,
    endian: str = "<",
    scl_slope: float = 0.0,
    scl_inter: float = 0.0,
) -> bytes:
    """Serialize ``array`` (x, y, z[, t] order) as a single-file NIfTI-1 stream."""
    array = np.asarray(array)
    codes = {v: k for k, v in DATATYPES.items()}
    if array.dtype.newbyteorder("=") not in codes:
        raise NiftiDatatypeError(f"cannot encode dtype {array.dtype}")
    code = codes[array.dtype.newbyteorder("=")]
    ndim = array.ndim
    dim = (ndim,) + array.shape + (1,) * (7 - ndim)
    spacing = tuple(spacing or (1.0,) * ndim)
    pixdim = (1.0,) + spacing + (1.0,) * (7 - ndim)
    values = {name: 0 for _, name in _FIELDS}
    values.update(
        sizeof_hdr=HEADER_SIZE,
        data_type=b"",
        db_name=b"",
        dim=dim,
        datatype=code,
        bitpix=array.dtype.itemsize * 8,
        pixdim=pixdim,
        vox_offset=352.0,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        descrip=b"",
        aux_file=b"",
        quatern=(0.0,) * 6,
        srow_x=(0.0,) * 4,
        srow_y=(0.0,) * 4,
        srow_z=(0.0,) * 4,
        intent_name=b"",
        magic=b"n+1\x00",
    )
    flat = []
    for code_, name in _FIELDS:
        v = values[name]
        flat.extend(v if isinstance(v, tuple) else [v])
    header = struct.pack(endian + _FORMAT, *flat)
    payload = np.asarray(array, dtype=array.dtype.newbyteorder(endian)).tobytes(order="F")
    return header + b"\x00" * 4 + payload
