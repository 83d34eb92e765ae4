"""Regenerate the NIfTI-1 fixture suite with nibabel as the reference writer.

Each case writes ``<name>.nii`` plus ``<name>.npz`` holding the array nibabel
reads back (``scaled``, float64, and ``raw``, the stored values), so the
expected tensors never pass through the parser under test.

    python tests/fixtures/make_nifti_fixtures.py
"""

from pathlib import Path

import nibabel as nib
import numpy as np

HERE = Path(__file__).resolve().parent

CASES = [
    # name, endianness, dtype, shape, (slope, inter)
    ("le_uint8", "<", np.uint8, (5, 4, 3), None),
    ("le_int16", "<", np.int16, (5, 4, 3), None),
    ("le_float32", "<", np.float32, (5, 4, 3), None),
    ("be_uint8", ">", np.uint8, (4, 3, 2), None),
    ("be_int16", ">", np.int16, (4, 3, 2), None),
    ("be_float32", ">", np.float32, (4, 3, 2), None),
    ("le_int16_scaled", "<", np.int16, (6, 5, 4), (0.5, -3.0)),
    ("be_int16_scaled", ">", np.int16, (3, 3, 3), (2.0, 1.0)),
    ("le_float32_4d", "<", np.float32, (3, 2, 2, 2), None),
]


def _values(dtype, shape, rng):
    if dtype == np.uint8:
        return rng.integers(0, 256, shape).astype(dtype)
    if dtype == np.int16:
        return rng.integers(-1000, 1000, shape).astype(dtype)
    return rng.standard_normal(shape).astype(dtype)


def write_case(name, endian, dtype, shape, scaling, rng):
    data = _values(dtype, shape, rng)
    hdr = nib.Nifti1Header(endianness=endian)
    hdr.set_data_shape(shape)
    hdr.set_data_dtype(dtype)
    hdr.set_zooms((1.0, 1.5, 2.0, 1.0)[: len(shape)])
    if scaling is not None:
        hdr.set_slope_inter(*scaling)
    hdr["vox_offset"] = 352
    payload = np.asarray(data, dtype=np.dtype(dtype).newbyteorder(endian)).tobytes(order="F")
    path = HERE / f"{name}.nii"
    path.write_bytes(hdr.binaryblock + b"\x00" * 4 + payload)
    img = nib.load(path)
    np.savez(HERE / f"{name}.npz", scaled=np.asanyarray(img.dataobj), raw=img.dataobj.get_unscaled())


def write_brats_header():
    """Header only: a 240x240x155 float32 volume, payload appended by the tests."""
    hdr = nib.Nifti1Header()
    hdr.set_data_shape((240, 240, 155))
    hdr.set_data_dtype(np.float32)
    hdr["vox_offset"] = 352
    (HERE / "brats_header.bin").write_bytes(hdr.binaryblock + b"\x00" * 4)


if __name__ == "__main__":
    rng = np.random.default_rng(20240)
    for case in CASES:
        write_case(*case, rng)
    write_brats_header()
