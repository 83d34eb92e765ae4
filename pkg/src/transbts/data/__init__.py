"""Volume ingestion, augmentation and synthetic phantoms."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DataError
from .nifti import Nifti1Header, parse_nifti1, read_nifti1
from .phantom import PhantomSpec, generate_phantom
from .rawvol import read_rawvol, write_rawvol
from .sample import LABEL_ALPHABET, MODALITIES, VolumeSample
from .transforms import augment, normalize_sample, normalize_zscore, random_crop, random_flip, random_intensity

__all__ = [
    "LABEL_ALPHABET",
    "MODALITIES",
    "Nifti1Header",
    "PhantomSpec",
    "VolumeSample",
    "augment",
    "generate_phantom",
    "list_cases",
    "load_case",
    "load_dataset",
    "normalize_sample",
    "normalize_zscore",
    "parse_nifti1",
    "random_crop",
    "random_flip",
    "random_intensity",
    "read_label",
    "save_case",
]


def save_case(root, sample: VolumeSample) -> Path:
    """Write ``<root>/<case_id>/{t1,t1ce,t2,flair,label}.rawvol``."""
    case_dir = Path(root) / sample.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    for name, vol in zip(MODALITIES, sample.modalities):
        write_rawvol(case_dir / f"{name}.rawvol", np.asarray(vol, dtype=np.float32), sample.spacing)
    if sample.label is not None:
        write_rawvol(case_dir / "label.rawvol", np.asarray(sample.label, dtype=np.uint8), sample.spacing)
    return case_dir


def _read_volume(case_dir: Path, name: str):
    raw = case_dir / f"{name}.rawvol"
    if raw.exists():
        array, manifest = read_rawvol(raw)
        return array, tuple(manifest.get("spacing", (1.0, 1.0, 1.0)))
    nii = case_dir / f"{name}.nii"
    if nii.exists():
        header, array = read_nifti1(nii)
        return array, header.spacing[:3]
    return None, None


def is_case_dir(path) -> bool:
    path = Path(path)
    return all((path / f"{m}.rawvol").exists() or (path / f"{m}.nii").exists() for m in MODALITIES)


def load_case(case_dir, with_label: bool = True) -> VolumeSample:
    case_dir = Path(case_dir)
    vols, spacing = [], (1.0, 1.0, 1.0)
    for name in MODALITIES:
        array, sp = _read_volume(case_dir, name)
        if array is None:
            raise DataError(f"{case_dir}: missing modality {name}")
        vols.append(np.asarray(array, dtype=np.float32))
        spacing = sp
    label = None
    if with_label:
        label, _ = _read_volume(case_dir, "label")
        if label is not None:
            label = np.asarray(label).astype(np.uint8)
    try:
        mods = np.stack(vols)
    except ValueError:
        raise DataError(f"{case_dir}: modality extents disagree") from None
    return VolumeSample(mods, label, tuple(float(s) for s in spacing), case_dir.name)


def read_label(case_dir) -> tuple[np.ndarray, tuple]:
    array, spacing = _read_volume(Path(case_dir), "label")
    if array is None:
        raise DataError(f"{case_dir}: no label volume")
    return np.asarray(array).astype(np.uint8), spacing


def list_cases(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if p.is_dir())


def load_dataset(root, normalize: bool = True) -> list[VolumeSample]:
    cases = [load_case(p) for p in list_cases(root) if is_case_dir(p)]
    if not cases:
        raise DataError(f"no cases found under {root}")
    return [normalize_sample(c) for c in cases] if normalize else cases
