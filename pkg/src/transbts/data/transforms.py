"""Intensity normalization and the training-time augmentation pipeline.

All random operations take an explicit ``numpy.random.Generator``; the whole
pipeline is a pure function of ``(sample, seed)``.
"""

from __future__ import annotations

import zlib

import numpy as np

from .sample import VolumeSample

CROP = 128
FLIP_P = 0.5
SHIFT_RANGE = (-0.1, 0.1)
SCALE_RANGE = (0.9, 1.1)


def normalize_zscore(volume: np.ndarray) -> np.ndarray:
    """Z-score over nonzero voxels; background zeros stay exactly zero."""
    volume = np.asarray(volume, dtype=np.float32)
    mask = volume != 0
    if not mask.any():
        return volume.copy()
    values = volume[mask].astype(np.float64)
    std = values.std()
    out = np.zeros_like(volume)
    out[mask] = (values - values.mean()) / (std if std > 0 else 1.0)
    return out


def normalize_sample(sample: VolumeSample) -> VolumeSample:
    mods = np.stack([normalize_zscore(m) for m in sample.modalities])
    return sample.replace(modalities=mods)


def pad_to(sample: VolumeSample, size) -> VolumeSample:
    """Zero-pad symmetrically so that every spatial extent is at least ``size``."""
    size = (size,) * 3 if np.isscalar(size) else tuple(size)
    widths = []
    for n, s in zip(sample.extent, size):
        extra = max(0, s - n)
        widths.append((extra // 2, extra - extra // 2))
    if not any(a or b for a, b in widths):
        return sample
    mods = np.pad(sample.modalities, [(0, 0)] + widths)
    label = None if sample.label is None else np.pad(sample.label, widths)
    return sample.replace(modalities=mods, label=label)


def crop_starts(extent, size) -> list[tuple[int, int]]:
    """Inclusive ranges of admissible crop starts per axis."""
    return [(0, n - s) for n, s in zip(extent, size)]


def random_crop(sample: VolumeSample, rng: np.random.Generator, size=CROP) -> VolumeSample:
    size = (size,) * 3 if np.isscalar(size) else tuple(size)
    sample = pad_to(sample, size)
    starts = [int(rng.integers(lo, hi + 1)) for lo, hi in crop_starts(sample.extent, size)]
    window = tuple(slice(a, a + s) for a, s in zip(starts, size))
    mods = np.ascontiguousarray(sample.modalities[(slice(None),) + window])
    label = None if sample.label is None else np.ascontiguousarray(sample.label[window])
    return sample.replace(modalities=mods, label=label, meta={**sample.meta, "crop_start": starts})


def flip_axes(sample: VolumeSample, axes) -> VolumeSample:
    axes = tuple(axes)
    if not axes:
        return sample
    mods = np.ascontiguousarray(np.flip(sample.modalities, tuple(a + 1 for a in axes)))
    label = None if sample.label is None else np.ascontiguousarray(np.flip(sample.label, axes))
    return sample.replace(modalities=mods, label=label)


def random_flip(sample: VolumeSample, rng: np.random.Generator, p: float = FLIP_P) -> VolumeSample:
    """Mirror each spatial axis independently with probability ``p``."""
    axes = [a for a in range(3) if rng.random() < p]
    out = flip_axes(sample, axes)
    return out.replace(meta={**out.meta, "flipped": axes})


def random_intensity(sample: VolumeSample, rng: np.random.Generator) -> VolumeSample:
    """Per modality, map nonzero voxels ``x -> x * s + delta``."""
    mods = sample.modalities.copy()
    params = []
    for c in range(mods.shape[0]):
        s = rng.uniform(*SCALE_RANGE)
        delta = rng.uniform(*SHIFT_RANGE)
        params.append((s, delta))
        mods[c] = scale_shift_nonzero(mods[c], s, delta)
    return sample.replace(modalities=mods, meta={**sample.meta, "intensity": params})


def scale_shift_nonzero(volume: np.ndarray, s: float, delta: float) -> np.ndarray:
    mask = volume != 0
    out = volume.copy()
    out[mask] = volume[mask] * s + delta
    return out


def augment(sample: VolumeSample, seed, size=CROP) -> VolumeSample:
    """Crop, flip, intensity jitter; deterministic in ``(sample, seed)``."""
    rng = np.random.default_rng(seed)
    out = random_crop(sample, rng, size)
    out = random_flip(out, rng)
    return random_intensity(out, rng)


def sample_seed(global_seed: int, case_id: str, epoch: int) -> np.random.SeedSequence:
    """Per-sample augmentation seed keyed by ``(global_seed, case_id, epoch)``."""
    return np.random.SeedSequence([global_seed, zlib.crc32(case_id.encode()), epoch])
