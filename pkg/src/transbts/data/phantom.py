"""Synthetic brain-like volumes with nested ellipsoidal tumor labels.

A phantom is a smooth positive "brain" ellipsoid on a zero background. A
tumor of three concentric, axis-aligned ellipsoids sits inside it: the outer
shell is edema (label 2), the middle shell necrotic/non-enhancing core
(label 1) and the innermost ellipsoid enhancing tumor (label 4). Each
modality scales every region by its own contrast factor, then Gaussian noise
is added inside the brain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from .sample import MODALITIES, VolumeSample

# contrast multipliers: (brain, edema, necrotic, enhancing) per modality
CONTRAST = {
    "t1": (1.0, 0.75, 0.55, 0.9),
    "t1ce": (1.0, 0.9, 0.45, 2.0),
    "t2": (1.0, 1.8, 1.4, 1.25),
    "flair": (1.0, 2.0, 1.2, 1.5),
}


@dataclass(frozen=True)
class PhantomSpec:
    extent: tuple[int, int, int] = (64, 64, 64)
    brain_fraction: tuple[float, float] = (0.38, 0.46)  # brain semi-axis / extent
    # class fractions near BraTS crops: WT ~5%, TC ~2%, ET ~0.6% of the volume.
    # Much smaller classes let the foreground-only Dice loss park background
    # mass in a class whose Dice is already ~0, where its gradient vanishes.
    tumor_fraction: tuple[float, float] = (0.2, 0.26)  # whole-tumor semi-axis / extent
    core_ratio: tuple[float, float] = (0.65, 0.8)  # tumor core / whole tumor
    enhancing_ratio: tuple[float, float] = (0.6, 0.75)  # enhancing / tumor core
    noise_std: float = 0.05
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def _ellipsoid(grid, center, radii) -> np.ndarray:
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
    return r2


def generate_phantom(rng: np.random.Generator, spec: PhantomSpec = PhantomSpec(), case_id: str = "phantom") -> VolumeSample:
    extent = np.asarray(spec.extent, dtype=np.float64)
    if spec.tumor_fraction[1] >= spec.brain_fraction[0]:
        raise DataError("tumor ellipsoid cannot fit inside the brain ellipsoid")
    if not (0 < spec.enhancing_ratio[1] < 1 and 0 < spec.core_ratio[1] < 1):
        raise DataError("nested ratios must lie in (0, 1)")
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.extent], indexing="ij")
    center = (extent - 1) / 2

    brain_r = extent * rng.uniform(*spec.brain_fraction, size=3)
    wt_r = extent * rng.uniform(*spec.tumor_fraction, size=3)
    tc_r = wt_r * rng.uniform(*spec.core_ratio, size=3)
    et_r = tc_r * rng.uniform(*spec.enhancing_ratio, size=3)
    # keep the whole tumor inside 90% of the brain
    room = 0.9 * brain_r - wt_r
    if np.any(room < 0):
        raise DataError("tumor ellipsoid cannot fit inside the brain ellipsoid")
    tumor_c = center + rng.uniform(-1, 1, size=3) * room / np.sqrt(3)

    brain_r2 = _ellipsoid(grid, center, brain_r)
    brain = brain_r2 <= 1
    label = np.zeros(spec.extent, dtype=np.uint8)
    label[_ellipsoid(grid, tumor_c, wt_r) <= 1] = 2
    label[_ellipsoid(grid, tumor_c, tc_r) <= 1] = 1
    label[_ellipsoid(grid, tumor_c, et_r) <= 1] = 4
    label[~brain] = 0

    present = set(np.unique(label).tolist())
    if present != {0, 1, 2, 4}:
        raise DataError(f"phantom too small to contain every label (got {sorted(present)})")

    region = np.select([label == 2, label == 1, label == 4], [1, 2, 3], default=0)
    base = np.where(brain, 1.0 - 0.3 * brain_r2, 0.0)
    mods = np.zeros((len(MODALITIES),) + tuple(spec.extent), dtype=np.float32)
    for c, name in enumerate(MODALITIES):
        contrast = np.asarray(CONTRAST[name])[region]
        noise = rng.standard_normal(spec.extent) * spec.noise_std
        vol = np.where(brain, base * contrast + noise, 0.0)
        # background is exactly zero, foreground strictly positive
        mods[c] = np.where(brain, np.maximum(vol, 1e-3), 0.0)
    return VolumeSample(
        mods,
        label,
        tuple(spec.spacing),
        case_id,
        meta={"tumor_center": tumor_c.tolist(), "radii": {"WT": wt_r.tolist(), "TC": tc_r.tolist(), "ET": et_r.tolist()}},
    )
