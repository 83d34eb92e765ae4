from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError

MODALITIES = ("t1", "t1ce", "t2", "flair")
LABEL_ALPHABET = (0, 1, 2, 4)


@dataclass
class VolumeSample:
    """Four co-registered modalities ``(4, H, W, D)`` plus an optional label volume."""

    modalities: np.ndarray
    label: np.ndarray | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(self.modalities.shape[1:])

    def validate(self) -> None:
        if self.modalities.ndim != 4 or self.modalities.shape[0] != len(MODALITIES):
            raise DataError(f"{self.case_id}: modalities must be (4, H, W, D), got {self.modalities.shape}")
        if self.label is not None:
            if self.label.shape != self.modalities.shape[1:]:
                raise DataError(
                    f"{self.case_id}: label extent {self.label.shape} != modality extent {self.modalities.shape[1:]}"
                )
            bad = np.setdiff1d(np.unique(self.label), LABEL_ALPHABET)
            if bad.size:
                raise DataError(f"{self.case_id}: labels outside {LABEL_ALPHABET}: {bad.tolist()}")

    def replace(self, **changes) -> "VolumeSample":
        values = dict(
            modalities=self.modalities, label=self.label, spacing=self.spacing, case_id=self.case_id, meta=self.meta
        )
        values.update(changes)
        return VolumeSample(**values)
