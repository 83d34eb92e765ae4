"""Softmax Dice loss and the BraTS-style evaluation protocol (Dice, HD95)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, ShapeError
from .tensor import Tensor, div, mul, shift, scale, slice_, softmax, sum_

LABELS = (0, 1, 2, 4)
REGIONS = ("ET", "WT", "TC")
DICE_EPS = 1e-5


@dataclass(frozen=True)
class RegionMapping:
    ET: frozenset = frozenset({4})
    TC: frozenset = frozenset({1, 4})
    WT: frozenset = frozenset({1, 2, 4})

    def __post_init__(self):
        for name in ("ET", "TC", "WT"):
            object.__setattr__(self, name, frozenset(int(v) for v in getattr(self, name)))

    def is_nested(self) -> bool:
        return self.ET <= self.TC <= self.WT

    def to_dict(self) -> dict:
        return {r: sorted(getattr(self, r)) for r in ("ET", "TC", "WT")}

    @classmethod
    def parse(cls, text: str | None) -> "RegionMapping":
        """Parse overrides such as ``"ET=1"`` or ``"ET=4;TC=1,4"`` onto the defaults."""
        values = {}
        for part in (text or "").replace(" ", "").split(";"):
            if not part:
                continue
            key, _, labels = part.partition("=")
            key = key.upper()
            if key not in ("ET", "TC", "WT") or not labels:
                raise ValueError(f"bad region mapping entry {part!r}")
            values[key] = frozenset(int(v) for v in labels.split(","))
        return cls(**values)


def label_to_index(labels: np.ndarray) -> np.ndarray:
    """Map raw labels {0, 1, 2, 4} to class indices {0, 1, 2, 3}."""
    labels = np.asarray(labels)
    bad = ~np.isin(labels, LABELS)
    if bad.any():
        raise DataError(f"label values outside {LABELS}: {sorted(np.unique(labels[bad]).tolist())}")
    out = labels.astype(np.int64)
    out[out == 4] = 3
    return out


def index_to_label(index: np.ndarray) -> np.ndarray:
    return np.asarray(LABELS, dtype=np.uint8)[index]


def one_hot(index: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``(B, ...)`` class indices -> ``(B, C, ...)`` one-hot."""
    out = np.zeros((index.shape[0], num_classes) + index.shape[1:], dtype=dtype)
    np.put_along_axis(out, index[:, None], 1, axis=1)
    return out


def softmax_dice_loss(logits: Tensor, labels: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """``1 - mean`` soft Dice over the foreground classes.

    ``labels`` holds raw labels ``(B, ...)`` in {0, 1, 2, 4}. Sums run over the
    batch and every voxel, so each class contributes one global Dice term.
    """
    index = label_to_index(labels)
    if logits.shape[:1] + logits.shape[2:] != index.shape:
        raise ShapeError(f"logits {logits.shape} and labels {index.shape} disagree")
    c = logits.shape[1]
    probs = softmax(logits, axis=1)
    target = Tensor(one_hot(index, c, dtype=logits.dtype))
    axes = (0,) + tuple(range(2, logits.ndim))
    inter = sum_(mul(probs, target), axes)
    psum = sum_(probs, axes)
    gsum = Tensor(target.data.sum(axis=axes))
    dice = div(shift(scale(inter, 2.0), eps), shift(psum + gsum, eps))
    fg = slice_(dice, slice(1, None))
    return shift(scale(sum_(fg), -1.0 / (c - 1)), 1.0)


def region_masks(labels: np.ndarray, mapping: RegionMapping = RegionMapping()) -> dict[str, np.ndarray]:
    labels = np.asarray(labels)
    return {r: np.isin(labels, sorted(getattr(mapping, r))) for r in REGIONS}


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (outside the volume counts)."""
    mask = np.asarray(mask, bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    core = tuple(slice(1, -1) for _ in range(mask.ndim))
    for axis in range(mask.ndim):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[core]
    return mask & ~interior


def _directed_p95(src: np.ndarray, tree: cKDTree) -> float:
    dist, _ = tree.query(src)
    dist = np.sort(dist)
    rank = math.ceil(0.95 * len(dist))
    return float(dist[rank - 1])


def hausdorff95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile Hausdorff distance between mask boundaries, in mm.

    Nearest-rank percentile of each directed boundary-to-boundary distance set;
    the larger direction is returned. Both empty gives 0; exactly one empty
    gives the volume diagonal (``sqrt(sum((n_i * s_i)^2))``).
    """
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    spacing = np.asarray(spacing, dtype=np.float64)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if not (has_p and has_g):
        return empty_sentinel(pred.shape, spacing)
    bp = np.argwhere(boundary(pred)) * spacing
    bg = np.argwhere(boundary(gt)) * spacing
    return max(_directed_p95(bp, cKDTree(bg)), _directed_p95(bg, cKDTree(bp)))


def empty_sentinel(shape, spacing) -> float:
    return float(np.sqrt(np.sum((np.asarray(shape) * np.asarray(spacing, dtype=np.float64)) ** 2)))


@dataclass
class CaseReport:
    case_id: str
    dice: dict[str, float] = field(default_factory=dict)
    hd95: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def row(self) -> dict:
        out = {"case_id": self.case_id}
        for r in REGIONS:
            out[f"dice_{r.lower()}"] = self.dice[r]
        for r in REGIONS:
            out[f"hd95_{r.lower()}"] = self.hd95[r]
        out["flags"] = ";".join(self.flags)
        return out


def evaluate_case(pred_labels, gt_labels, mapping: RegionMapping = RegionMapping(), spacing=(1.0, 1.0, 1.0), case_id: str = "") -> CaseReport:
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ShapeError(f"label volumes differ: {pred_labels.shape} vs {gt_labels.shape}")
    pm, gm = region_masks(pred_labels, mapping), region_masks(gt_labels, mapping)
    report = CaseReport(case_id)
    for r in REGIONS:
        report.dice[r] = dice_score(pm[r], gm[r])
        report.hd95[r] = hausdorff95(pm[r], gm[r], spacing)
        if not gm[r].any():
            report.flags.append(f"{r}:empty_gt")
        if not pm[r].any():
            report.flags.append(f"{r}:empty_pred")
    return report


def summarize(reports: list[CaseReport]) -> dict:
    """Arithmetic means over cases."""
    out = {"cases": len(reports)}
    for metric in ("dice", "hd95"):
        out[metric] = {
            r: float(np.mean([getattr(rep, metric)[r] for rep in reports])) if reports else float("nan")
            for r in REGIONS
        }
    return out


CSV_COLUMNS = ["case_id", "dice_et", "dice_wt", "dice_tc", "hd95_et", "hd95_wt", "hd95_tc", "flags"]


def write_reports(reports: list[CaseReport], out_dir, mapping: RegionMapping = RegionMapping()) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "cases.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.row())
    summary = summarize(reports)
    summary["mapping"] = mapping.to_dict()
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
