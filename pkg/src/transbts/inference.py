"""Full-volume inference: overlapping sliding windows and mirror-flip TTA."""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from .errors import ShapeError
from .metrics import index_to_label
from .model import TransBTS, model_forward
from .tensor import Tensor, no_grad, softmax

ProbFn = Callable[[np.ndarray], np.ndarray]

FLIP_SETS = tuple(axes for r in range(4) for axes in itertools.combinations((0, 1, 2), r))


def window_starts(n: int, window: int, stride: int) -> list[int]:
    """Start offsets along one axis: multiples of ``stride``, last one clamped to the edge."""
    if n <= window:
        return [0]
    starts = list(range(0, n - window, stride))
    starts.append(n - window)
    return starts


def window_positions(shape, window, stride) -> list[tuple[int, int, int]]:
    window, stride = _triple(window), _triple(stride)
    per_axis = [window_starts(n, w, s) for n, w, s in zip(shape, window, stride)]
    return list(itertools.product(*per_axis))


def coverage(shape, window, stride) -> np.ndarray:
    """Number of windows covering each voxel."""
    window = _triple(window)
    count = np.zeros(shape, dtype=np.int32)
    for z, y, x in window_positions(shape, window, _triple(stride)):
        count[z : z + window[0], y : y + window[1], x : x + window[2]] += 1
    return count


def _triple(v) -> tuple[int, int, int]:
    if np.ndim(v) == 0:
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 extents, got {v}")
    return v


def model_probabilities(model: TransBTS) -> ProbFn:
    """Wrap ``model`` as a map from a ``(B, C, D, H, W)`` batch to softmax probabilities."""

    def run(batch: np.ndarray) -> np.ndarray:
        with no_grad():
            logits = model_forward(model, Tensor(batch.astype(model.dtype, copy=False)))
            return softmax(logits, axis=1).data

    model.eval()
    return run


def _as_prob_fn(model) -> ProbFn:
    return model_probabilities(model) if isinstance(model, TransBTS) else model


def sliding_window_probabilities(model, volume: np.ndarray, window=128, stride=64) -> np.ndarray:
    """Average per-window class probabilities over a ``(C, D, H, W)`` volume.

    Axes shorter than the window are zero-padded at the far end and the
    padding is cropped from the result.
    """
    prob_fn = _as_prob_fn(model)
    volume = np.asarray(volume)
    if volume.ndim != 4 or min(volume.shape) < 1:
        raise ShapeError(f"expected a (C, D, H, W) volume, got {volume.shape}")
    shape = volume.shape[1:]
    window, stride = _triple(window), _triple(stride)
    padded = tuple(max(n, w) for n, w in zip(shape, window))
    if padded != shape:
        volume = np.pad(volume, [(0, 0)] + [(0, p - n) for p, n in zip(padded, shape)])
    total = None
    count = np.zeros(padded, dtype=np.float32)
    for z, y, x in window_positions(padded, window, stride):
        sl = (slice(z, z + window[0]), slice(y, y + window[1]), slice(x, x + window[2]))
        probs = prob_fn(volume[(slice(None),) + sl][None])[0]
        if total is None:
            total = np.zeros((probs.shape[0],) + padded, dtype=np.float32)
        total[(slice(None),) + sl] += probs
        count[sl] += 1
    out = total / count
    return out[:, : shape[0], : shape[1], : shape[2]]


def sliding_window_infer(model, volume: np.ndarray, window=128, stride=64) -> np.ndarray:
    """Label volume over the {0, 1, 2, 4} alphabet."""
    probs = sliding_window_probabilities(model, volume, window, stride)
    return index_to_label(probs.argmax(axis=0))


def tta_probabilities(model, volume: np.ndarray, window=128, stride=64) -> np.ndarray:
    """Mean probabilities over the 8 mirror flips of the three spatial axes."""
    prob_fn = _as_prob_fn(model)
    total = None
    for axes in FLIP_SETS:
        spatial = tuple(a + 1 for a in axes)
        flipped = np.flip(volume, spatial) if axes else volume
        probs = sliding_window_probabilities(prob_fn, np.ascontiguousarray(flipped), window, stride)
        probs = np.flip(probs, spatial) if axes else probs
        total = probs.copy() if total is None else total + probs
    return total / len(FLIP_SETS)


def tta_infer(model, volume: np.ndarray, window=128, stride=64) -> np.ndarray:
    probs = tta_probabilities(model, volume, window, stride)
    return index_to_label(probs.argmax(axis=0))


def predict_labels(model, volume: np.ndarray, window=128, stride=64, tta: bool = False) -> np.ndarray:
    infer = tta_infer if tta else sliding_window_infer
    return infer(model, volume, window, stride).astype(np.uint8)
