"""Optimization: poly learning-rate decay, Adam with L2, the training loop and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import CheckpointShapeError, decode_checkpoint, encode_checkpoint, write_bytes_atomic
from .config import ModelConfig
from .data.sample import VolumeSample
from .data.transforms import augment, sample_seed
from .errors import ContractError, NumericalError
from .metrics import softmax_dice_loss
from .model import TransBTS, build_model
from .nn import Dropout
from .tensor import Tensor

logger = logging.getLogger(__name__)

LR0 = 4e-4
POLY_POWER = 0.9
WEIGHT_DECAY = 1e-5
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def poly_lr(step: int, max_steps: int, lr0: float = LR0, power: float = POLY_POWER) -> float:
    """``lr0 * (1 - step/max_steps)^power``; 0 at and beyond ``max_steps``."""
    if max_steps <= 0:
        raise ContractError("max_steps must be positive")
    if step < 0:
        raise ContractError("step must be non-negative")
    if step >= max_steps:
        return 0.0
    return lr0 * (1.0 - step / max_steps) ** power


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    max_steps: int = 0
    extra: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "seed": self.seed, "max_steps": self.max_steps, **self.extra}


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: TrainState,
    lr: float,
    weight_decay: float = WEIGHT_DECAY,
) -> None:
    """One in-place Adam update with bias correction and coupled L2 decay.

    Every gradient is checked before anything is modified, so a non-finite
    gradient aborts the whole step.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericalError(f"non-finite gradient in {name} ({bad} entries); step {state.step} aborted")
    t = state.extra.get("adam_t", 0) + 1
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if weight_decay:
            g = g + p.dtype.type(weight_decay) * p
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)
    state.extra["adam_t"] = t


# -- checkpoints ---------------------------------------------------------


def _checkpoint_arrays(model: TransBTS, state: TrainState | None):
    arrays = [("param", n, p.data) for n, p in model.named_parameters()]
    arrays += [("buffer", n, b) for n, b in model.named_buffers()]
    if state is not None:
        for n, _ in model.named_parameters():
            if n in state.m:
                arrays.append(("adam_m", n, state.m[n]))
                arrays.append(("adam_v", n, state.v[n]))
    return arrays


def save_checkpoint(model: TransBTS, state: TrainState | None, path) -> None:
    metadata = state.metadata() if state is not None else {}
    blob = encode_checkpoint(model.config, _checkpoint_arrays(model, state), metadata)
    write_bytes_atomic(path, blob)


def load_checkpoint(path) -> tuple[TransBTS, TrainState | None]:
    manifest, arrays = decode_checkpoint(Path(path).read_bytes())
    config = ModelConfig.from_dict(manifest["config"])
    dtype = np.dtype(next((e["dtype"] for e in manifest["tensors"] if e["kind"] == "param"), "float32"))
    model = TransBTS(config, dtype=dtype)
    params = dict(model.named_parameters())
    expected = {("param", n): p.data for n, p in params.items()}
    expected.update({("buffer", n): b for n, b in model.named_buffers()})
    for key, target in expected.items():
        if key not in arrays:
            raise CheckpointShapeError(f"checkpoint lacks {key[0]} {key[1]}", key[1])
        src = arrays[key]
        if src.shape != target.shape:
            raise CheckpointShapeError(
                f"{key[1]}: checkpoint shape {tuple(src.shape)} != model shape {target.shape}", key[1]
            )
        target[...] = src
    meta = manifest.get("metadata") or {}
    state = None
    if meta:
        state = TrainState(
            step=meta.get("step", 0),
            epoch=meta.get("epoch", 0),
            seed=meta.get("seed", 0),
            max_steps=meta.get("max_steps", 0),
            extra={k: v for k, v in meta.items() if k not in ("step", "epoch", "seed", "max_steps")},
        )
        for (kind, name), arr in arrays.items():
            if kind in ("adam_m", "adam_v"):
                if name not in params or arr.shape != params[name].shape:
                    raise CheckpointShapeError(f"{kind} {name} does not match the model", name)
                (state.m if kind == "adam_m" else state.v)[name] = arr.copy()
    return model, state


# -- training loop -------------------------------------------------------


@dataclass
class TrainResult:
    model: TransBTS
    state: TrainState
    trace: list[dict]
    checkpoint: Path | None = None


def _reseed_dropout(model: TransBTS, seed: int, step: int) -> None:
    dropouts = [mod for _, mod in model.named_modules() if isinstance(mod, Dropout)]
    for i, mod in enumerate(dropouts):
        mod.rng = np.random.default_rng([seed, step, i])


def _batch(samples: Sequence[VolumeSample], seed: int, epoch: int, size, dtype) -> tuple[Tensor, np.ndarray]:
    augmented = [augment(s, sample_seed(seed, s.case_id, epoch), size) for s in samples]
    x = np.stack([a.modalities for a in augmented]).astype(dtype)
    y = np.stack([a.label for a in augmented])
    return Tensor(x), y


TRACE_FIELDS = ["step", "epoch", "lr", "loss"]


def write_trace(path, trace: list[dict], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if not new else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        if new:
            writer.writeheader()
        for row in trace:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in TRACE_FIELDS})


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"step": int(r["step"]), "epoch": int(r["epoch"]), "lr": float(r["lr"]), "loss": float(r["loss"])}
            for r in csv.DictReader(fh)
        ]


def train_loop(
    config: ModelConfig,
    dataset: Sequence[VolumeSample],
    epochs: int,
    batch_size: int = 1,
    seed: int = 0,
    lr0: float = LR0,
    weight_decay: float = WEIGHT_DECAY,
    out_dir=None,
    checkpoint_every: int = 0,
    stop_at: int | None = None,
    resume: tuple[TransBTS, TrainState] | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``config`` on ``dataset`` with the Dice loss, Adam and poly decay.

    The step horizon is ``epochs * ceil(len(dataset) / batch_size)``. Shuffling,
    augmentation and dropout masks derive from ``(seed, epoch, case_id, step)``
    so a resumed run replays an uninterrupted one exactly. ``stop_at`` ends
    the run early at that global step without changing the horizon.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    max_steps = epochs * steps_per_epoch
    if resume is not None:
        model, state = resume
        if state.max_steps and state.max_steps != max_steps:
            raise ContractError(f"resumed run has horizon {state.max_steps}, this run {max_steps}")
    else:
        model, state = build_model(config, seed), TrainState(seed=seed)
    state.max_steps = max_steps
    model.train()
    dtype = next(iter(model.parameters())).dtype
    named = dict(model.named_parameters())
    crop = config.input_extent
    out_dir = Path(out_dir) if out_dir is not None else None
    trace: list[dict] = []
    end = max_steps if stop_at is None else min(stop_at, max_steps)

    while state.step < end:
        step = state.step
        epoch = step // steps_per_epoch
        order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
        i = step % steps_per_epoch
        chosen = [dataset[j] for j in order[i * batch_size : (i + 1) * batch_size]]
        x, y = _batch(chosen, seed, epoch, crop, dtype)
        _reseed_dropout(model, seed, step)
        model.zero_grad()
        loss = softmax_dice_loss(model(x), y)
        value = float(loss.data)
        if not math.isfinite(value):
            ids = [s.case_id for s in chosen]
            raise NumericalError(f"non-finite loss at step {step} (epoch {epoch}, cases {ids})")
        loss.backward()
        lr = poly_lr(step, max_steps, lr0)
        adam_step({n: p.data for n, p in named.items()}, {n: p.grad for n, p in named.items()}, state, lr, weight_decay)
        state.step = step + 1
        state.epoch = state.step // steps_per_epoch
        row = {"step": step, "epoch": epoch, "lr": lr, "loss": value}
        trace.append(row)
        logger.info("step %d epoch %d lr %.3e loss %.5f", step, epoch, lr, value)
        if on_step is not None:
            on_step(row)
        if out_dir is not None and checkpoint_every and state.step % checkpoint_every == 0:
            save_checkpoint(model, state, out_dir / f"checkpoint-{state.step:06d}")

    final = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        final = out_dir / ("checkpoint-final" if state.step >= max_steps else f"checkpoint-{state.step:06d}")
        save_checkpoint(model, state, final)
    return TrainResult(model, state, trace, final)
