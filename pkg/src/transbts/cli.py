"""Command-line entry point: ``transbts {train,infer,eval,summarize,phantom}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .complexity import count_flops, count_params, stage_inventory
from .config import PRESETS, ModelConfig, format_config, parse_config_text, preset
from .data import is_case_dir, list_cases, load_case, load_dataset, read_label, save_case
from .data.phantom import PhantomSpec, generate_phantom
from .data.rawvol import write_rawvol
from .data.transforms import normalize_sample
from .errors import ConfigError, ContractError, DataError, NumericalError, ShapeError
from .inference import predict_labels, window_positions
from .metrics import RegionMapping, evaluate_case, write_reports
from .train import load_checkpoint, train_loop, write_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
MANIFEST = "run_manifest.json"

logger = logging.getLogger("transbts")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers -------------------------------------------------------------


def resolve_config(args) -> ModelConfig:
    base = preset(args.preset)
    config = parse_config_text(Path(args.config).read_text(), base) if args.config else base
    if args.override:
        config = parse_config_text("\n".join(args.override), config)
    config.validate()
    return config


def write_manifest(out_dir: Path, command: str, args, extra: dict | None = None, started: float | None = None) -> None:
    """Append this invocation to ``run_manifest.json`` in ``out_dir``."""
    path = out_dir / MANIFEST
    runs = json.loads(path.read_text())["runs"] if path.exists() else []
    entry = {
        "command": command,
        "out": str(out_dir),
        "config": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "started": started,
        "finished": time.time(),
    }
    entry.update(extra or {})
    runs.append(entry)
    path.write_text(json.dumps({"runs": runs}, indent=2, default=str) + "\n")


def _extent(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad extent {text!r}")
    return tuple(parts)


def _input_cases(path: Path) -> list[Path]:
    if is_case_dir(path):
        return [path]
    cases = [p for p in list_cases(path) if is_case_dir(p)]
    if not cases:
        raise DataError(f"no cases found under {path}")
    return cases


def _label_cases(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    return {
        p.name: p
        for p in sorted(root.iterdir())
        if p.is_dir() and ((p / "label.rawvol").exists() or (p / "label.nii").exists())
    }


# -- subcommands ---------------------------------------------------------


def cmd_train(args) -> int:
    started = time.time()
    out = Path(args.out)
    config = resolve_config(args)
    if not Path(args.data).exists():
        raise DataError(f"data path {args.data} does not exist")
    resume = None
    if args.resume:
        ckpt = Path(args.resume)
        if not ckpt.exists():
            raise UsageError(f"--resume checkpoint {ckpt} does not exist")
        model, state = load_checkpoint(ckpt)
        if state is None:
            raise UsageError(f"{ckpt} holds no training state")
        if model.config != config:
            raise UsageError(f"{ckpt} was trained with a different config")
        resume = (model, state)
    elif (out / MANIFEST).exists() or (out / "loss.csv").exists():
        raise UsageError(f"{out} already holds a run; pass --resume to continue it")
    dataset = load_dataset(args.data)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(config))

    def report(row):
        if args.verbose or row["step"] % max(1, args.log_every) == 0:
            print(f"step {row['step']} epoch {row['epoch']} lr {row['lr']:.4e} loss {row['loss']:.5f}", flush=True)

    result = train_loop(
        config,
        dataset,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        out_dir=out,
        checkpoint_every=args.checkpoint_every,
        stop_at=args.stop_at,
        resume=resume,
        on_step=report,
    )
    write_trace(out / "loss.csv", result.trace, append=resume is not None)
    write_manifest(out, "train", args, {"checkpoint": str(result.checkpoint), "steps": result.state.step}, started)
    print(f"wrote {result.checkpoint}")
    return EXIT_OK


def cmd_infer(args) -> int:
    started = time.time()
    out = Path(args.out)
    model, _ = load_checkpoint(args.checkpoint)
    window = args.window or model.config.input_extent
    stride = args.stride or tuple(w // 2 for w in np.broadcast_to(window, 3))
    written = []
    for case_dir in _input_cases(Path(args.input)):
        sample = normalize_sample(load_case(case_dir, with_label=False))
        n = len(window_positions(sample.modalities.shape[1:], window, stride))
        labels = predict_labels(model, sample.modalities, window, stride, tta=args.tta)
        dest = out / sample.case_id
        dest.mkdir(parents=True, exist_ok=True)
        write_rawvol(dest / "label.rawvol", labels, sample.spacing)
        written.append(sample.case_id)
        print(f"{sample.case_id}: {n} windows{' x 8 flips' if args.tta else ''} -> {dest / 'label.rawvol'}")
    write_manifest(out, "infer", args, {"cases": written}, started)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    mapping = RegionMapping.parse(args.mapping)
    pred, gt = _label_cases(Path(args.pred)), _label_cases(Path(args.gt))
    if not gt:
        raise DataError(f"no labelled cases under {args.gt}")
    missing = sorted(set(gt) - set(pred))
    if missing:
        raise DataError(f"cases missing from {args.pred}: {', '.join(missing)}")
    reports = []
    for case_id, gt_dir in gt.items():
        truth, spacing = read_label(gt_dir)
        guess, _ = read_label(pred[case_id])
        if guess.shape != truth.shape:
            raise DataError(f"{case_id}: prediction shape {guess.shape} != ground truth {truth.shape}")
        reports.append(evaluate_case(guess, truth, mapping, spacing, case_id))
    summary = write_reports(reports, args.out, mapping)
    write_manifest(Path(args.out), "eval", args, {"cases": list(gt)}, started)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _fmt_count(n: float) -> str:
    return f"{n / 1e9:.2f}G" if n >= 1e9 else f"{n / 1e6:.2f}M"


def summary_rows(config: ModelConfig) -> list[str]:
    lines = [f"{'stage':<18}{'params':>14}{'FLOPs':>12}  output"]
    for s in stage_inventory(config):
        lines.append(f"{s.name:<18}{s.params:>14,}{_fmt_count(2 * s.macs):>12}  {' x '.join(map(str, s.out_shape))}")
    params, flops = count_params(config), count_flops(config)
    lines.append(f"{'total':<18}{params:>14,}{_fmt_count(flops):>12}")
    lines.append(f"tokens N = {config.num_tokens}, embedding d = {config.d}")
    lines.append(f"params {_fmt_count(params)}  FLOPs {_fmt_count(flops)} (2 per MAC) / {_fmt_count(flops // 2)} MACs")
    full, light = PRESETS["full"], PRESETS["lightweight"]
    dp = 1 - count_params(light) / count_params(full)
    df = 1 - count_flops(light) / count_flops(full)
    lines.append(f"lightweight vs full reduction: params {100 * dp:.2f}%  FLOPs {100 * df:.2f}%")
    return lines


def cmd_summarize(args) -> int:
    config = resolve_config(args)
    print("\n".join(summary_rows(config)))
    return EXIT_OK


def cmd_phantom(args) -> int:
    started = time.time()
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec(extent=args.extent)
    ids = []
    for i in range(args.count):
        case_id = f"phantom-{i:03d}"
        save_case(out, generate_phantom(np.random.default_rng([args.seed, i]), spec, case_id))
        ids.append(case_id)
    write_manifest(out, "phantom", args, {"cases": ids}, started)
    print(f"wrote {args.count} cases to {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------


def _config_flags(p: argparse.ArgumentParser, default_preset: str) -> None:
    p.add_argument("--preset", default=default_preset, choices=sorted(PRESETS), help="base configuration")
    p.add_argument("--config", help="key=value config file applied over the preset")
    p.add_argument(
        "--override", action="append", metavar="KEY=VALUE", help="config override, applied last (repeatable)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="transbts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every step")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a case directory")
    _config_flags(p, "tiny")
    p.add_argument("--data", required=True, help="dataset root with one directory per case")
    p.add_argument("--out", required=True, help="output directory for checkpoints, loss.csv and the manifest")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0, help="save every N steps (0: final only)")
    p.add_argument("--stop-at", type=int, help="stop at this global step without changing the lr horizon")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint written by this run")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict label volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="a case directory or a root of case directories")
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true", help="average over the 8 mirror flips")
    p.add_argument("--window", type=_extent, help="window extent (default: the model's input extent)")
    p.add_argument("--stride", type=_extent, help="window stride (default: half the window)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Dice and HD95 of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mapping", help='region definition, e.g. "ET=4;TC=1,4;WT=1,2,4"')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summarize", help="parameter and FLOP table for a configuration")
    _config_flags(p, "full")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=_extent, default=(64, 64, 64), help="D,H,W or a single edge length")
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
