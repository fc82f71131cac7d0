"""Command-line entry point: synth | analyze | rf | train | predict | eval.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
All diagnostics go to standard error.  ``--threads N`` caps BLAS workers
(numbers are bit-reproducible across runs with ``--threads 1``); it must take
effect before numpy loads, so the heavy imports happen inside ``main``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _apply_thread_cap(argv: list[str]) -> None:
    threads = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is None:
        return
    if "numpy" in sys.modules:
        return  # too late to cap BLAS pools; fresh processes honor the flag
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(threads)


def content_hash(path) -> str:
    """Git-style blob hash of a file's bytes."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def _write_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddcmseg",
        description="Dense dilated convolutions merging segmentation engine",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (1 = bit-deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic tile dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tiles", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("analyze", help="static parameter/MAC report for the model")
    p.add_argument("--config", default=None)
    p.add_argument("--input", default="3x256x256", help="CxHxW analysis shape")
    p.add_argument("--csv", default=None, help="also write the report as CSV")

    p = sub.add_parser("rf", help="closed-form receptive field of a DDCM module")
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--rates", default="1,2,3,5,7,9")

    p = sub.add_parser("train", help="train on a tile dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None, help="dataset root (overrides [data] root)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="tiled TTA prediction for one image")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="class-map PNG path")
    p.add_argument("--no-tta", action="store_true")
    p.add_argument("--probs", default=None, help="optional raw probability tensor dump")
    p.add_argument("--palette", default=None, help="palette file for output colors")

    p = sub.add_parser("eval", help="confusion-matrix metrics for prediction maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--ignore", type=int, default=None)
    p.add_argument("--exclude", default="clutter",
                   help="class name excluded from means ('none' disables)")
    p.add_argument("--palette", default=None)
    p.add_argument("--csv", default=None)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap(argv)
    args = build_parser().parse_args(argv)

    from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError

    try:
        return _dispatch(args)
    except (ConfigError, ShapeError) as exc:
        print(f"ddcmseg: config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"ddcmseg: data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"ddcmseg: numeric failure: {exc}", file=sys.stderr)
        return 4


def _dispatch(args) -> int:
    if args.command == "synth":
        return _cmd_synth(args)
    if args.command == "analyze":
        return _cmd_analyze(args)
    if args.command == "rf":
        return _cmd_rf(args)
    if args.command == "train":
        return _cmd_train(args)
    if args.command == "predict":
        return _cmd_predict(args)
    if args.command == "eval":
        return _cmd_eval(args)
    raise AssertionError(f"unhandled command {args.command}")


def _cmd_synth(args) -> int:
    from .data import generate_synthetic

    ds = generate_synthetic(args.out, tiles=args.tiles, size=args.size,
                            classes=args.classes, seed=args.seed)
    _write_manifest(Path(args.out) / "manifest.json", {
        "command": "synth",
        "tiles": args.tiles,
        "size": args.size,
        "classes": args.classes,
        "seed": args.seed,
    })
    print(f"wrote {len(ds)} tiles of {args.size}x{args.size} with "
          f"{ds.class_count} classes to {args.out}")
    return 0


def _parse_input_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"expected CxHxW, got {text!r}")
    c, h, w = (int(p) for p in parts)
    return c, h, w


def _cmd_analyze(args) -> int:
    from . import costs
    from .config import ExperimentConfig, build_model
    from .errors import ConfigError

    cfg = ExperimentConfig.load(args.config)
    try:
        c, h, w = _parse_input_shape(args.input)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if c != cfg.model.bands:
        raise ConfigError(f"--input has {c} channels but the model takes {cfg.model.bands}")
    graph = build_model(cfg)
    report = costs.count(graph, (h, w))
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def _cmd_rf(args) -> int:
    from .ddcm import receptive_field_of
    from .errors import ConfigError

    try:
        rates = [int(p) for p in args.rates.replace(" ", "").split(",") if p]
    except ValueError as exc:
        raise ConfigError(f"bad --rates value {args.rates!r}") from exc
    if not rates or any(r < 1 for r in rates) or args.kernel < 1:
        raise ConfigError("rates must be positive integers and kernel >= 1")
    print(receptive_field_of(args.kernel, rates))
    return 0


def _cmd_train(args) -> int:
    from .config import ExperimentConfig, build_model, schedule_from
    from .data import TileDataset
    from .errors import ConfigError
    from .optim import train

    cfg = ExperimentConfig.load(args.config)
    if cfg.train.patch_size % 16:
        raise ConfigError(f"patch_size must be divisible by 16 (model stride), "
                          f"got {cfg.train.patch_size}")
    root = args.data or cfg.data.root
    if not root:
        raise ConfigError("no dataset: pass --data or set [data] root in the config")
    dataset = TileDataset(root)
    if dataset.class_count != cfg.model.num_classes:
        raise ConfigError(
            f"dataset has {dataset.class_count} classes but the model is configured "
            f"for {cfg.model.num_classes}"
        )
    graph = build_model(cfg)
    out_dir = Path(args.out)
    result = train(
        graph, dataset, schedule_from(cfg),
        epochs=cfg.train.epochs,
        out_dir=out_dir,
        batch_size=cfg.train.batch_size,
        patch_size=cfg.train.patch_size,
        patches_per_epoch=cfg.train.patches_per_epoch,
        seed=cfg.train.seed,
        weight_decay=cfg.train.weight_decay,
        log_stream=sys.stdout,
    )
    manifest = {
        "command": "train",
        "config": cfg.to_manifest(),
        "data_root": str(root),
        "seed": cfg.train.seed,
        "epochs_run": result.epochs_run,
        "best_epoch": result.best_epoch,
        "checkpoints": {
            "last": content_hash(result.last_path),
            "best": content_hash(result.best_path),
        },
    }
    _write_manifest(out_dir / "manifest.json", manifest)
    print(f"finished {result.epochs_run} epochs; best epoch {result.best_epoch} "
          f"(loss {result.best_loss:.4f})")
    return 0


def _cmd_predict(args) -> int:
    import numpy as np
    from PIL import Image

    from .config import ExperimentConfig, build_model
    from .data import ISPRS_CLASS_NAMES, ISPRS_COLORS, pil_palette, read_palette
    from .errors import ConfigError, DataError
    from .inference import StitchPlan, predict_image
    from .models import load_checkpoint, predictor
    from .serialize import save_tensors

    cfg = ExperimentConfig.load(args.config)
    if cfg.infer.window % 16:
        raise ConfigError(f"inference window must be divisible by 16 (model stride), "
                          f"got {cfg.infer.window}")
    graph = build_model(cfg)
    load_checkpoint(graph, args.ckpt)

    image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.uint8)
    arr = image.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    h, w = arr.shape[1:]
    if cfg.infer.window > h or cfg.infer.window > w:
        raise DataError(f"inference window {cfg.infer.window} larger than image {h}x{w}")

    plan = StitchPlan(window=cfg.infer.window, stride=cfg.infer.stride,
                      tta=cfg.infer.tta and not args.no_tta)
    class_map, probs, _ = predict_image(predictor(graph), arr, plan, cfg.model.num_classes)

    if args.palette:
        names, colors = read_palette(args.palette)
    else:
        names = list(ISPRS_CLASS_NAMES[:cfg.model.num_classes])
        colors = list(ISPRS_COLORS[:cfg.model.num_classes])
    out_img = Image.fromarray(class_map.astype(np.uint8), "P")
    out_img.putpalette(pil_palette(colors))
    out_path = Path(args.out)
    if out_path.parent != Path("."):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    out_img.save(out_path)
    if args.probs:
        save_tensors(args.probs, [("probabilities", probs)])

    _write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.json"), {
        "command": "predict",
        "config": cfg.to_manifest(),
        "checkpoint": content_hash(args.ckpt),
        "image": content_hash(args.image),
        "tta": plan.tta,
        "window": plan.window,
        "stride": plan.stride,
        "classes": names,
    })
    print(f"wrote class map to {out_path}")
    return 0


def _cmd_eval(args) -> int:
    import numpy as np
    from PIL import Image

    from .data import read_palette
    from .errors import DataError
    from .metrics import ConfusionMatrix

    pred_dir = Path(args.pred)
    ref_dir = Path(args.ref)
    ref_files = sorted(ref_dir.glob("*.png"))
    if not ref_files:
        raise DataError(f"{ref_dir}: no reference PNG maps found")

    palette_path = args.palette
    if palette_path is None:
        for candidate in (ref_dir / "palette.txt", ref_dir.parent / "palette.txt"):
            if candidate.is_file():
                palette_path = candidate
                break
    if palette_path is None:
        raise DataError("no palette.txt found near the reference maps; pass --palette")
    names, _ = read_palette(palette_path)

    excluded = () if args.exclude == "none" else (args.exclude,)
    cm = ConfusionMatrix(names, excluded_from_mean=excluded)
    for ref_path in ref_files:
        pred_path = pred_dir / ref_path.name
        if not pred_path.is_file():
            raise DataError(f"missing prediction for {ref_path.name}")
        ref = np.asarray(Image.open(ref_path), dtype=np.int64)
        pred = np.asarray(Image.open(pred_path), dtype=np.int64)
        if ref.shape != pred.shape:
            raise DataError(
                f"{ref_path.name}: prediction shape {pred.shape} differs from "
                f"reference {ref.shape}"
            )
        try:
            cm.accumulate(ref, pred, ignore_value=args.ignore)
        except ValueError as exc:
            raise DataError(f"{ref_path.name}: {exc}") from exc

    print(cm.report_text())
    if args.csv:
        Path(args.csv).write_text(cm.report_csv())
    return 0


if __name__ == "__main__":
    sys.exit(main())
