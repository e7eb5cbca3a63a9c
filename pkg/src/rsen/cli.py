"""Command-line entry point: train / derain / eval / bench / gradcheck / synth.

Exit codes are a stable contract: 0 success, 1 verification failure,
2 usage or input error, 3 checkpoint error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgtext
from . import verify
from .data import StreakParams, load_image, load_pair_dir, save_image, synthesize_rain
from .errors import CheckpointError, ConfigError, DivergenceError
from .metrics import bench_forward, eval_dir
from .model import CONFIG_FIELD_TYPES, ModelConfig, forward, param_count
from .tensor import Tensor
from .training import LOG_HEADER, TrainConfig, train

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_CHECKPOINT = 3

PAPER_PARAM_COUNT = 4_851_373
PAPER_512_GPU_SECONDS = 0.040

_TRAIN_TYPES = {
    "batch_size": int,
    "patch_size": int,
    "epochs": int,
    "lr0": float,
    "lr_halve_every": int,
    "seed": int,
    "checkpoint_every": int,
}
_RAIN_TYPES = {
    "count": int,
    "angle": float,
    "length": float,
    "width": float,
    "intensity": float,
    "seed": int,
}
_DATA_TYPES = {"dir": str, "out_dir": str}


def _cap_threads() -> None:
    """Honor RSEN_THREADS (0 or unset = automatic)."""
    raw = os.environ.get("RSEN_THREADS", "")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RSEN_THREADS must be an integer, got {raw!r}") from None
    if n > 0:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=n)
        except ImportError:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ.setdefault(var, str(n))


def _load_run_config(path: Path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values = cfgtext.parse_flat(text)
    model_cfg = ModelConfig(**cfgtext.take_typed(values, "model", CONFIG_FIELD_TYPES))
    train_cfg = TrainConfig(**cfgtext.take_typed(values, "train", _TRAIN_TYPES))
    data = cfgtext.take_typed(values, "data", _DATA_TYPES)
    cfgtext.take_typed(values, "rain", _RAIN_TYPES)  # tolerated in shared config files
    if values:
        raise ConfigError(f"unknown configuration key {next(iter(values))!r}")
    if "dir" not in data:
        raise ConfigError("config is missing the required key 'data.dir'")
    return model_cfg, train_cfg, Path(data["dir"]), Path(data.get("out_dir", "rsen_run"))


def _resolved_config_text(model_cfg: ModelConfig, train_cfg: TrainConfig, data_dir, out_dir) -> str:
    values: dict[str, object] = {f"model.{k}": getattr(model_cfg, k) for k in CONFIG_FIELD_TYPES}
    values.update({f"train.{k}": getattr(train_cfg, k) for k in _TRAIN_TYPES})
    values["data.dir"] = data_dir
    values["data.out_dir"] = out_dir
    return cfgtext.render_flat(values)


def cmd_train(args) -> int:
    model_cfg, train_cfg, data_dir, out_dir = _load_run_config(args.config)
    if not data_dir.is_dir():
        print(f"error: dataset directory does not exist: {data_dir}", file=sys.stderr)
        return EXIT_USAGE
    pairs = load_pair_dir(data_dir)
    if not pairs:
        print(f"error: no image pairs under {data_dir}", file=sys.stderr)
        return EXIT_USAGE

    store = None
    start_epoch = 0
    if args.resume:
        store, loaded_cfg = ckpt.load_checkpoint(args.resume, expected=model_cfg)
        store = store.with_requires_grad(True)
        start_epoch = int(ckpt.read_meta(args.resume).get("train.completed_epochs", "0"))
        print(f"resuming from {args.resume} at epoch {start_epoch}")
        del loaded_cfg

    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(pairs, model_cfg, train_cfg, out_dir=out_dir, store=store, start_epoch=start_epoch)

    log_path = out_dir / "train_log.csv"
    header = "".join(
        f"# {line}\n" for line in _resolved_config_text(model_cfg, train_cfg, data_dir, out_dir).splitlines()
    )
    with open(log_path, "w") as fh:
        fh.write(header)
        fh.write(LOG_HEADER + "\n")
        for row in result.rows:
            fh.write(row.as_csv() + "\n")
    print(f"checkpoint: {out_dir / 'model.ckpt'}")
    print(f"log: {log_path}")
    if result.rows:
        print(f"final loss {result.final_loss:.6g}, monitor psnr {result.rows[-1].val_psnr:.2f} dB")
    return EXIT_OK


def cmd_derain(args) -> int:
    try:
        image = load_image(args.input)
    except (OSError, ValueError) as exc:
        print(f"error: unreadable input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    store, cfg = ckpt.load_checkpoint(args.weights)
    streaks, restored = forward(image, store, cfg)
    save_image(restored, args.output)
    if args.dump_streaks:
        peak = float(np.abs(streaks.data).max())
        normalized = Tensor(streaks.data / peak if peak > 0 else streaks.data)
        save_image(normalized, args.dump_streaks)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = eval_dir(args.pred, args.gt)
    csv_text = report.to_csv()
    if args.csv:
        Path(args.csv).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    print(report.summary())
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.size % 4 != 0 or args.size < 4:
        print(f"error: --size must be a positive multiple of 4, got {args.size}", file=sys.stderr)
        return EXIT_USAGE
    store, cfg = ckpt.load_checkpoint(args.weights)
    median = bench_forward(store, cfg, args.size, args.repeats)
    print(f"{args.size},{median:.6f},{args.repeats}")
    print(
        f"# reference: {PAPER_512_GPU_SECONDS:.3f} s per 512x512 image on a GTX 1080Ti GPU "
        "(context only, not comparable to CPU)"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.corrupt:
        with verify.corrupted_gradient(args.corrupt):
            results = verify.run_all(channel_scale=args.scale, seed=args.seed)
    else:
        results = verify.run_all(channel_scale=args.scale, seed=args.seed)
    failed = []
    for res in results:
        status = "ok" if res.ok else "FAIL"
        print(f"{res.name}: max_rel_err={res.max_rel_err:.3e} [{status}]")
        if not res.ok:
            failed.append(res.name)
    if failed:
        print(f"gradcheck FAILED for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"gradcheck passed: {len(results)} checks below {verify.THRESHOLD:g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    clean_dir = Path(args.clean_dir)
    if not clean_dir.is_dir():
        print(f"error: clean directory does not exist: {clean_dir}", file=sys.stderr)
        return EXIT_USAGE
    defaults = {}
    if args.config:
        values = cfgtext.parse_flat(Path(args.config).read_text())
        defaults = cfgtext.take_typed(values, "rain", _RAIN_TYPES)
    params = {
        "count": args.count, "angle": args.angle, "length": args.length,
        "width": args.width, "intensity": args.intensity, "seed": args.seed,
    }
    for key, value in params.items():
        if value is None:
            params[key] = defaults.get(key, getattr(StreakParams, key))
    base = StreakParams(**params)

    names = sorted((p.name for p in clean_dir.glob("*.png")), key=lambda s: s.encode())
    if not names:
        print(f"error: no PNG files in {clean_dir}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out_dir)
    for i, name in enumerate(names):
        clean = load_image(clean_dir / name)
        per_image = StreakParams(
            count=base.count, angle=base.angle, length=base.length,
            width=base.width, intensity=base.intensity, seed=base.seed + i,
        )
        pair = synthesize_rain(clean, per_image, pair_id=name)
        save_image(pair.rainy, out_dir / "rainy" / name)
        save_image(pair.clean, out_dir / "clean" / name)
    print(f"wrote {len(names)} pair(s) under {out_dir}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = ModelConfig(channel_scale=args.scale)
    count = param_count(cfg)
    print(f"parameters at channel_scale {args.scale:g}: {count:,}")
    print(f"published full-scale figure: {PAPER_PARAM_COUNT:,} (layer list is not fully specified; counts differ)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsen", description="Single-image rain streak removal")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a flat key = value config file")
    p.add_argument("config", type=Path, help="config file (model.*, train.*, data.* keys)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("derain", help="remove rain streaks from one PNG")
    p.add_argument("input", type=Path, help="rainy 8-bit RGB PNG")
    p.add_argument("--weights", "-w", type=Path, required=True, help="checkpoint file")
    p.add_argument("--output", "-o", type=Path, required=True, help="output PNG path")
    p.add_argument("--dump-streaks", type=Path, default=None, help="also write the normalized streak estimate")
    p.set_defaults(fn=cmd_derain)

    p = sub.add_parser("eval", help="PSNR/SSIM of a prediction directory against ground truth")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--csv", type=Path, default=None, help="write per-image rows here instead of stdout")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="median forward seconds at a given square size")
    p.add_argument("--weights", "-w", type=Path, required=True)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the toy model")
    p.add_argument("--scale", type=float, default=0.25, help="channel scale of the toy model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # negative-control hook
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", help="render rainy/clean training pairs from clean PNGs")
    p.add_argument("clean_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--config", type=Path, default=None, help="optional config supplying rain.* defaults")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--angle", type=float, default=None)
    p.add_argument("--length", type=float, default=None)
    p.add_argument("--width", type=float, default=None)
    p.add_argument("--intensity", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("params", help="print the learnable parameter count")
    p.add_argument("--scale", type=float, default=1.0)
    p.set_defaults(fn=cmd_params)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _cap_threads()
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
