"""Command-line entry point: ``cone {train,enhance,eval,gradcheck,bench}``.

Training settings come from built-in defaults, then an optional config file
(``--config`` or ``$CONE_CONFIG``; ``key = value`` lines, ``#`` comments),
then command-line flags. Every config key has a flag of the same name with
dashes instead of underscores.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import gradsuite, iem, metrics, optim
from .cem import DomainError, Variant
from .imageio import (
    CheckpointError,
    DatasetError,
    ImageFormatError,
    load_checkpoint,
    load_image,
    save_checkpoint,
    save_image,
    scan_dataset,
    to_tensor,
)
from .imageio.images import is_image_file
from .losses import LossConfig
from .ndgrad import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _optional_float(text: str):
    text = text.strip()
    return None if text.lower() in ("", "none") else float(text)


# key -> (parser, help). Defaults live in TrainConfig / LossConfig.
PATH_KEYS = {
    "data": (str, "dataset root containing train/low"),
    "out": (str, "checkpoint path to write"),
    "log": (str, "per-epoch CSV log (default: <out>.log.csv)"),
}
TRAIN_KEYS = {
    "variant": (str, "comparametric variant: bgc, pc, sc or none"),
    "mode": (str, "iem_only, fixed_theta or learned_theta"),
    "epochs": (int, "number of epochs"),
    "seed": (int, "seed for weight init and shuffling"),
    "stages": (int, "unrolled stages during training"),
    "lr_iem": (float, "learning rate of the networks"),
    "lr_cem": (float, "initial learning rate of (a, b)"),
    "cem_decay": (float, "multiplicative decay of lr_cem"),
    "cem_decay_every": (int, "epochs between lr_cem decays"),
    "weight_decay": (float, "coupled L2 weight decay on network weights"),
    "beta1": (float, "Adam beta1"),
    "beta2": (float, "Adam beta2"),
    "adam_eps": (float, "Adam epsilon"),
    "theta_a": (_optional_float, "initial a (default depends on variant)"),
    "theta_b": (_optional_float, "initial b (default depends on variant)"),
    "checkpoint_every": (int, "write an intermediate checkpoint every N epochs (0 = never)"),
}
LOSS_KEYS = {
    "omega_f": (float, "weight of the fidelity loss"),
    "omega_c": (float, "weight of the colour constancy loss"),
    "epsilon": (float, "target exposure level"),
    "exposure_pool": (int, "pooling size before the exposure loss"),
    "spatial_pool": (int, "pooling size before the spatial consistency loss"),
    "smooth_lambda": (float, "edge sharpness of the smoothness weights"),
    "weight_t": (float, "weight of the illumination loss in the total"),
    "weight_y": (float, "weight of the enhancement loss in the total"),
}
CONFIG_KEYS = {**PATH_KEYS, **TRAIN_KEYS, **LOSS_KEYS}


def read_config(path) -> dict:
    """Parse a ``key = value`` file against the known schema."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key][0](value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return values


def resolve_train_settings(args: argparse.Namespace) -> tuple[dict, optim.TrainConfig, LossConfig]:
    merged: dict = {}
    config_path = args.config or os.environ.get("CONE_CONFIG")
    if config_path:
        merged.update(read_config(config_path))
    merged.update({k: v for k, v in vars(args).items() if k in CONFIG_KEYS and v is not None})

    train_kw = {k: merged[k] for k in TRAIN_KEYS if k in merged}
    loss_kw = {k: merged[k] for k in LOSS_KEYS if k in merged}
    # an unset variant follows the mode
    if "variant" not in train_kw:
        train_kw["variant"] = "none" if train_kw.get("mode") == "iem_only" else "sc"
    try:
        cfg = optim.TrainConfig(**train_kw)
        loss_cfg = LossConfig(**loss_kw)
        cfg.validate()
        loss_cfg.validate()
        cfg.initial_crf()
    except (ValueError, DomainError) as exc:
        raise ConfigError(str(exc)) from None
    for key in ("data", "out"):
        if not merged.get(key):
            raise ConfigError(f"--{key} is required (flag or config key {key!r})")
    return merged, cfg, loss_cfg


def cmd_train(args) -> int:
    merged, cfg, loss_cfg = resolve_train_settings(args)
    try:
        dataset = scan_dataset(merged["data"], "train")
    except DatasetError as exc:
        raise DataError(str(exc)) from None
    if len(dataset) == 0:
        raise DataError(f"{merged['data']}/train/low contains no images")

    out = Path(merged["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(merged.get("log") or out.with_suffix(".log.csv"))
    with open(log_path, "w") as log:
        log.write(optim.log_header() + "\n")

        def on_epoch(entry):
            log.write(entry.csv_row() + "\n")
            log.flush()

        def on_checkpoint(ckpt):
            save_checkpoint(ckpt, out.with_name(f"{out.stem}.e{ckpt.epoch:04d}{out.suffix}"))

        try:
            ckpt, history = optim.train(dataset, cfg, loss_cfg, on_epoch, on_checkpoint)
        except (ImageFormatError, OSError) as exc:
            raise DataError(str(exc)) from None
    save_checkpoint(ckpt, out)
    a, b = ckpt.crf.theta
    print(f"trained {cfg.epochs} epochs on {len(dataset)} images; final loss "
          f"{history[-1].total:.6f}; theta=({a:.6g}, {b:.6g}); wrote {out}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_enhance(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    src = Path(args.input)
    if src.is_dir():
        inputs = sorted((p for p in src.iterdir() if p.is_file() and is_image_file(p)),
                        key=lambda p: os.fsencode(p.name))
    elif src.is_file():
        inputs = [src]
    else:
        raise DataError(f"input {src} does not exist")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        try:
            x = to_tensor(load_image(path))
        except (OSError, ImageFormatError) as exc:
            raise DataError(f"cannot read {path}: {exc}") from None
        if x.shape[0] != 3:
            raise DataError(f"{path}: expected an RGB image")
        t = iem.infer_illumination(x, ckpt.enh)
        y = optim.enhance(x, t, ckpt.crf, ckpt.mode)
        save_image(y, out / f"{path.stem}.png")
        if args.dump_t:
            save_image(t, out / f"{path.stem}_t.png")
    print(f"enhanced {len(inputs)} image(s) into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    root = Path(args.data)
    if not (root / "test" / "high").is_dir():
        raise DataError(f"{root}/test/high is missing; evaluation needs reference images")
    try:
        dataset = scan_dataset(root, "test")
        maps = Path(args.report).parent if args.error_maps else None
        report = metrics.eval_dataset(ckpt, dataset, error_map_dir=maps, max_err=args.max_err)
    except (DatasetError, ImageFormatError, OSError) as exc:
        raise DataError(str(exc)) from None
    csv_path, json_path = report.write(args.report)
    print(f"{len(report.rows)} images: PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    variants = gradsuite.CEM_VARIANTS if args.variant == "all" else (Variant.parse(args.variant),)
    if any(v is Variant.NONE for v in variants):
        raise ConfigError("gradcheck needs a comparametric variant (bgc, pc, sc or all)")
    worst = gradsuite.run(args.trials, args.seed, variants=variants)
    failed = False
    for name, err in worst.items():
        ok = err < args.tol
        failed |= not ok
        print(f"{name:18s} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 600x400, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def bench_report(width: int, height: int) -> dict:
    enh, _ = iem.init_weights(0)
    params = enh.num_params()
    macs = iem.inference_macs(height, width)
    return {"params": params, "params_k": params / 1000, "cem_params": 2,
            "macs": macs, "flops_2mac": 2 * macs}


def cmd_bench(args) -> int:
    w, h = args.size
    r = bench_report(w, h)
    print(f"inference parameters: {r['params']} ({r['params_k']:.1f} K) + {r['cem_params']} CEM scalars")
    print(f"conv MACs at {w}x{h}: {r['macs'] / 1e6:.2f} M")
    print(f"FLOPs at {w}x{h} (2 x MAC): {r['flops_2mac'] / 1e6:.2f} M")
    print("note: a 63.4 M FLOPs figure at 600x400 matches neither convention above; "
          "its counting rule is unknown, so it is not asserted")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cone", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on DIR/train/low")
    p.add_argument("--config", help="key = value config file (fallback: $CONE_CONFIG)")
    defaults = {**asdict(optim.TrainConfig()), **asdict(LossConfig())}
    for key, (kind, text) in CONFIG_KEYS.items():
        default = defaults.get(key)
        note = f" [default: {default}]" if default is not None else ""
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None,
                       help=text + note)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance an image or a directory of images")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--in", dest="input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-t", action="store_true", help="also write <stem>_t.png illumination maps")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR/SSIM on DIR/test/{low,high}")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--report", required=True, help="report path; writes .csv and .json")
    p.add_argument("--error-maps", action="store_true", help="write <stem>_err.png error maps")
    p.add_argument("--max-err", type=float, default=0.5, help="error mapped to white [default: 0.5]")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of CEM partials and losses")
    p.add_argument("--variant", default="all", help="bgc, pc, sc or all [default: all]")
    p.add_argument("--trials", type=int, default=100, help="random trials per check [default: 100]")
    p.add_argument("--seed", type=int, default=0, help="random seed [default: 0]")
    p.add_argument("--tol", type=float, default=1e-3, help="failure threshold [default: 1e-3]")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="parameter count and FLOP estimate of inference")
    p.add_argument("--size", type=_parse_size, default=(600, 400), help="WxH [default: 600x400]")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
