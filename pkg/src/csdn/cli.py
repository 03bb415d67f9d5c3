"""Command-line surface.

Subcommands: gen-data (synthetic dataset tree), train (epoch loop with
checkpoints), eval (metrics report), infer (label map + contour overlay),
bench (forward throughput), gradcheck (finite-difference verification).
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure; every error
path prints one "error: ..." line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import replace

import numpy as np

from .autodiff import AutodiffError
from .gradcheck import PARAM_LIMIT, run_suite
from .losses import LossConfig
from .metrics import (boundary_pixels, evaluate, fps_benchmark, predict_label,
                      region_masks, write_report_csv)
from .model import CSDN, NetworkConfig, count_parameters
from .phantom import (DEFAULT_SPACING_MM, Dataset, generate_dataset, read_pgm,
                      write_pgm)
from .serial import FormatError, load_weights
from .train import TrainConfig
from .train import resume as resume_training
from .train import train as run_training


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- run configuration --------------------------------------------------------

# flat key=value files; "#" starts a comment, unknown keys are rejected
_PRESETS = {"reference": NetworkConfig, "tiny": NetworkConfig.tiny,
            "micro": NetworkConfig.micro, "desk": NetworkConfig.desk}

_NETWORK_KEYS = {
    "preset": ("choice", tuple(_PRESETS)),
    "in_frames": ("int",),
    "num_classes": ("int",),
    "downsample_r": ("int",),
    "shallow_channels": ("int3",),
    "stem_channels": ("int",),
    "ge_stage_channels": ("int3",),
    "ge_expansion": ("int",),
    "ge_layers": ("int3",),
    "fusion_channels": ("int",),
    "head_channels": ("int",),
    "aux_channels": ("int",),
    "aux_weight": ("float",),
}
_TRAIN_KEYS = {
    "epochs": ("int",),
    "batch_size": ("int",),
    "lr0": ("float",),
    "lr_step": ("int",),
    "lr_factor": ("float",),
    "weight_decay": ("float",),
    "decoupled_decay": ("bool",),
    "seed": ("int",),
    "checkpoint_every": ("int",),
    "val_every": ("int",),
    "augment": ("choice", ("full", "mild", "none")),
}
_LOSS_KEYS = {
    "focal_gamma": ("float",),
    "focal_alpha": ("alpha",),
    "dice_eps": ("float",),
}


def _convert(spec, val: str):
    kind = spec[0]
    if kind == "int":
        return int(val)
    if kind == "float":
        return float(val)
    if kind == "bool":
        low = val.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: '{val}'")
    if kind == "int3":
        parts = [int(p) for p in val.split(",")]
        if len(parts) != 3:
            raise ValueError("need three comma-separated integers")
        return tuple(parts)
    if kind == "alpha":
        if val.lower() == "none":
            return None
        return tuple(float(p) for p in val.split(","))
    if val not in spec[1]:
        raise ValueError(f"must be one of {', '.join(spec[1])}")
    return val


def _parse_kv(text: str, path: str) -> dict[str, tuple[str, int]]:
    vals: dict[str, tuple[str, int]] = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected key=value, "
                             f"got '{line}'")
        key, val = line.split("=", 1)
        key = key.strip()
        val = val.strip()
        if not key:
            raise UsageError(f"{path}:{i}: empty key")
        if key in vals:
            raise UsageError(f"{path}:{i}: duplicate key '{key}'")
        vals[key] = (val, i)
    return vals


def load_run_config(path: str | None
                    ) -> tuple[NetworkConfig, TrainConfig, LossConfig]:
    """Effective (network, train, loss) configs: module defaults overlaid
    with the key=value file when one is given."""
    raw: dict[str, tuple[str, int]] = {}
    if path is not None:
        if not os.path.exists(path):
            raise DataError(f"no config file at {path}")
        with open(path, "r", encoding="utf-8") as fh:
            raw = _parse_kv(fh.read(), path)

    cooked: dict[str, object] = {}
    for key, (val, line) in raw.items():
        spec = _NETWORK_KEYS.get(key) or _TRAIN_KEYS.get(key) \
            or _LOSS_KEYS.get(key)
        if spec is None:
            raise UsageError(f"{path}:{line}: unknown key '{key}'")
        try:
            cooked[key] = _convert(spec, val)
        except ValueError as e:
            raise UsageError(f"{path}:{line}: key '{key}': {e}") from None

    net_cfg = _PRESETS[cooked.pop("preset", "reference")]()
    try:
        net_cfg = replace(net_cfg, **{k: v for k, v in cooked.items()
                                      if k in _NETWORK_KEYS})
        train_cfg = replace(TrainConfig(), **{k: v for k, v in cooked.items()
                                              if k in _TRAIN_KEYS})
        loss_over = {k: v for k, v in cooked.items() if k in _LOSS_KEYS}
        if "aux_weight" in cooked:
            loss_over["aux_weight"] = cooked["aux_weight"]
        loss_cfg = replace(LossConfig(), **loss_over)
    except ValueError as e:
        raise UsageError(f"{path}: {e}") from None
    return net_cfg, train_cfg, loss_cfg


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def echo_config(net_cfg: NetworkConfig, train_cfg: TrainConfig,
                loss_cfg: LossConfig) -> list[str]:
    """Every effective key as a key=value line (shared keys once)."""
    lines: list[str] = []
    seen: set[str] = set()
    for cfg in (net_cfg, train_cfg, loss_cfg):
        for f in dataclasses.fields(cfg):
            if f.name in seen:
                continue
            seen.add(f.name)
            lines.append(f"{f.name}={_fmt(getattr(cfg, f.name))}")
    return lines


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.size % 64:
        raise UsageError(f"size must be a multiple of 64 (got {args.size})")
    if args.n_train < 1 or args.n_val < 0:
        raise UsageError("need n-train >= 1 and n-val >= 0")
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise DataError(f"output directory {args.out} is not empty "
                        "(rerun with --force to overwrite)")
    man = generate_dataset(args.out, args.n_train, args.n_val, args.size,
                           args.seed, args.spacing_mm)
    print(f"wrote {len(man.train_ids)} train + {len(man.val_ids)} val "
          f"samples at {man.size}x{man.size} to {args.out}")
    return 0


def cmd_train(args) -> int:
    net_cfg, train_cfg, loss_cfg = load_run_config(args.config)
    ds = Dataset.open(args.data)
    os.makedirs(args.out, exist_ok=True)
    echo = echo_config(net_cfg, train_cfg, loss_cfg)
    with open(os.path.join(args.out, "config.txt"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(echo) + "\n")
    if not args.quiet:
        for line in echo:
            print(line)
    if args.resume:
        if not os.path.exists(args.resume):
            raise DataError(f"no checkpoint at {args.resume}")
        resume_training(args.resume, ds, train_cfg, loss_cfg, args.out,
                        quiet=args.quiet)
    else:
        net = CSDN(net_cfg, seed=train_cfg.seed)
        run_training(net, ds, train_cfg, loss_cfg, args.out,
                     quiet=args.quiet)
    return 0


def cmd_eval(args) -> int:
    if not os.path.exists(args.weights):
        raise DataError(f"no weight file at {args.weights}")
    net = load_weights(args.weights)
    ds = Dataset.open(args.data)
    samples = ds.train if args.split == "train" else ds.val
    if not samples:
        raise DataError(f"split '{args.split}' has no samples")
    rep = evaluate(net, samples)
    print(rep.summary())
    if args.report:
        write_report_csv(args.report, rep)
        print(f"wrote {args.report}")
    return 0


def _write_ppm(path: str, rgb: np.ndarray):
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.astype(np.uint8).tobytes())


def cmd_infer(args) -> int:
    if not os.path.exists(args.weights):
        raise DataError(f"no weight file at {args.weights}")
    net = load_weights(args.weights)
    frames = []
    for k in (1, 2, 3):
        p = os.path.join(args.input, f"frame{k}.pgm")
        if not os.path.exists(p):
            raise DataError(f"missing frame file {p}")
        frames.append(read_pgm(p).astype(np.float32) / 255.0)
    pred = predict_label(net, np.stack(frames))

    os.makedirs(args.out, exist_ok=True)
    write_pgm(os.path.join(args.out, "label.pgm"), pred)

    base = np.clip(np.rint(frames[1] * 255.0), 0, 255).astype(np.uint8)
    rgb = np.stack([base] * 3, axis=-1)
    truth_path = os.path.join(args.input, "label.pgm")
    if os.path.exists(truth_path):
        truth = read_pgm(truth_path)
        if truth.shape != pred.shape:
            raise DataError(f"label shape {truth.shape} does not match "
                            f"frames {pred.shape}")
        lum, eem = region_masks(truth)
        rgb[boundary_pixels(eem)] = (255, 0, 0)    # truth outer wall: red
        rgb[boundary_pixels(lum)] = (0, 255, 0)    # truth lumen: green
    lum, eem = region_masks(pred)
    rgb[boundary_pixels(eem)] = (255, 165, 0)      # predicted outer: orange
    rgb[boundary_pixels(lum)] = (255, 215, 0)      # predicted lumen: gold
    _write_ppm(os.path.join(args.out, "overlay.ppm"), rgb)
    print(f"wrote {os.path.join(args.out, 'label.pgm')} and overlay.ppm")
    return 0


def cmd_bench(args) -> int:
    if args.iters < 10:
        raise UsageError(f"need at least 10 timed iterations "
                         f"(got {args.iters})")
    if args.size % 32:
        raise UsageError(f"size must be a multiple of 32 (got {args.size})")
    if args.weights:
        if not os.path.exists(args.weights):
            raise DataError(f"no weight file at {args.weights}")
        net = load_weights(args.weights)
    else:
        net = CSDN(NetworkConfig(), seed=0)
    res = fps_benchmark(net, (args.size, args.size), batch=args.batch,
                        warmup_iters=args.warmup, timed_iters=args.iters)
    n = count_parameters(net.config)
    print(f"params: {n} ({n / 1000:.0f}K)")
    print(f"input: {args.size}x{args.size} batch {args.batch}, "
          f"{args.iters} timed iterations")
    print(f"fps: {res['fps']:.2f}  p50: {res['p50_ms']:.1f} ms  "
          f"p95: {res['p95_ms']:.1f} ms")
    print("reference design point: 1706K params, 151 fps on a GTX 3090 "
          "(informational only; this process timed a CPU forward)")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        net_cfg, _tc, _lc = load_run_config(args.config)
    else:
        net_cfg = NetworkConfig.tiny()
    n = count_parameters(net_cfg)
    if n > PARAM_LIMIT:
        raise UsageError(f"gradient check needs a small network: config has "
                         f"{n} parameters (limit {PARAM_LIMIT})")
    ok, _results, _elapsed = run_suite(net_cfg, tol=args.tol)
    if not ok:
        print("error: gradient check failed", file=sys.stderr)
        return 3
    return 0


# -- argument plumbing --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="csdn", description="two-stream vessel segmentation "
                "on a numpy autodiff core")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset tree")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-val", type=int, default=50)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spacing-mm", type=float, default=DEFAULT_SPACING_MM)
    g.add_argument("--force", action="store_true",
                   help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value run config file")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics report on a split")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--report", help="per-sample CSV output path")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict one sample, write overlay")
    i.add_argument("--weights", required=True)
    i.add_argument("--input", required=True, help="sample directory")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="forward throughput")
    b.add_argument("--weights", help="weight file (default: fresh reference)")
    b.add_argument("--size", type=int, default=896)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--warmup", type=int, default=2)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("gradcheck", help="finite-difference verification")
    c.add_argument("--config", help="key=value run config file")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except AutodiffError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (DataError, FormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
