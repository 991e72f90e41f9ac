"""Command-line entry point wiring the pipeline into reproducible runs.

Commands: train, eval, predict, count, ablate, losscurve, synth. Settings
resolve as defaults < config file < command-line flags; the fully resolved
configuration is echoed into the run directory so any run can be repeated.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .losses import LOSS_KINDS, LossConfig, emit_loss_curves
from .model import FSM_MODES, FUSION_MODES, NetworkConfig, build, count_flops, count_params
from .trainer import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    predict_probabilities,
    train,
)


class CliError(RuntimeError):
    pass


def _parse_ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v != "")


def _parse_floats(text):
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v != "")


def _parse_bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise CliError(f"expected a boolean, got {text!r}")


# every run-configuration key, with its parser; all of them are also flags
_CONFIG_KEYS = {
    "channels": _parse_ints,
    "blocks": _parse_ints,
    "iterations": int,
    "reduction": int,
    "fusion_mode": str,
    "fsm_mode": str,
    "model_seed": int,
    "lr0": float,
    "batch_size": int,
    "epochs": int,
    "eval_every": int,
    "crop_size": int,
    "loss": str,
    "alpha": float,
    "k_percent": float,
    "seed": int,
    "keep_snapshots": _parse_bool,
    "data_dir": str,
}

_DEFAULTS = {
    "channels": (8, 16, 32, 64),
    "blocks": (3, 2, 2, 2),
    "iterations": 2,
    "reduction": 1,
    "fusion_mode": "diaam",
    "fsm_mode": "stack",
    "model_seed": 0,
    "lr0": 0.05,
    "batch_size": 8,
    "epochs": 1500,
    "eval_every": 25,
    "crop_size": 256,
    "loss": "dptk",
    "alpha": 3.1,
    "k_percent": 10.0,
    "seed": 0,
    "keep_snapshots": False,
    "data_dir": None,
}


def read_config_file(path):
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise CliError(f"cannot read config file {path}: {e}") from e
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value.strip())
        except (ValueError, CliError) as e:
            raise CliError(f"{path}:{lineno}: bad value for {key!r}: {e}") from e
    return values


def resolve_config(args):
    merged = dict(_DEFAULTS)
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = _CONFIG_KEYS[key](flag) if isinstance(flag, str) else flag
    return merged


def _network_config(merged):
    return NetworkConfig(
        channels=merged["channels"],
        blocks=merged["blocks"],
        iterations=merged["iterations"],
        reduction=merged["reduction"],
        fusion_mode=merged["fusion_mode"],
        fsm_mode=merged["fsm_mode"],
        seed=merged["model_seed"],
    ).validate()


def _train_config(merged):
    return TrainConfig(
        lr0=merged["lr0"],
        batch_size=merged["batch_size"],
        epochs=merged["epochs"],
        eval_every=merged["eval_every"],
        crop_size=merged["crop_size"],
        loss=LossConfig(merged["loss"], merged["alpha"], merged["k_percent"]),
        seed=merged["seed"],
        keep_snapshots=merged["keep_snapshots"],
    ).validate()


def write_config_echo(path, merged):
    with open(path, "w", encoding="utf-8") as f:
        for key in _CONFIG_KEYS:
            value = merged[key]
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            f.write(f"{key} = {value}\n")


def _add_config_flags(p, include_train=True):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--channels", help="comma list, e.g. 8,16,32,64")
    p.add_argument("--blocks", help="comma list, e.g. 3,2,2,2")
    p.add_argument("--iterations", type=int)
    p.add_argument("--reduction", type=int)
    p.add_argument("--fusion-mode", dest="fusion_mode", choices=FUSION_MODES)
    p.add_argument("--fsm-mode", dest="fsm_mode", choices=FSM_MODES)
    p.add_argument("--model-seed", dest="model_seed", type=int)
    if include_train:
        p.add_argument("--lr0", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--eval-every", dest="eval_every", type=int)
        p.add_argument("--crop-size", dest="crop_size", type=int)
        p.add_argument("--loss", choices=LOSS_KINDS)
        p.add_argument("--alpha", type=float)
        p.add_argument("--k-percent", dest="k_percent", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--keep-snapshots", dest="keep_snapshots", action="store_const", const=True)
        p.add_argument("--data", dest="data_dir", help="dataset directory")


def _out_dir(args):
    out = args.out or time.strftime("run-%Y%m%d-%H%M%S")
    os.makedirs(out, exist_ok=True)
    return out


def _load_splits(data_dir):
    if not data_dir:
        raise CliError("no dataset directory given (use --data or data_dir in the config)")
    train_set = data_mod.load_dataset(data_dir, "train")
    test_set = data_mod.load_dataset(data_dir, "test")
    return train_set, test_set


def cmd_train(args):
    merged = resolve_config(args)
    net_cfg = _network_config(merged)
    tcfg = _train_config(merged)
    train_set, test_set = _load_splits(merged["data_dir"])
    out = _out_dir(args)
    write_config_echo(os.path.join(out, "config.txt"), merged)
    state = build(net_cfg)
    result = train(state, train_set, test_set, tcfg, out, resume=args.resume)
    print(
        f"trained {tcfg.epochs} epochs: best iou {result.best_iou:.4f} "
        f"(final iou {result.final_iou:.4f}, pd {result.final_pd:.4f}, "
        f"fa {result.final_fa:.3g})"
    )
    print(f"log: {result.log_path}")
    print(f"best checkpoint: {result.best_path}")
    return 0


def cmd_eval(args):
    state, _opt, _meta = load_checkpoint(args.checkpoint)
    samples = data_mod.load_dataset(args.data, args.split)
    out = _out_dir(args)
    match_cfg = metrics_mod.MatchConfig(binarize_threshold=args.threshold)
    iou, pd, fa = evaluate(state, samples, match_cfg)
    metrics_path = os.path.join(out, "metrics.csv")
    metrics_mod.write_metrics_csv(metrics_path, iou, pd, fa)
    print(f"iou {iou:.4f}  pd {pd:.4f}  fa {fa:.3g}")
    print(f"metrics: {metrics_path}")
    thresholds = _parse_floats(args.thresholds) if args.thresholds else ()
    if thresholds:
        probs = [predict_probabilities(state, s.image) for s in samples]
        rows = metrics_mod.roc_sweep(
            probs, [s.mask for s in samples], thresholds, match_cfg
        )
        roc_path = os.path.join(out, "roc.csv")
        metrics_mod.write_roc_csv(roc_path, rows)
        print(f"roc: {roc_path}")
    return 0


def cmd_predict(args):
    state, _opt, _meta = load_checkpoint(args.checkpoint)
    samples = data_mod.load_dataset(args.data, args.split)
    out = _out_dir(args)
    for s in samples:
        prob = predict_probabilities(state, s.image)
        mask = (prob > args.threshold).astype(np.uint8) * 255
        data_mod.write_pgm(os.path.join(out, f"{s.id}.pgm"), mask)
    print(f"wrote {len(samples)} prediction masks to {out}")
    return 0


def cmd_count(args):
    merged = resolve_config(args)
    net_cfg = _network_config(merged)
    state = build(net_cfg)
    params = count_params(state)
    flops = count_flops(state, (1, 1, args.image_size, args.image_size))
    print(f"params,{params}")
    print(f"flops,{flops}")
    return 0


_ABLATION_SUITES = {
    "iterations": [(f"n{n}", {"iterations": n}) for n in range(4)],
    "channels": [
        ("c4-8-16-32_l4", {"channels": (4, 8, 16, 32), "blocks": (3, 2, 2, 2)}),
        ("c16-32-64-128_l4", {"channels": (16, 32, 64, 128), "blocks": (3, 2, 2, 2)}),
        ("c8-16-32-64_l4", {"channels": (8, 16, 32, 64), "blocks": (3, 2, 2, 2)}),
        ("c8-16-32_l3", {"channels": (8, 16, 32), "blocks": (3, 3, 3)}),
        ("c8-16-32-64-128_l5", {"channels": (8, 16, 32, 64, 128), "blocks": (1, 2, 2, 2, 2)}),
        ("c4-8-16-32-64_l5", {"channels": (4, 8, 16, 32, 64), "blocks": (1, 2, 2, 2, 2)}),
        ("c16-32-64-128-256_l5", {"channels": (16, 32, 64, 128, 256), "blocks": (1, 2, 2, 2, 2)}),
    ],
    "fsm": [
        ("stack", {"fsm_mode": "stack"}),
        ("last_only", {"fsm_mode": "last_only"}),
        ("deep_supervision", {"fsm_mode": "deep_supervision"}),
    ],
    "diaam": [
        ("diaam", {"fusion_mode": "diaam"}),
        ("concat", {"fusion_mode": "concat"}),
        ("sum", {"fusion_mode": "sum"}),
        ("no_ca", {"fusion_mode": "diaam_no_ca"}),
    ],
    "loss_grid": [
        (f"a{alpha}_k{k}", {"alpha": alpha, "k_percent": float(k)})
        for alpha in (2.0, 2.5, 2.8, 2.9, 3.0, 3.1, 3.2, 3.5, 4.0)
        for k in (5, 10, 15)
    ],
}


def cmd_ablate(args):
    if args.suite not in _ABLATION_SUITES:
        raise CliError(
            f"unknown suite {args.suite!r}; pick one of {sorted(_ABLATION_SUITES)}"
        )
    merged = resolve_config(args)
    if merged["data_dir"] is None:
        raise CliError("ablate needs --data")
    train_set, test_set = _load_splits(merged["data_dir"])
    if args.crop_size is None:
        merged["crop_size"] = min(train_set[0].image.shape)
    out = _out_dir(args)
    rows = []
    for name, overrides in _ABLATION_SUITES[args.suite]:
        variant = dict(merged)
        variant.update(overrides)
        net_cfg = _network_config(variant)
        tcfg = _train_config(variant)
        state = build(net_cfg)
        run_dir = os.path.join(out, name)
        result = train(state, train_set, test_set, tcfg, run_dir)
        best_state, _, _ = load_checkpoint(result.best_path)
        iou, pd, fa = evaluate(best_state, test_set)
        row = (
            name,
            count_params(state),
            count_flops(state, (1, 1, args.image_size, args.image_size)),
            iou,
            pd,
            fa,
        )
        rows.append(row)
        print(",".join(str(v) for v in row))
    table = os.path.join(out, f"{args.suite}.csv")
    with open(table, "w", encoding="utf-8") as f:
        f.write("variant,params,flops,iou,pd,fa\n")
        for name, params, flops, iou, pd, fa in rows:
            f.write(f"{name},{params},{flops},{iou:.10g},{pd:.10g},{fa:.10g}\n")
    print(f"suite table: {table}")
    return 0


def cmd_losscurve(args):
    lo, hi, n = _parse_floats(args.grid)
    grid = np.linspace(lo, hi, int(n))
    emit_loss_curves(args.alpha, args.k_percent, grid, args.out)
    print(f"loss curves: {args.out}")
    return 0


def cmd_synth(args):
    cfg = data_mod.SynthConfig(
        count=args.count,
        image_size=args.image_size,
        targets_min=args.targets_min,
        targets_max=args.targets_max,
        sigma_min=args.sigma_min,
        sigma_max=args.sigma_max,
        peak_min=args.peak_min,
        peak_max=args.peak_max,
        clutter_smoothness=args.clutter_smoothness,
        clutter_amp=args.clutter_amp,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    train_ids, test_ids = data_mod.synth_generate(cfg, args.out)
    print(f"wrote {len(train_ids)} train / {len(test_ids)} test images to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="irstd",
        description="Recurrent reusable-convolution network for infrared "
        "small target detection",
        epilog="Settings resolve as defaults < --config file < flags.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _add_config_flags(p)
    p.add_argument("--out", help="run directory (default: timestamped)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally with a ROC sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--thresholds", help="descending comma list for the ROC sweep")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="write binarized prediction masks as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("count", help="report parameter and MAC counts for a config")
    _add_config_flags(p, include_train=False)
    p.add_argument("--image-size", dest="image_size", type=int, default=256)
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("ablate", help="run a desk-scale ablation suite")
    p.add_argument("--suite", required=True, choices=sorted(_ABLATION_SUITES))
    _add_config_flags(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--image-size", dest="image_size", type=int, default=256,
                   help="resolution for the FLOPs column")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("losscurve", help="emit loss/gradient curves for one positive pixel")
    p.add_argument("--alpha", type=float, default=3.1)
    p.add_argument("--k-percent", dest="k_percent", type=float, default=10.0)
    p.add_argument("--grid", default="0.01,0.99,99", help="lo,hi,count of p values")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_losscurve)

    p = sub.add_parser("synth", help="generate a synthetic small-target dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--image-size", dest="image_size", type=int, default=128)
    p.add_argument("--targets-min", dest="targets_min", type=int, default=1)
    p.add_argument("--targets-max", dest="targets_max", type=int, default=3)
    p.add_argument("--sigma-min", dest="sigma_min", type=float, default=0.8)
    p.add_argument("--sigma-max", dest="sigma_max", type=float, default=2.0)
    p.add_argument("--peak-min", dest="peak_min", type=float, default=0.4)
    p.add_argument("--peak-max", dest="peak_max", type=float, default=1.0)
    p.add_argument("--clutter-smoothness", dest="clutter_smoothness", type=int, default=16)
    p.add_argument("--clutter-amp", dest="clutter_amp", type=float, default=0.3)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
