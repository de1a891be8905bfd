"""``rescnds`` command line: build / diagnose / train / eval / gradcheck.

Settings resolve as built-in defaults < ``--config`` JSON file < flags, and the
resolved set is written to ``<out>/config.<command>.json``. Exit codes: 0 success,
2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck as GC
from .errors import CNDSError, NumericError
from .graph import (ArchConfig, build_cnds, build_conv_stack, infer_shapes, insert_residual_connections,
                    load_arch, save_arch, shape_table)
from .placement import THRESHOLD, run_probe, select_branch_point
from .trainer import TrainConfig, evaluate, load_weights, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "seed": 0,
    "out": "out",
    # build
    "input_size": 227, "classes": 205, "width": 1.0, "residual": False,
    "aux_attach": "conv3_2", "aux_at_merge": True, "post_add_relu": False,
    "stack": 0, "stack_width": 8,
    # train
    "epochs": 50, "batch": 64, "lr": 0.01, "lr_period": 10, "momentum": 0.9,
    "weight_decay": 0.0, "alpha0": 0.3, "alpha_decay": "closed", "init_std": 0.01,
    "val_split": "auto", "resume": None,
    # diagnose
    "threshold": THRESHOLD, "iters": 10, "probe_unit": "iter", "probe_sgd": False,
    "probe_batch": 16,
    # eval
    "ten_crop": False, "split": "test", "checkpoint": None,
    "arch": None, "dataset": None,
}


class UsageError(CNDSError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file of settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--arch", help="architecture JSON file")
    common.add_argument("--dataset", help="dataset directory holding train.json / test.json")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rescnds", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", parents=[common], help="write a CNDS / Residual-CNDS architecture file")
    b.add_argument("--residual", action="store_true", default=None)
    b.add_argument("--width", type=float)
    b.add_argument("--input-size", type=int)
    b.add_argument("--classes", type=int)
    b.add_argument("--aux-attach", help="trunk node for the aux branch, or 'none'")
    b.add_argument("--aux-keep", dest="aux_at_merge", action="store_false", default=None,
                   help="with --residual, leave the aux branch at its CNDS attach point")
    b.add_argument("--post-add-relu", action="store_true", default=None)
    b.add_argument("--stack", type=int, help="build a plain N-conv toy stack instead")
    b.add_argument("--stack-width", type=int)

    d = sub.add_parser("diagnose", parents=[common], help="gradient-vanishing probe")
    d.add_argument("--threshold", type=float)
    d.add_argument("--iters", type=int)
    d.add_argument("--probe-unit", choices=["iter", "epoch"])
    d.add_argument("--probe-sgd", action="store_true", default=None)
    d.add_argument("--probe-batch", type=int)
    d.add_argument("--init-std", type=float)

    t = sub.add_parser("train", parents=[common], help="train with the deep-supervision objective")
    t.add_argument("--alpha0", type=float)
    t.add_argument("--alpha-decay", choices=["closed", "recursive"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-period", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--init-std", type=float)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common], help="top-1 / top-5 accuracy of a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--ten-crop", action="store_true", default=None)
    e.add_argument("--split")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--init-std", type=float)
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.command == "gradcheck":
        cfg["init_std"] = 0.1
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        loaded = json.loads(path.read_text())
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            cfg[k] = v
    return cfg


def _echo_config(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config.{command}.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _require(cfg: dict, *keys) -> None:
    for k in keys:
        if not cfg.get(k):
            raise UsageError(f"--{k} is required")
        if k in ("arch", "dataset", "checkpoint", "resume") and not Path(cfg[k]).exists():
            raise UsageError(f"{k} path {cfg[k]} does not exist")


def _load_graph(cfg: dict):
    _require(cfg, "arch")
    g = load_arch(cfg["arch"])
    infer_shapes(g)
    return g


def _splits(cfg: dict):
    _require(cfg, "dataset")
    root = Path(cfg["dataset"])
    train_m = D.load_manifest(root / "train.json")
    return root, train_m


def cmd_build(cfg: dict, out: Path) -> int:
    if not cfg["width"] > 0:
        raise UsageError(f"--width must be > 0, got {cfg['width']}")
    size = cfg["input_size"]
    if cfg["stack"]:
        g = build_conv_stack(cfg["stack"], cfg["stack_width"], (3, size, size), cfg["classes"])
    else:
        attach = None if str(cfg["aux_attach"]).lower() == "none" else cfg["aux_attach"]
        arch = ArchConfig(input_shape=(3, size, size), num_classes=cfg["classes"],
                          width_factor=cfg["width"], aux_attach=attach,
                          post_add_relu=cfg["post_add_relu"])
        g = build_cnds(arch)
        if cfg["residual"]:
            g = insert_residual_connections(g, aux_at_merge=cfg["aux_at_merge"])
    infer_shapes(g)
    save_arch(g, out / "arch.json")
    print(shape_table(g))
    print(f"wrote {out / 'arch.json'}")
    return EXIT_OK


def _probe_batches(cfg: dict, g):
    rng = np.random.default_rng([cfg["seed"], 7])
    n, c = cfg["probe_batch"], g.input_shape[1]
    if cfg.get("dataset"):
        _, m = _splits(cfg)
        x, y = D.load_split(m)
        if m.num_classes != g.num_classes:
            raise UsageError(f"dataset has {m.num_classes} classes, network {g.num_classes}")
        views = np.stack([D.center_crop(img, c) for img in x])
        return [(views[s:s + n], y[s:s + n]) for s in range(0, len(views), n)]
    if cfg["probe_unit"] == "epoch":
        raise UsageError("--probe-unit epoch needs --dataset")
    # stand-in for mean-subtracted 8-bit pixels
    return [(rng.normal(0.0, 64.0, size=(n, *g.input_shape)), rng.integers(0, g.num_classes, n))
            for _ in range(4)]


def cmd_diagnose(cfg: dict, out: Path) -> int:
    g = _load_graph(cfg)
    if g.has_aux():
        raise UsageError("diagnose needs a branchless architecture (build with --aux-attach none)")
    report = run_probe(g, _probe_batches(cfg, g), iters=cfg["iters"], seed=cfg["seed"],
                       unit=cfg["probe_unit"], sgd=cfg["probe_sgd"], lr=cfg["lr"],
                       momentum=cfg["momentum"], init_std=cfg["init_std"])
    (out / "gradient_report.csv").write_text(report.to_csv())
    (out / "gradient_summary.csv").write_text(report.summary_csv())
    for lay, v in report.summary().items():
        print(f"{lay:<10} {v:.4e}")
    choice = select_branch_point(report, cfg["threshold"])
    if choice is None:
        print(f"selected attach point: none below threshold {cfg['threshold']:g}")
    else:
        print(f"selected attach point: {choice} (threshold {cfg['threshold']:g})")
    return EXIT_OK


def _train_config(cfg: dict, g) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch"], lr=cfg["lr"],
                       lr_period=cfg["lr_period"], momentum=cfg["momentum"],
                       weight_decay=cfg["weight_decay"], alpha0=cfg["alpha0"],
                       alpha_decay=cfg["alpha_decay"], crop=g.input_shape[1],
                       init_std=cfg["init_std"], seed=cfg["seed"])


def _split_data(root: Path, name: str, train_m):
    m = D.load_manifest(root / f"{name}.json", mean=train_m.mean, write_back=False)
    m.mean = train_m.mean
    return m


def cmd_train(cfg: dict, out: Path) -> int:
    g = _load_graph(cfg)
    root, train_m = _splits(cfg)
    if train_m.num_classes != g.num_classes:
        raise UsageError(f"dataset has {train_m.num_classes} classes, network {g.num_classes}")
    val_name = cfg["val_split"]
    if val_name == "auto":
        val_name = "val" if (root / "val.json").is_file() else "test"
    val_m = _split_data(root, val_name, train_m)
    tc = _train_config(cfg, g)
    if tc.crop > min(train_m.height, train_m.width):
        raise UsageError(f"network input {tc.crop} exceeds stored image size {train_m.height}")
    result = train(g, D.load_split(train_m), D.load_split(val_m), tc, out_dir=out,
                   resume=cfg["resume"])
    write_losses(result.log, out / "losses.csv")
    print(f"best epoch {result.best_epoch}: {val_name} top-1 {result.best_top1:.4f}")
    return EXIT_OK


def write_losses(rows: list, path) -> None:
    """Main-branch trajectory only, without timing columns."""
    cols = ["epoch", "lr", "train_loss_main", "val_top1", "val_top5"]
    lines = [",".join(cols)]
    lines += [",".join([str(r["epoch"])] + [repr(r[c]) for c in cols[1:]]) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_eval(cfg: dict, out: Path) -> int:
    g = _load_graph(cfg)
    _require(cfg, "checkpoint")
    root, train_m = _splits(cfg)
    load_weights(g, cfg["checkpoint"])
    m = _split_data(root, cfg["split"], train_m)
    x, y = D.load_split(m)
    mode = "ten_crop" if cfg["ten_crop"] else "center"
    top1, top5 = evaluate(g, x, y, mode=mode, crop=g.input_shape[1], num_classes=m.num_classes)
    report = {"split": cfg["split"], "mode": mode, "n": int(len(y)), "top1": top1, "top5": top5}
    (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{cfg['split']} ({mode}, n={len(y)}): top-1 {top1:.4f}  top-5 {top5:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    rows = GC.run_all(seed=cfg["seed"], init_std=cfg["init_std"])
    if cfg.get("arch"):
        rows += GC.check_graph(cfg["seed"], init_std=cfg["init_std"], g=_load_graph(cfg))
    table = GC.format_table(rows)
    (out / "gradcheck.txt").write_text(table + "\n")
    print(table)
    failed = [r.name for r in rows if not r.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"build": cmd_build, "diagnose": cmd_diagnose, "train": cmd_train,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        _echo_config(cfg, out, args.command)
        return COMMANDS[args.command](cfg, out)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CNDSError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
