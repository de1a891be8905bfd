#!/usr/bin/env python3
"""Residual-CNDS vs plain CNDS on the synthetic corpus, over several seeds and init scales.

Prints one row per run and a per-configuration mean. Each run is 30 epochs
of the desk protocol (batch 64, lr 0.01 halved every 10 epochs, momentum
0.9, alpha0 0.3) on a width-1/8 network with a 32 px crop.
"""
import argparse
import math
import tempfile
import time
from pathlib import Path

import numpy as np

from rescnds import data as D
from rescnds import trainer as T
from rescnds.graph import ArchConfig, build_cnds, infer_shapes, insert_residual_connections


def arch(residual, width):
    g = build_cnds(ArchConfig(input_shape=(3, 32, 32), num_classes=3, width_factor=width))
    if residual:
        g = insert_residual_connections(g)
    infer_shapes(g)
    return g


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dataset", help="existing corpus; a fresh one is generated otherwise")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--width", type=float, default=1 / 8)
    p.add_argument("--init-std", type=float, nargs="+",
                   default=[0.01, 0.01 / math.sqrt(1 / 8)])
    a = p.parse_args()

    root = Path(a.dataset) if a.dataset else D.make_synthetic_dataset(tempfile.mkdtemp())
    train_m = D.load_manifest(root / "train.json")
    test_m = D.load_manifest(root / "test.json", mean=train_m.mean, write_back=False)
    train_data, test_data = D.load_split(train_m), D.load_split(test_m)

    print(f"{'net':<14} {'std':>7} {'seed':>4} {'loss0':>8} {'lossN':>8} {'top1':>6} {'secs':>6}")
    summary = {}
    for std in a.init_std:
        for residual in (True, False):
            name = "Residual-CNDS" if residual else "CNDS"
            for seed in a.seeds:
                g = arch(residual, a.width)
                cfg = T.TrainConfig(epochs=a.epochs, batch_size=64, crop=32, init_std=std, seed=seed)
                t0 = time.perf_counter()
                res = T.train(g, train_data, test_data, cfg)
                top1, _ = T.evaluate(g, *test_data, crop=32)
                summary.setdefault((name, std), []).append(top1)
                print(f"{name:<14} {std:>7.4f} {seed:>4} {res.log[0]['train_loss_main']:>8.5f} "
                      f"{res.log[-1]['train_loss_main']:>8.5f} {top1:>6.3f} "
                      f"{time.perf_counter() - t0:>6.1f}", flush=True)
    print()
    for (name, std), tops in summary.items():
        print(f"{name:<14} std {std:.4f}: mean top-1 {np.mean(tops):.3f}")


if __name__ == "__main__":
    main()
