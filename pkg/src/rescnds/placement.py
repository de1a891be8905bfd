"""Gradient-vanishing probe that decides where the auxiliary classifier goes.

The probe trains (or merely back-propagates through) a branchless network
for a few iterations, recording for every main-branch conv layer the mean
absolute value of its weight gradient. The branch goes after the shallowest
layer whose averaged statistic falls below a threshold (1e-7 by default).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError
from .graph import NetworkGraph, backward, forward, infer_shapes, init_params, require_branchless
from .supervision import softmax_xent_backward
from .tensor import mean_abs
from .trainer import sgd_step

THRESHOLD = 1e-7
PROBE_ITERS = (10, 50)


@dataclass
class GradientReport:
    layers: list
    series: dict = field(default_factory=dict)  # layer id -> [stat per iteration]

    def summary(self) -> dict:
        return {lay: float(np.mean(self.series[lay])) for lay in self.layers}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "layer_id", "mean_abs_grad"])
        for lay in self.layers:
            for i, v in enumerate(self.series[lay]):
                w.writerow([i, lay, repr(v)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "mean_abs_grad"])
        for lay, v in self.summary().items():
            w.writerow([lay, repr(v)])
        return buf.getvalue()


def run_probe(g: NetworkGraph, batches: Sequence, iters: int = 10, seed: int = 0,
              unit: str = "iter", sgd: bool = False, lr: float = 0.01, momentum: float = 0.9,
              init_std: float = 0.01) -> GradientReport:
    """Record per-conv-layer mean |dL/dW| over ``iters`` iterations or epochs.

    ``batches`` is a sequence of (images, labels). In ``iter`` units each
    iteration uses the next batch (cycling); in ``epoch`` units each
    iteration sweeps all batches and records the mean over them. Weights are
    freshly drawn from N(0, init_std^2) with zero biases and, unless ``sgd``
    is set, never updated.
    """
    require_branchless(g)
    if not PROBE_ITERS[0] <= iters <= PROBE_ITERS[1]:
        raise InputError(f"probe length must be within {PROBE_ITERS}, got {iters}")
    if unit not in ("iter", "epoch"):
        raise InputError(f"unknown probe unit {unit!r}")
    if not batches:
        raise InputError("probe needs at least one batch")
    g = g.copy()
    if g.shapes is None:
        infer_shapes(g)
    init_params(g, init_std, seed)
    convs = g.main_convs()
    report = GradientReport(convs, {c: [] for c in convs})
    velocity: dict = {}
    step = 0
    for it in range(iters):
        chunk = [batches[it % len(batches)]] if unit == "iter" else list(batches)
        acc = {c: [] for c in convs}
        for x, y in chunk:
            logits, state = forward(g, x, "train", [seed, step])
            head = g.main_head
            grads = backward(g, state, {head: softmax_xent_backward(logits[head], y)})
            for c in convs:
                acc[c].append(mean_abs(grads[c].weights))
            if sgd:
                g.params, velocity = sgd_step(g.params, grads, velocity, lr, momentum)
            step += 1
        for c in convs:
            report.series[c].append(float(np.mean(acc[c])))
    return report


def select_branch_point(report: GradientReport, threshold: float = THRESHOLD) -> Optional[str]:
    """Shallowest layer whose averaged statistic is strictly below ``threshold``."""
    if not report.layers:
        raise InputError("empty gradient report")
    summary = report.summary()
    for lay in report.layers:
        if summary[lay] < threshold:
            return lay
    return None
