"""SGD training with step-halved learning rate and a fading auxiliary loss.

Checkpoint container (little endian)::

    b"RCNDSCK1" | u64 header length | JSON header | tensor blobs

The JSON header records the epoch, step, config hash, best epoch, the
training log so far, the data-RNG state, and ``entries``: a map from tensor
key (``param/<node>/weights``, ``velocity/<node>/bias``, ...) to
``[offset, length]`` inside the blob section.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as D
from .errors import ConfigError, NumericError, ParameterError, ScheduleError, ShapeError, StateError
from .graph import NetworkGraph, backward, forward, infer_shapes, init_params
from .layers import LayerParams
from .supervision import (SupervisionSchedule, alpha_at, cross_entropy, softmax_prob,
                          softmax_xent_backward)
from .tensor import from_bytes, to_bytes

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RCNDSCK1"
LOG_COLUMNS = ["epoch", "lr", "alpha", "train_loss_main", "train_loss_aux",
               "val_top1", "val_top5", "seconds"]


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    val_batch_size: int = 128
    lr: float = 0.01
    lr_period: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0
    alpha0: float = 0.3
    alpha_decay: str = "closed"
    crop: int = 227
    init_std: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.lr_period < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs, lr_period and batch_size must be >= 1")
        if self.alpha0 < 0:
            raise ConfigError("alpha0 must be >= 0")

    def schedule(self) -> SupervisionSchedule:
        return SupervisionSchedule(self.alpha0, self.epochs, self.alpha_decay)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DESK_TRAIN = dict(batch_size=64, crop=D.DESK_SCALE["crop"])


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0 or epoch >= cfg.epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * 0.5 ** (epoch // cfg.lr_period)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0):
    """v <- momentum*v - lr*(g + wd*w); w <- w + v. Returns new (params, velocity)."""
    new_p, new_v = {}, {}
    for key, p in params.items():
        g = grads[key]
        v = velocity.get(key) or LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias))
        pieces = []
        for w, gw, vw in ((p.weights, g.weights, v.weights), (p.bias, g.bias, v.bias)):
            if w.shape != gw.shape or w.shape != vw.shape:
                raise ShapeError(f"{key}: parameter {w.shape}, gradient {gw.shape}, velocity {vw.shape}")
            step = gw + weight_decay * w if weight_decay else gw
            nv = momentum * vw - lr * step
            pieces.append((w + nv, nv))
        new_p[key] = LayerParams(pieces[0][0], pieces[1][0])
        new_v[key] = LayerParams(pieces[0][1], pieces[1][1])
    return new_p, new_v


# -- evaluation -------------------------------------------------------------

def topk_hits(probs: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Whether each label is among the k largest probabilities; ties go to lower indices."""
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def predict_probs(g: NetworkGraph, images: np.ndarray, mode: str = "center", crop: Optional[int] = None,
                  batch_size: int = 128) -> np.ndarray:
    """Main-head class probabilities; ten_crop averages the softmax over 10 views."""
    crop = crop or g.input_shape[1]
    out = []
    for s in range(0, len(images), batch_size):
        chunk = images[s:s + batch_size]
        if mode == "center":
            views = [np.stack([D.center_crop(x, crop) for x in chunk])]
        elif mode == "ten_crop":
            per_image = [D.ten_crop(x, crop) for x in chunk]
            views = [np.stack([v[i] for v in per_image]) for i in range(10)]
        else:
            raise ParameterError(f"unknown eval mode {mode!r}")
        acc = 0.0
        for v in views:
            logits, _ = forward(g, v, "test")
            acc = acc + softmax_prob(logits[g.main_head])
        out.append(acc / len(views))
    return np.concatenate(out)


def evaluate(g: NetworkGraph, images: np.ndarray, labels: np.ndarray, mode: str = "center",
             crop: Optional[int] = None, batch_size: int = 128, num_classes: Optional[int] = None):
    """(top1, top5) accuracy as fractions, main head only."""
    labels = np.asarray(labels)
    if num_classes is not None and num_classes != g.num_classes:
        raise ConfigError(f"dataset has {num_classes} classes, network emits {g.num_classes}")
    if labels.size and labels.max() >= g.num_classes:
        raise ConfigError(f"label {labels.max()} exceeds network class count {g.num_classes}")
    probs = predict_probs(g, images, mode, crop, batch_size)
    return float(topk_hits(probs, labels, 1).mean()), float(topk_hits(probs, labels, 5).mean())


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, params: dict, velocity: dict, meta: dict) -> None:
    blobs, entries, offset = [], {}, 0
    for prefix, group in (("param", params), ("velocity", velocity)):
        for node in sorted(group):
            for part in ("weights", "bias"):
                b = to_bytes(getattr(group[node], part))
                entries[f"{prefix}/{node}/{part}"] = [offset, len(b)]
                blobs.append(b)
                offset += len(b)
    header = json.dumps(dict(meta, entries=entries), sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (params, velocity, meta)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise StateError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    meta = json.loads(raw[16:16 + n])
    base = 16 + n
    groups = {"param": {}, "velocity": {}}
    parts: dict = {}
    for key, (off, length) in meta.pop("entries").items():
        prefix, node, part = key.split("/")
        parts.setdefault((prefix, node), {})[part] = from_bytes(raw[base + off:base + off + length])
    for (prefix, node), d in parts.items():
        groups[prefix][node] = LayerParams(d["weights"], d["bias"])
    return groups["param"], groups["velocity"], meta


def load_weights(g: NetworkGraph, path) -> dict:
    params, _, meta = load_checkpoint(path)
    missing = [n.id for n in g.param_nodes() if n.id not in params]
    # aux branches may be absent from a checkpoint only if the graph has none
    if missing:
        raise ConfigError(f"checkpoint lacks parameters for {missing}")
    g.params = {k: params[k] for k in (n.id for n in g.param_nodes())}
    return meta


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    log: list
    best_epoch: int
    best_top1: float
    params: dict = field(repr=False, default_factory=dict)


def write_log(rows: list, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(r[c]) for c in LOG_COLUMNS[1:]])


def train_step(g: NetworkGraph, xb: np.ndarray, yb: np.ndarray, alpha: float, seed):
    """One forward/backward pass; returns (main loss, aux loss or nan, grads)."""
    logits, state = forward(g, xb, "train", seed)
    main = g.main_head
    loss_main = cross_entropy(softmax_prob(logits[main]), yb)
    head_grads = {main: softmax_xent_backward(logits[main], yb)}
    loss_aux = math.nan
    for h in g.aux_heads:
        loss_aux = cross_entropy(softmax_prob(logits[h]), yb)
        head_grads[h] = alpha * softmax_xent_backward(logits[h], yb)
    return loss_main, loss_aux, backward(g, state, head_grads)


def train(g: NetworkGraph, train_data, val_data, cfg: TrainConfig, out_dir=None,
          resume=None, eval_mode: str = "center") -> TrainResult:
    """Run the full protocol; writes log.csv, last.ckpt and best.ckpt into ``out_dir``.

    ``train_data``/``val_data`` are (preprocessed stored images, labels).
    """
    cfg.validate()
    x, y = train_data
    if len(x) == 0:
        raise ConfigError("empty training set")
    if g.shapes is None:
        infer_shapes(g)
    if tuple(g.input_shape[1:]) != (cfg.crop, cfg.crop):
        raise ConfigError(f"network input {g.input_shape} does not match crop {cfg.crop}")
    sched = cfg.schedule()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    data_rng = np.random.default_rng([cfg.seed, 1])
    start, step, rows = 0, 0, []
    best_epoch, best_top1 = -1, -1.0
    if resume is not None:
        params, velocity, meta = load_checkpoint(resume)
        if meta["config_hash"] != cfg.digest():
            raise ConfigError("checkpoint was written under a different training config")
        g.params = params
        data_rng.bit_generator.state = meta["rng_state"]
        start, step, rows = meta["epoch"] + 1, meta["step"], meta["log"]
        best_epoch, best_top1 = meta["best_epoch"], meta["best_top1"]
    else:
        if not g.params:
            init_params(g, cfg.init_std, cfg.seed)
        velocity = {}

    n = len(x)
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        lr, alpha = lr_at(cfg, epoch), alpha_at(sched, epoch)
        order = data_rng.permutation(n)
        sum_main = sum_aux = 0.0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            xb = np.stack([D.augment_train(x[i], cfg.crop, data_rng) for i in idx])
            try:
                loss_main, loss_aux, grads = train_step(g, xb, y[idx], alpha, [cfg.seed, step])
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not (math.isfinite(loss_main) and (math.isnan(loss_aux) or math.isfinite(loss_aux))):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b} "
                                   f"(main={loss_main}, aux={loss_aux})")
            g.params, velocity = sgd_step(g.params, grads, velocity, lr, cfg.momentum,
                                          cfg.weight_decay)
            sum_main += loss_main * len(idx)
            sum_aux += loss_aux * len(idx)
            step += 1
        top1, top5 = evaluate(g, *val_data, mode=eval_mode, crop=cfg.crop,
                              batch_size=cfg.val_batch_size)
        row = dict(epoch=epoch, lr=lr, alpha=alpha, train_loss_main=sum_main / n,
                   train_loss_aux=sum_aux / n, val_top1=top1, val_top5=top5,
                   seconds=round(time.perf_counter() - t0, 3))
        rows.append(row)
        log.info("epoch %d lr %.6g alpha %.4g loss %.5f aux %.5f val top1 %.4f top5 %.4f",
                 epoch, lr, alpha, row["train_loss_main"], row["train_loss_aux"], top1, top5)
        improved = top1 > best_top1
        if improved:
            best_epoch, best_top1 = epoch, top1
        if out is not None:
            meta = dict(epoch=epoch, step=step, config_hash=cfg.digest(), best_epoch=best_epoch,
                        best_top1=best_top1, log=rows, rng_state=data_rng.bit_generator.state)
            save_checkpoint(out / "last.ckpt", g.params, velocity, meta)
            if improved:
                save_checkpoint(out / "best.ckpt", g.params, velocity, meta)
            write_log(rows, out / "log.csv")
    return TrainResult(rows, best_epoch, best_top1, g.params)
