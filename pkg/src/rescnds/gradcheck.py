"""Central finite-difference checks for every layer kind and the full two-head loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .graph import ArchConfig, backward, build_cnds, forward, infer_shapes, init_params, \
    insert_residual_connections
from .supervision import cross_entropy, softmax_prob, softmax_xent_backward

EPS = 1e-5
TOL = 1e-4


@dataclass
class CheckRow:
    name: str
    rel_error: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.rel_error < TOL


def rel_error(a, b, floor: float = 1e-10) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def numeric_grad(f, x: np.ndarray, eps: float = EPS, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    idxs = [index] if index is not None else list(np.ndindex(x.shape))
    out = np.zeros(len(idxs))
    for j, i in enumerate(idxs):
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        out[j] = (fp - fm) / (2 * eps)
    return out if index is not None else out.reshape(x.shape)


def _separated(rng, shape):
    # distinct values spaced well beyond eps so maxpool argmaxes stay put
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(-1e-3, 1e-3, n)).reshape(shape) - n * 0.005


def check_conv(rng) -> CheckRow:
    x = rng.normal(size=(2, 3, 7, 7))
    p = L.LayerParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4))
    stride, pad = 2, 1
    r = rng.normal(size=L.conv2d_forward(x, p, stride, pad).shape)

    def f():
        return float(np.sum(L.conv2d_forward(x, p, stride, pad) * r))

    c = L.Cache()
    L.conv2d_forward(x, p, stride, pad, c)
    gx, gw, gb = L.conv2d_backward(r, p, c, stride, pad)
    err = max(rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, p.weights)),
              rel_error(gb, numeric_grad(f, p.bias)))
    return CheckRow("conv2d", err, x.size + p.weights.size + p.bias.size)


def _check_unary(name, fwd, bwd, x, rng) -> CheckRow:
    r = rng.normal(size=fwd(x, None).shape)
    c = L.Cache()
    fwd(x, c)
    gx = bwd(r, c)
    num = numeric_grad(lambda: float(np.sum(fwd(x, None) * r)), x)
    return CheckRow(name, rel_error(gx, num), x.size)


def check_maxpool(rng) -> CheckRow:
    return _check_unary("maxpool", lambda x, c: L.maxpool_forward(x, 3, 2, c),
                        L.maxpool_backward, _separated(rng, (2, 2, 7, 7)), rng)


def check_avgpool(rng) -> CheckRow:
    return _check_unary("avgpool", lambda x, c: L.avgpool_forward(x, 5, 2, c),
                        L.avgpool_backward, rng.normal(size=(2, 2, 13, 13)), rng)


def check_relu(rng) -> CheckRow:
    x = rng.uniform(0.1, 1.0, size=(3, 17)) * rng.choice([-1.0, 1.0], size=(3, 17))
    return _check_unary("relu", L.relu_forward, L.relu_backward, x, rng)


def check_dropout(rng) -> CheckRow:
    return _check_unary("dropout", lambda x, c: L.dropout_forward(x, 0.5, "train", 11, c),
                        L.dropout_backward, rng.normal(size=(4, 25)), rng)


def check_fc(rng) -> CheckRow:
    x = rng.normal(size=(3, 2, 2, 2))
    p = L.LayerParams(rng.normal(size=(5, 8)), rng.normal(size=5))
    r = rng.normal(size=(3, 5))

    def f():
        return float(np.sum(L.fc_forward(x, p) * r))

    c = L.Cache()
    L.fc_forward(x, p, c)
    gx, gw, gb = L.fc_backward(r, p, c)
    err = max(rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, p.weights)),
              rel_error(gb, numeric_grad(f, p.bias)))
    return CheckRow("fc", err, x.size + p.weights.size + p.bias.size)


def check_add(rng) -> CheckRow:
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    r = rng.normal(size=a.shape)
    c = L.Cache()
    L.add_forward(a, b, c)
    ga, gb = L.add_backward(r, c)

    def f():
        return float(np.sum(L.add_forward(a, b) * r))

    return CheckRow("add", max(rel_error(ga, numeric_grad(f, a)), rel_error(gb, numeric_grad(f, b))),
                    a.size + b.size)


def check_softmax_xent(rng) -> CheckRow:
    z = rng.normal(size=(2, 4))
    y = np.array([1, 3])
    g = softmax_xent_backward(z, y)
    num = numeric_grad(lambda: cross_entropy(softmax_prob(z), y), z)
    return CheckRow("softmax_xent", rel_error(g, num), z.size)


def check_graph(seed: int = 0, alpha: float = 0.3, init_std: float = 0.1, g=None) -> list:
    """Combined loss L_main + alpha * L_aux w.r.t. the largest-gradient weight of each layer.

    Dropout masks are pinned by reusing one seed for every forward pass.
    """
    if g is None:
        g = insert_residual_connections(build_cnds(
            ArchConfig(input_shape=(3, 32, 32), num_classes=3, width_factor=1 / 8)))
    infer_shapes(g)
    init_params(g, init_std, seed)
    rng = np.random.default_rng([seed, 99])
    x = rng.normal(size=(2, *g.input_shape))
    y = rng.integers(0, g.num_classes, size=2)

    def loss():
        logits, _ = forward(g, x, "train", [seed])
        total = cross_entropy(softmax_prob(logits[g.main_head]), y)
        for h in g.aux_heads:
            total += alpha * cross_entropy(softmax_prob(logits[h]), y)
        return total

    logits, state = forward(g, x, "train", [seed])
    head_grads = {g.main_head: softmax_xent_backward(logits[g.main_head], y)}
    for h in g.aux_heads:
        head_grads[h] = alpha * softmax_xent_backward(logits[h], y)
    grads = backward(g, state, head_grads)
    rows = []
    for node in g.param_nodes():
        p, gp = g.params[node.id], grads[node.id]
        errs = []
        for part in ("weights", "bias"):
            ga = getattr(gp, part)
            i = np.unravel_index(np.argmax(np.abs(ga)), ga.shape)
            num = numeric_grad(loss, getattr(p, part), index=i)
            errs.append(rel_error(ga[i], num))
        rows.append(CheckRow(f"graph:{node.id}", max(errs), 2))
    return rows


def run_all(seed: int = 0, init_std: float = 0.1) -> list:
    rng = np.random.default_rng(seed)
    rows = [check(rng) for check in (check_conv, check_maxpool, check_avgpool, check_relu,
                                     check_dropout, check_fc, check_add, check_softmax_xent)]
    return rows + check_graph(seed, init_std=init_std)


def format_table(rows: list) -> str:
    lines = [f"{'check':<22} {'max rel err':>12} {'n':>6}  result"]
    for r in rows:
        lines.append(f"{r.name:<22} {r.rel_error:>12.3e} {r.checked:>6}  {'PASS' if r.ok else 'FAIL'}")
    return "\n".join(lines)
