"""CNDS / Residual-CNDS network graphs: construction, rewrite, shape checks, execution.

A graph is an ordered list of :class:`LayerNode` in topological order. Node kinds:

``input``    source node, geometry ``{"shape": [C, H, W]}``
``conv``     ``{k, stride, pad, in_ch, out_ch, relu, projection}``
``maxpool``  ``{k, stride}``
``avgpool``  ``{k, stride}``
``fc``       ``{in, out, relu, dropout}`` (flattens its input)
``add``      element-wise merge of exactly two inputs, ``{relu}``

Activations and dropout are fused into the conv/fc nodes that own them, so
node ids line up one-to-one with the named layers of the architecture.
"""
from __future__ import annotations

import copy
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as L
from .errors import ConfigError, PreconditionError, RewriteError, ShapeError, StateError
from .layers import LayerParams

ARCH_FORMAT = "rescnds-arch/1"
MAIN = "main"
AUX = "aux1"
INIT_STD = 0.01


@dataclass
class LayerNode:
    id: str
    kind: str
    geometry: dict
    inputs: list
    branch: str = MAIN


@dataclass
class ArchConfig:
    input_shape: tuple = (3, 227, 227)
    num_classes: int = 205
    widths: tuple = (64, 128, 256, 512, 512)
    width_factor: float = 1.0
    fc_main: int = 4096
    fc_aux: int = 1024
    aux_conv: int = 128
    # None builds the branchless trunk used by the placement probe
    aux_attach: Optional[str] = "conv3_2"
    post_add_relu: bool = False
    pool_kernel: int = 2
    pool_stride: int = 2
    aux_pool_kernel: int = 5
    aux_pool_stride: int = 2
    dropout: float = 0.5

    def validate(self) -> None:
        if not self.width_factor > 0:
            raise ConfigError(f"width factor must be > 0, got {self.width_factor}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.widths) != 5:
            raise ConfigError("widths must list 5 stage channel counts")
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be [C, H, W]")

    def scaled(self, n: int) -> int:
        return max(1, int(round(n * self.width_factor)))


@dataclass
class NetworkGraph:
    nodes: list
    heads: list  # [(node id, branch tag)]
    input_shape: tuple
    num_classes: int
    residual: bool = False
    post_add_relu: bool = False
    params: dict = field(default_factory=dict)
    shapes: Optional[dict] = None

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def ids(self) -> list:
        return [n.id for n in self.nodes]

    def consumers(self, node_id: str) -> list:
        return [n for n in self.nodes if node_id in n.inputs]

    @property
    def main_head(self) -> str:
        return next(h for h, b in self.heads if b == MAIN)

    @property
    def aux_heads(self) -> list:
        return [h for h, b in self.heads if b != MAIN]

    def has_aux(self) -> bool:
        return bool(self.aux_heads) or any(n.branch != MAIN for n in self.nodes)

    def param_nodes(self) -> list:
        return [n for n in self.nodes if n.kind in ("conv", "fc")]

    def main_convs(self) -> list:
        """Main-branch conv ids in order, projection shortcuts excluded."""
        return [n.id for n in self.nodes
                if n.kind == "conv" and n.branch == MAIN and not n.geometry.get("projection")]

    def aux_attach_point(self) -> Optional[str]:
        for n in self.nodes:
            if n.branch != MAIN and any(self.node(i).branch == MAIN for i in n.inputs):
                return next(i for i in n.inputs if self.node(i).branch == MAIN)
        return None

    def ancestors(self, node_id: str) -> set:
        seen, stack = set(), [node_id]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(self.node(cur).inputs)
        return seen

    def copy(self) -> "NetworkGraph":
        return copy.deepcopy(self)


# -- construction -----------------------------------------------------------

def _conv(node_id, inp, in_ch, out_ch, k, stride=1, relu=True, branch=MAIN, projection=False):
    return LayerNode(node_id, "conv", dict(k=k, stride=stride, pad=k // 2, in_ch=in_ch,
                                           out_ch=out_ch, relu=relu, projection=projection),
                     [inp], branch)


def _pool(node_id, kind, inp, k, stride, branch=MAIN):
    return LayerNode(node_id, kind, dict(k=k, stride=stride), [inp], branch)


def _fc(node_id, inp, out, relu=True, dropout=0.0, branch=MAIN):
    return LayerNode(node_id, "fc", dict(out=out, relu=relu, dropout=dropout), [inp], branch)


def build_cnds(cfg: ArchConfig) -> NetworkGraph:
    """The 8-conv CNDS trunk plus (optionally) one auxiliary supervision branch."""
    cfg.validate()
    c1, c2, c3, c4, c5 = (cfg.scaled(w) for w in cfg.widths)
    pk, ps = cfg.pool_kernel, cfg.pool_stride
    fc_main, fc_aux = cfg.scaled(cfg.fc_main), cfg.scaled(cfg.fc_aux)
    nodes = [
        LayerNode("input", "input", dict(shape=list(cfg.input_shape)), []),
        _conv("conv1", "input", cfg.input_shape[0], c1, 7, stride=2),
        _pool("pool1", "maxpool", "conv1", pk, ps),
        _conv("conv2", "pool1", c1, c2, 3),
        _pool("pool2", "maxpool", "conv2", pk, ps),
        _conv("conv3_1", "pool2", c2, c3, 3),
        _conv("conv3_2", "conv3_1", c3, c3, 3),
        _pool("pool3", "maxpool", "conv3_2", pk, ps),
        _conv("conv4_1", "pool3", c3, c4, 3),
        _conv("conv4_2", "conv4_1", c4, c4, 3),
        _pool("pool4", "maxpool", "conv4_2", pk, ps),
        _conv("conv5_1", "pool4", c4, c5, 3),
        _conv("conv5_2", "conv5_1", c5, c5, 3),
        _pool("pool5", "maxpool", "conv5_2", pk, ps),
        _fc("fc6", "pool5", fc_main, dropout=cfg.dropout),
        _fc("fc7", "fc6", fc_main, dropout=cfg.dropout),
        _fc("output", "fc7", cfg.num_classes, relu=False),
    ]
    heads = [("output", MAIN)]
    if cfg.aux_attach is not None:
        ids = {n.id for n in nodes}
        if cfg.aux_attach not in ids or cfg.aux_attach.startswith(("fc", "output", "input")):
            raise ConfigError(f"aux attach point {cfg.aux_attach!r} is not a trunk feature map")
        attach = cfg.aux_attach
        att_ch = _channels_before(nodes, attach)
        nodes += [
            _pool("s_avgpool", "avgpool", attach, cfg.aux_pool_kernel, cfg.aux_pool_stride, AUX),
            _conv("s_conv", "s_avgpool", att_ch, cfg.scaled(cfg.aux_conv), 1, branch=AUX),
            _fc("s_fc1", "s_conv", fc_aux, dropout=cfg.dropout, branch=AUX),
            _fc("s_fc2", "s_fc1", fc_aux, dropout=cfg.dropout, branch=AUX),
            _fc("s_output", "s_fc2", cfg.num_classes, relu=False, branch=AUX),
        ]
        heads.append(("s_output", AUX))
    g = NetworkGraph(nodes, heads, tuple(cfg.input_shape), cfg.num_classes,
                     post_add_relu=cfg.post_add_relu)
    _fit_geometry(g)
    return g


def _channels_before(nodes, node_id):
    by_id = {n.id: n for n in nodes}
    cur = by_id[node_id]
    while cur.kind != "conv":
        if cur.kind == "input":
            return cur.geometry["shape"][0]
        cur = by_id[cur.inputs[0]]
    return cur.geometry["out_ch"]


def build_conv_stack(depth: int = 12, width: int = 8, input_shape=(3, 32, 32),
                     num_classes: int = 3, downsample_every: int = 2) -> NetworkGraph:
    """Plain branchless stack of 3x3 ReLU convs ending in one linear classifier.

    Every ``downsample_every``-th conv uses stride 2 and doubles the width,
    while the map stays at least 2x2. Used to exercise the gradient probe.
    """
    if depth < 1 or width < 1:
        raise ConfigError("depth and width must be >= 1")
    nodes = [LayerNode("input", "input", dict(shape=list(input_shape)), [])]
    prev, ch, size = "input", input_shape[0], min(input_shape[1:])
    out_ch = width
    for i in range(1, depth + 1):
        stride = 1
        if downsample_every and i > 1 and (i - 1) % downsample_every == 0 and size >= 4:
            stride, out_ch, size = 2, out_ch * 2, (size + 1) // 2
        nodes.append(_conv(f"conv{i}", prev, ch, out_ch, 3, stride=stride))
        prev, ch = f"conv{i}", out_ch
    nodes.append(_fc("output", prev, num_classes, relu=False))
    g = NetworkGraph(nodes, [("output", MAIN)], tuple(input_shape), num_classes)
    _fit_geometry(g)
    return g


def _fit_geometry(g: NetworkGraph) -> None:
    """Fill fc input widths and clip pool windows that overhang small maps."""
    shapes = {}
    for n in g.nodes:
        geo = n.geometry
        if n.kind == "input":
            shapes[n.id] = tuple(geo["shape"])
            continue
        s = shapes[n.inputs[0]]
        if n.kind in ("maxpool", "avgpool"):
            side = min(s[1], s[2])
            if geo["k"] > side:
                geo["k"] = side
        elif n.kind == "fc":
            geo["in"] = int(np.prod(s))
        shapes[n.id] = _node_shape(n, [shapes[i] for i in n.inputs])
    g.shapes = None


def _node_shape(n: LayerNode, ins: list) -> tuple:
    geo = n.geometry
    if n.kind == "conv":
        c, h, w = ins[0]
        if c != geo["in_ch"]:
            raise ShapeError(f"{n.id}: expects {geo['in_ch']} input channels, got {c}")
        k, s, p = geo["k"], geo["stride"], geo["pad"]
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"{n.id}: kernel {k} does not fit {h}x{w}")
        return (geo["out_ch"], L.out_size(h, k, s, p), L.out_size(w, k, s, p))
    if n.kind in ("maxpool", "avgpool"):
        c, h, w = ins[0]
        k, s = geo["k"], geo["stride"]
        if k > h or k > w:
            raise ShapeError(f"{n.id}: pool window {k} does not fit {h}x{w}")
        return (c, L.out_size(h, k, s), L.out_size(w, k, s))
    if n.kind == "fc":
        d = int(np.prod(ins[0]))
        if "in" in geo and d != geo["in"]:
            raise ShapeError(f"{n.id}: expects {geo['in']} inputs, got {d}")
        return (geo["out"],)
    if n.kind == "add":
        if len(ins) != 2:
            raise ShapeError(f"{n.id}: merge needs exactly 2 inputs")
        if ins[0] != ins[1]:
            raise ShapeError(f"merge {n.id}: input shapes {ins[0]} and {ins[1]} differ")
        return ins[0]
    raise ShapeError(f"{n.id}: unknown node kind {n.kind!r}")


# -- residual rewrite -------------------------------------------------------

SHORTCUTS = (
    # (skip source, stage's first conv, stage's last conv, merge id, projection id)
    ("pool2", "conv3_1", "conv3_2", "merge3", "res3_branch"),
    ("pool3", "conv4_1", "conv4_2", "merge4", "res4_branch"),
    ("pool4", "conv5_1", "conv5_2", "merge5", "res5_branch"),
)


def insert_residual_connections(g: NetworkGraph, aux_at_merge: bool = True) -> NetworkGraph:
    """Add the three trunk shortcuts, projecting the skip path where channels differ.

    With ``aux_at_merge`` the auxiliary branch is moved onto the conv4_2 merge;
    otherwise it stays where it was, unless it hung off conv4_2 itself.
    """
    if g.residual or any(n.kind == "add" for n in g.nodes):
        raise RewriteError("graph already has residual connections")
    ids = set(g.ids())
    for src, first, last, _, _ in SHORTCUTS:
        if not {src, first, last} <= ids:
            raise RewriteError(f"not a CNDS graph: missing one of {src}, {first}, {last}")
    out = g.copy()
    out.params, out.shapes = {}, None
    old_attach = g.aux_attach_point()
    for src, first, last, merge_id, proj_id in SHORTCUTS:
        skip_ch = out.node(first).geometry["in_ch"]
        body_ch = out.node(last).geometry["out_ch"]
        consumers = [n for n in out.consumers(last) if n.branch == MAIN]
        pos = out.ids().index(last) + 1
        new = []
        skip = src
        if skip_ch != body_ch:
            new.append(_conv(proj_id, src, skip_ch, body_ch, 1, relu=False, projection=True))
            skip = proj_id
        new.append(LayerNode(merge_id, "add", dict(relu=g.post_add_relu), [last, skip]))
        out.nodes[pos:pos] = new
        for n in consumers:
            n.inputs = [merge_id if i == last else i for i in n.inputs]
    if old_attach is not None and (aux_at_merge or old_attach == "conv4_2"):
        for n in out.nodes:
            if n.branch != MAIN:
                n.inputs = ["merge4" if out.node(i).branch == MAIN else i for i in n.inputs]
        # the aux pool window may need re-fitting at its new anchor
        pool = out.node("s_avgpool") if "s_avgpool" in out.ids() else None
        if pool is not None:
            s_conv = out.consumers(pool.id)[0]
            s_conv.geometry["in_ch"] = _channels_before(out.nodes, "merge4")
    out.residual = True
    _fit_geometry(out)
    return out


# -- shapes -----------------------------------------------------------------

def infer_shapes(g: NetworkGraph, input_shape=None) -> dict:
    """Annotate every node with its per-example output shape; marks ``g`` validated."""
    if input_shape is not None and tuple(input_shape) != tuple(g.input_shape):
        g = g.copy()
        g.input_shape = tuple(input_shape)
        g.node("input").geometry["shape"] = list(input_shape)
        return infer_shapes(g)
    seen = set()
    shapes = {}
    for n in g.nodes:
        if n.id in seen:
            raise ShapeError(f"duplicate node id {n.id}")
        for i in n.inputs:
            if i not in seen:
                raise ShapeError(f"{n.id}: input {i!r} missing or not earlier in topological order")
        expected = 0 if n.kind == "input" else 2 if n.kind == "add" else 1
        if len(n.inputs) != expected:
            raise ShapeError(f"{n.id}: {n.kind} node needs {expected} inputs, has {len(n.inputs)}")
        seen.add(n.id)
        if n.kind == "input":
            shapes[n.id] = tuple(n.geometry["shape"])
        else:
            shapes[n.id] = _node_shape(n, [shapes[i] for i in n.inputs])
    mains = [h for h, b in g.heads if b == MAIN]
    if len(mains) != 1:
        raise ShapeError("graph needs exactly one main head")
    for h, _ in g.heads:
        if shapes[h] != (g.num_classes,):
            raise ShapeError(f"head {h} emits {shapes[h]}, expected ({g.num_classes},)")
    g.shapes = shapes
    return shapes


def shape_table(g: NetworkGraph) -> str:
    shapes = g.shapes or infer_shapes(g)
    rows = [f"{'node':<12} {'kind':<8} {'branch':<6} {'inputs':<24} shape"]
    for n in g.nodes:
        rows.append(f"{n.id:<12} {n.kind:<8} {n.branch:<6} {','.join(n.inputs):<24} "
                    f"{'x'.join(map(str, shapes[n.id]))}")
    return "\n".join(rows)


# -- parameters -------------------------------------------------------------

def node_key(node_id: str) -> int:
    return zlib.crc32(node_id.encode())


def init_params(g: NetworkGraph, std=INIT_STD, seed: int = 0) -> NetworkGraph:
    """Gaussian(0, std) weights, zero biases; each node seeded by (seed, node id).

    ``std="he"`` switches to a per-layer std of sqrt(2 / fan_in).
    """
    g.params = {}
    for n in g.param_nodes():
        geo = n.geometry
        if n.kind == "conv":
            shape = (geo["out_ch"], geo["in_ch"], geo["k"], geo["k"])
        else:
            shape = (geo["out"], geo["in"])
        s = std
        if std == "he":
            s = float(np.sqrt(2.0 / np.prod(shape[1:])))
        g.params[n.id] = LayerParams.gaussian(shape, float(s), [seed, node_key(n.id)])
    return g


# -- execution --------------------------------------------------------------

@dataclass
class ExecState:
    mode: str
    order: list
    caches: dict
    outputs: dict


def forward(g: NetworkGraph, batch: np.ndarray, mode: str = "train", seed=0):
    """Run the graph; returns ({head id: logits [N, K]}, ExecState).

    Test mode evaluates only what the main head depends on, so auxiliary
    branches are never executed, and dropout is the identity.
    """
    if g.shapes is None:
        raise StateError("graph not validated: call infer_shapes first")
    if mode not in ("train", "test"):
        raise ValueError(f"unknown mode {mode!r}")
    if tuple(batch.shape[1:]) != tuple(g.input_shape):
        raise ShapeError(f"batch shape {batch.shape[1:]} != graph input {g.input_shape}")
    seed = list(np.atleast_1d(seed).astype(np.int64).tolist())
    if mode == "test":
        needed = g.ancestors(g.main_head)
        heads = [g.main_head]
    else:
        needed = set(g.ids())
        heads = [h for h, _ in g.heads]
    outputs, caches, order = {}, {}, []
    for n in g.nodes:
        if n.id not in needed:
            continue
        geo = n.geometry
        c = caches[n.id] = {"op": L.Cache(), "act": L.Cache(), "drop": L.Cache()}
        ins = [outputs[i] for i in n.inputs]
        if n.kind == "input":
            y = batch
        elif n.kind == "conv":
            y = L.conv2d_forward(ins[0], g.params[n.id], geo["stride"], geo["pad"], c["op"])
            if geo["relu"]:
                y = L.relu_forward(y, c["act"])
        elif n.kind == "maxpool":
            y = L.maxpool_forward(ins[0], geo["k"], geo["stride"], c["op"])
        elif n.kind == "avgpool":
            y = L.avgpool_forward(ins[0], geo["k"], geo["stride"], c["op"])
        elif n.kind == "fc":
            y = L.fc_forward(ins[0], g.params[n.id], c["op"])
            if geo["relu"]:
                y = L.relu_forward(y, c["act"])
            if geo.get("dropout"):
                y = L.dropout_forward(y, geo["dropout"], mode, seed + [node_key(n.id)], c["drop"])
        elif n.kind == "add":
            y = L.add_forward(ins[0], ins[1], c["op"])
            if geo.get("relu"):
                y = L.relu_forward(y, c["act"])
        else:
            raise ShapeError(f"unknown node kind {n.kind!r}")
        outputs[n.id] = y
        order.append(n.id)
    logits = {h: outputs[h] for h in heads}
    return logits, ExecState(mode, order, caches, outputs)


def backward(g: NetworkGraph, state: ExecState, head_grads: dict) -> dict:
    """Reverse-mode pass; returns {param node id: LayerParams of gradients}.

    Gradients arriving from several consumers (both heads at shared trunk
    nodes, both sides of a merge) are summed.
    """
    if state is None or not state.caches:
        raise StateError("no forward state to differentiate")
    upstream = {}
    for h, gr in head_grads.items():
        if h not in state.outputs:
            raise StateError(f"head {h} was not executed in this forward pass")
        upstream[h] = np.asarray(gr, dtype=np.float64)
    grads = {}
    for nid in reversed(state.order):
        n = g.node(nid)
        if n.kind == "input" or nid not in upstream:
            continue
        gy = upstream.pop(nid)
        geo, c = n.geometry, state.caches[nid]
        if n.kind == "conv":
            if geo["relu"]:
                gy = L.relu_backward(gy, c["act"])
            gx, gw, gb = L.conv2d_backward(gy, g.params[nid], c["op"], geo["stride"], geo["pad"])
            grads[nid] = LayerParams(gw, gb)
            gin = [gx]
        elif n.kind == "maxpool":
            gin = [L.maxpool_backward(gy, c["op"])]
        elif n.kind == "avgpool":
            gin = [L.avgpool_backward(gy, c["op"])]
        elif n.kind == "fc":
            if geo.get("dropout"):
                gy = L.dropout_backward(gy, c["drop"])
            if geo["relu"]:
                gy = L.relu_backward(gy, c["act"])
            gx, gw, gb = L.fc_backward(gy, g.params[nid], c["op"])
            grads[nid] = LayerParams(gw, gb)
            gin = [gx]
        elif n.kind == "add":
            if geo.get("relu"):
                gy = L.relu_backward(gy, c["act"])
            gin = list(L.add_backward(gy, c["op"]))
        for src, gx in zip(n.inputs, gin):
            if g.node(src).kind == "input":
                continue
            upstream[src] = upstream[src] + gx if src in upstream else gx
    for nid in state.order:
        if nid in g.params and nid not in grads:
            p = g.params[nid]
            grads[nid] = LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias))
    return grads


# -- serialization ----------------------------------------------------------

def to_dict(g: NetworkGraph) -> dict:
    return {
        "format": ARCH_FORMAT,
        "input_shape": list(g.input_shape),
        "num_classes": g.num_classes,
        "residual": g.residual,
        "post_add_relu": g.post_add_relu,
        "nodes": [asdict(n) for n in g.nodes],
        "heads": [{"node": h, "branch": b} for h, b in g.heads],
    }


def from_dict(d: dict) -> NetworkGraph:
    if d.get("format") != ARCH_FORMAT:
        raise ConfigError(f"unsupported architecture format {d.get('format')!r}")
    nodes = [LayerNode(**n) for n in d["nodes"]]
    g = NetworkGraph(nodes, [(h["node"], h["branch"]) for h in d["heads"]],
                     tuple(d["input_shape"]), int(d["num_classes"]), bool(d.get("residual")),
                     bool(d.get("post_add_relu", False)))
    return g


def save_arch(g: NetworkGraph, path) -> None:
    Path(path).write_text(json.dumps(to_dict(g), indent=2) + "\n")


def load_arch(path) -> NetworkGraph:
    return from_dict(json.loads(Path(path).read_text()))


def require_branchless(g: NetworkGraph) -> None:
    if g.has_aux():
        raise PreconditionError("the placement probe needs a graph without auxiliary branches")
