"""Differentiable cell search space.

A cell is a DAG over 2 input nodes and a few intermediate nodes; every edge
into an intermediate node carries a mixture of candidate operations weighted
by the softmax of per-edge architecture logits.  The final architecture is a
discrete selection of the strongest edges/operations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import BatchNorm2d, Conv2d, Linear, Module
from .seeding import seed_stream
from .tensor import Tensor

OP_ORDER = [
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "identity",
    "zero",
]

# search default skips max_pool (its certification bound is loose) but the
# full operation set stays available through SpaceConfig.ops
DEFAULT_SEARCH_OPS = [
    "sep_conv_3x3",
    "dil_conv_3x3",
    "avg_pool_3x3",
    "identity",
    "zero",
]

__all__ = [
    "OP_ORDER",
    "DEFAULT_SEARCH_OPS",
    "SpaceConfig",
    "ArchParams",
    "DiscreteCell",
    "SuperNet",
    "DiscreteNet",
    "build_supernet",
    "build_discrete_net",
    "mixed_edge_forward",
    "derive_architecture",
    "num_cell_edges",
    "make_candidate_op",
]


@dataclass
class SpaceConfig:
    """Sizes and operation subset of the search space."""

    input_hw: int = 8
    in_channels: int = 1
    channels: int = 8
    classes: int = 10
    cells: int = 1
    nodes: int = 2                      # intermediate nodes per cell
    ops: list = field(default_factory=lambda: list(DEFAULT_SEARCH_OPS))
    edges_per_node: int = 2
    reduction_cells: tuple = ()         # indices of cells that halve resolution

    def validate(self):
        if self.nodes < 1 or self.cells < 1:
            raise ValueError("need at least one cell and one intermediate node")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if not self.ops:
            raise ValueError("operation subset must be non-empty")
        unknown = [o for o in self.ops if o not in OP_ORDER]
        if unknown:
            raise ValueError(f"unknown candidate ops: {unknown}")
        if self.edges_per_node < 1 or self.edges_per_node > self.nodes + 1:
            raise ValueError("edges_per_node out of range")
        for r in self.reduction_cells:
            if not 0 <= r < self.cells:
                raise ValueError("reduction cell index out of range")
        return self


def num_cell_edges(nodes):
    """Edges into intermediate nodes: node i has (2 + i) predecessors."""
    return sum(2 + i for i in range(nodes))


# ---------------------------------------------------------------------------
# candidate operations
# ---------------------------------------------------------------------------

class DilStage(Module):
    """ReLU -> depthwise dilated conv -> pointwise conv -> BN."""

    def __init__(self, channels, kernel, rng, dilation=2):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.dw = self.add_child(
            "dw", Conv2d(channels, channels, kernel, rng, padding=pad,
                         dilation=dilation, groups=channels)
        )
        self.pw = self.add_child("pw", Conv2d(channels, channels, 1, rng))
        self.bn = self.add_child("bn", BatchNorm2d(channels))

    def __call__(self, x, training=False):
        return self.bn(self.pw(self.dw(T.relu(x))), training)


class SepConvOp(Module):
    """Two consecutive dilated-separable stages."""

    def __init__(self, tag, channels, kernel, rng):
        super().__init__()
        self.tag = tag
        self.s1 = self.add_child("s1", DilStage(channels, kernel, rng))
        self.s2 = self.add_child("s2", DilStage(channels, kernel, rng))

    def __call__(self, x, training=False):
        return self.s2(self.s1(x, training), training)


class DilConvOp(Module):
    def __init__(self, tag, channels, kernel, rng):
        super().__init__()
        self.tag = tag
        self.s1 = self.add_child("s1", DilStage(channels, kernel, rng))

    def __call__(self, x, training=False):
        return self.s1(x, training)


class PoolOp(Module):
    def __init__(self, tag, kind, kernel=3):
        super().__init__()
        self.tag = tag
        self.kind = kind
        self.kernel = kernel

    def __call__(self, x, training=False):
        if self.kind == "max":
            return T.max_pool2d(x, self.kernel, 1, self.kernel // 2)
        return T.avg_pool2d(x, self.kernel, 1, self.kernel // 2)


class IdentityOp(Module):
    tag = "identity"

    def __call__(self, x, training=False):
        return x


class ZeroOp(Module):
    tag = "zero"

    def __call__(self, x, training=False):
        return Tensor(np.zeros_like(x.data))


def make_candidate_op(tag, channels, rng):
    if tag == "sep_conv_3x3":
        return SepConvOp(tag, channels, 3, rng)
    if tag == "sep_conv_5x5":
        return SepConvOp(tag, channels, 5, rng)
    if tag == "dil_conv_3x3":
        return DilConvOp(tag, channels, 3, rng)
    if tag == "dil_conv_5x5":
        return DilConvOp(tag, channels, 5, rng)
    if tag == "max_pool_3x3":
        return PoolOp(tag, "max")
    if tag == "avg_pool_3x3":
        return PoolOp(tag, "avg")
    if tag == "identity":
        return IdentityOp()
    if tag == "zero":
        return ZeroOp()
    raise ValueError(f"unknown candidate op '{tag}'")


class MixedOp(Module):
    """Softmax-weighted sum of every candidate operation on an edge."""

    def __init__(self, op_tags, channels, rng):
        super().__init__()
        self.op_tags = list(op_tags)
        self.ops = []
        for tag in self.op_tags:
            op = make_candidate_op(tag, channels, rng)
            self.add_child(tag, op)
            self.ops.append(op)

    def __call__(self, x, mix_row, training=False):
        out = None
        for i, op in enumerate(self.ops):
            m = T.reshape(T.slice_axis(mix_row, 0, i, i + 1), (1, 1, 1, 1))
            term = T.mul(m, op(x, training))
            out = term if out is None else T.add(out, term)
        return out


def mixed_edge_forward(edge, x, alpha_row):
    """Forward an edge with explicit unnormalized logits for its candidates."""
    if not isinstance(alpha_row, Tensor):
        alpha_row = Tensor(alpha_row)
    if alpha_row.shape != (len(edge.ops),):
        raise ValueError(
            f"alpha row has {alpha_row.shape} entries for {len(edge.ops)} candidate ops"
        )
    mix = T.softmax(T.reshape(alpha_row, (1, -1)))
    return edge(x, T.reshape(mix, (-1,)))


# ---------------------------------------------------------------------------
# architecture parameters
# ---------------------------------------------------------------------------

class ArchParams:
    """Per-edge logits over candidate operations, shared across same-kind cells."""

    def __init__(self, num_edges, op_tags):
        self.op_tags = list(op_tags)
        self.alpha = Tensor(np.zeros((num_edges, len(op_tags))), requires_grad=True)

    @property
    def num_edges(self):
        return self.alpha.shape[0]

    def mixing(self):
        """Row-wise softmax of the logits (positive, rows sum to one)."""
        return T.softmax(self.alpha, axis=-1)

    def mixing_np(self):
        a = self.alpha.data
        e = np.exp(a - a.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def copy(self):
        ap = ArchParams(self.num_edges, self.op_tags)
        ap.alpha.data[...] = self.alpha.data
        return ap


# ---------------------------------------------------------------------------
# cells and networks
# ---------------------------------------------------------------------------

class Preprocess(Module):
    """Aligns a cell input: optional stride-2 average pool, then 1x1 conv + BN."""

    def __init__(self, cin, cout, rng, reduce=False):
        super().__init__()
        self.reduce = reduce
        self.conv = self.add_child("conv", Conv2d(cin, cout, 1, rng))
        self.bn = self.add_child("bn", BatchNorm2d(cout))

    def __call__(self, x, training=False):
        if self.reduce:
            x = T.avg_pool2d(x, 2, 2, 0)
        return self.bn(self.conv(x), training)


@dataclass
class Edge:
    from_node: int
    to_node: int
    index: int          # row of the (shared) alpha matrix
    op: MixedOp


class Cell(Module):
    """DAG cell: intermediate nodes sum their incoming mixed edges; the cell
    output concatenates intermediate outputs and 1x1-projects back to C."""

    def __init__(self, channels, nodes, op_tags, rng, reduction=False):
        super().__init__()
        self.channels = channels
        self.nodes = nodes
        self.reduction = reduction
        self.pre0 = self.add_child("pre0", Preprocess(channels, channels, rng, reduce=reduction))
        self.pre1 = self.add_child("pre1", Preprocess(channels, channels, rng, reduce=reduction))
        self.edges: list[Edge] = []
        idx = 0
        for i in range(nodes):
            for frm in range(2 + i):
                op = MixedOp(op_tags, channels, rng)
                self.add_child(f"edge{idx}", op)
                self.edges.append(Edge(frm, 2 + i, idx, op))
                idx += 1
        self.proj = self.add_child("proj", Conv2d(channels * nodes, channels, 1, rng))
        self.proj_bn = self.add_child("proj_bn", BatchNorm2d(channels))

    def __call__(self, s0, s1, mix, training=False):
        states = [self.pre0(s0, training), self.pre1(s1, training)]
        by_node: dict[int, list[Edge]] = {}
        for e in sorted(self.edges, key=lambda e: (e.to_node, e.from_node)):
            by_node.setdefault(e.to_node, []).append(e)
        for i in range(self.nodes):
            acc = None
            for e in by_node.get(2 + i, []):
                row = T.reshape(T.slice_axis(mix, 0, e.index, e.index + 1), (-1,))
                term = e.op(states[e.from_node], row, training)
                acc = term if acc is None else T.add(acc, term)
            states.append(acc)
        out = T.concat(states[2:], axis=1)
        return self.proj_bn(self.proj(out), training)


class _NetBase(Module):
    """Shared stem/head plumbing for supernet and discrete networks."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.stem = self.add_child(
            "stem", Conv2d(cfg.in_channels, cfg.channels, 3, rng, padding=1)
        )
        self.stem_bn = self.add_child("stem_bn", BatchNorm2d(cfg.channels))
        self.head = None  # set by subclass after cells exist

    def _make_head(self, rng):
        self.head = self.add_child("head", Linear(self.cfg.channels, self.cfg.classes, rng))

    def _stem(self, x, training):
        return self.stem_bn(self.stem(x), training)

    def _head(self, feat, training):
        return self.head(T.global_avg_pool(feat))


class SuperNet(_NetBase):
    """Over-parameterized network carrying every candidate op on every edge."""

    def __init__(self, cfg: SpaceConfig, seed=0):
        cfg.validate()
        rng = seed_stream(seed, "weights")
        super().__init__(cfg, rng)
        self.seed = seed
        self.cells = []
        for ci in range(cfg.cells):
            cell = Cell(cfg.channels, cfg.nodes, cfg.ops, rng,
                        reduction=ci in cfg.reduction_cells)
            self.add_child(f"cell{ci}", cell)
            self.cells.append(cell)
        self._make_head(rng)
        edges = num_cell_edges(cfg.nodes)
        self.arch = ArchParams(edges, cfg.ops)
        self.arch_reduce = ArchParams(edges, cfg.ops) if cfg.reduction_cells else None

    def arch_parameters(self):
        out = [("alpha_normal", self.arch.alpha)]
        if self.arch_reduce is not None:
            out.append(("alpha_reduce", self.arch_reduce.alpha))
        return out

    def forward(self, x, arch=None, training=False):
        arch = arch if arch is not None else self.arch
        mix_normal = arch.mixing()
        mix_reduce = self.arch_reduce.mixing() if self.arch_reduce is not None else None
        s0 = s1 = self._stem(x, training)
        for ci, cell in enumerate(self.cells):
            mix = mix_reduce if cell.reduction else mix_normal
            s0, s1 = s1, cell(s0, s1, mix, training)
        return self._head(s1, training)

    def __call__(self, x, arch=None, training=False):
        return self.forward(x, arch, training)


# ---------------------------------------------------------------------------
# discrete architectures
# ---------------------------------------------------------------------------

@dataclass
class DiscreteCell:
    """Derived architecture: per intermediate node, the kept input edges and
    their single chosen operation."""

    nodes: int
    edges_per_node: int
    entries: list  # of {"node": int, "from": int, "op_tag": str}

    def to_json(self):
        return json.dumps(
            {
                "nodes": self.nodes,
                "edges_per_node": self.edges_per_node,
                "cell": self.entries,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        cell = cls(obj["nodes"], obj["edges_per_node"], obj["cell"])
        cell.validate()
        return cell

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())

    def validate(self):
        for i in range(self.nodes):
            node_id = 2 + i
            picks = [e for e in self.entries if e["node"] == node_id]
            if len(picks) != self.edges_per_node:
                raise ValueError(f"node {node_id} keeps {len(picks)} edges, "
                                 f"expected {self.edges_per_node}")
            for e in picks:
                if not 0 <= e["from"] < node_id:
                    raise ValueError(f"edge into node {node_id} from invalid node {e['from']}")
                if e["op_tag"] == "zero" or e["op_tag"] not in OP_ORDER:
                    raise ValueError(f"invalid chosen op '{e['op_tag']}'")
        return self


def derive_architecture(arch: ArchParams, edges_per_node=2, nodes=None):
    """Discretize: per node keep the edges with the largest non-zero-op mixing
    weight, then pick that op on each kept edge; ties break by OP_ORDER."""
    mix = arch.mixing_np()
    tags = arch.op_tags
    if nodes is None:
        # invert num_cell_edges
        nodes, total = 0, 0
        while total < mix.shape[0]:
            total += 2 + nodes
            nodes += 1
        if total != mix.shape[0]:
            raise ValueError(f"alpha rows ({mix.shape[0]}) do not match a cell edge count")
    order = {t: i for i, t in enumerate(OP_ORDER)}
    entries = []
    idx = 0
    for i in range(nodes):
        n_in = 2 + i
        if n_in < edges_per_node:
            raise ValueError(f"node {2 + i} has {n_in} incoming edges < {edges_per_node}")
        scored = []
        for frm in range(n_in):
            row = mix[idx + frm]
            cands = [(row[o], -order[tag], tag) for o, tag in enumerate(tags) if tag != "zero"]
            w, _, tag = max(cands)  # exact ties fall to the earlier OP_ORDER tag
            scored.append((-w, frm, tag))
        scored.sort()  # descending weight, then lower from-node on ties
        for _neg_w, frm, tag in scored[:edges_per_node]:
            entries.append({"node": 2 + i, "from": frm, "op_tag": tag})
        idx += n_in
    entries.sort(key=lambda e: (e["node"], e["from"]))
    return DiscreteCell(nodes, edges_per_node, entries)


class DiscreteEdgeOp(Module):
    def __init__(self, tag, channels, rng):
        super().__init__()
        self.tag = tag
        self.op = self.add_child("op", make_candidate_op(tag, channels, rng))

    def __call__(self, x, training=False):
        return self.op(x, training)


class DiscreteCellModule(Module):
    def __init__(self, genotype: DiscreteCell, channels, rng, reduction=False):
        super().__init__()
        self.genotype = genotype
        self.nodes = genotype.nodes
        self.reduction = reduction
        self.pre0 = self.add_child("pre0", Preprocess(channels, channels, rng, reduce=reduction))
        self.pre1 = self.add_child("pre1", Preprocess(channels, channels, rng, reduce=reduction))
        self.picks = []
        for k, e in enumerate(sorted(genotype.entries, key=lambda e: (e["node"], e["from"]))):
            op = DiscreteEdgeOp(e["op_tag"], channels, rng)
            self.add_child(f"pick{k}", op)
            self.picks.append((e["node"], e["from"], op))
        self.proj = self.add_child("proj", Conv2d(channels * self.nodes, channels, 1, rng))
        self.proj_bn = self.add_child("proj_bn", BatchNorm2d(channels))

    def __call__(self, s0, s1, training=False):
        states = [self.pre0(s0, training), self.pre1(s1, training)]
        for i in range(self.nodes):
            acc = None
            for node, frm, op in self.picks:
                if node != 2 + i:
                    continue
                term = op(states[frm], training)
                acc = term if acc is None else T.add(acc, term)
            states.append(acc)
        out = T.concat(states[2:], axis=1)
        return self.proj_bn(self.proj(out), training)


class DiscreteNet(_NetBase):
    """Stacked copies of a derived cell, trained from scratch."""

    def __init__(self, genotype: DiscreteCell, cfg: SpaceConfig, seed=0):
        cfg.validate()
        genotype.validate()
        rng = seed_stream(seed, "weights")
        super().__init__(cfg, rng)
        self.genotype = genotype
        self.seed = seed
        self.cells = []
        for ci in range(cfg.cells):
            cell = DiscreteCellModule(genotype, cfg.channels, rng,
                                      reduction=ci in cfg.reduction_cells)
            self.add_child(f"cell{ci}", cell)
            self.cells.append(cell)
        self._make_head(rng)

    def forward(self, x, training=False):
        s0 = s1 = self._stem(x, training)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, training)
        return self._head(s1, training)

    def __call__(self, x, training=False):
        return self.forward(x, training)


class OpChain(Module):
    """Plain sequence of candidate ops (or the string "relu"); used to test
    propagation rules in isolation."""

    def __init__(self, items):
        super().__init__()
        self.items = list(items)
        for i, op in enumerate(self.items):
            if isinstance(op, Module):
                self.add_child(f"op{i}", op)

    def forward(self, x, training=False):
        for op in self.items:
            x = T.relu(x) if op == "relu" else op(x, training)
        return x

    def __call__(self, x, training=False):
        return self.forward(x, training)


def build_supernet(cfg: SpaceConfig, seed=0):
    """Deterministic supernet: same seed gives bit-identical weights; alpha
    starts at zero (uniform mixing)."""
    return SuperNet(cfg, seed)


def build_discrete_net(genotype, cfg, seed=0):
    return DiscreteNet(genotype, cfg, seed)
