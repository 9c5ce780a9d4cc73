"""Certified bounds through the architecture DAG.

Every building block gets a sound affine/interval sandwich of its output as a
function of its input box.  Blocks compose in topological order; a mixed edge
combines its candidates' bounds with the (positive) softmax mixing weights, so
the resulting logit bounds and certified margins are differentiable in both
the architecture logits and the operation weights.

Concretization is interval-style at block boundaries.  Inside a block the
affine tail (conv / 1x1 conv / batch-norm) is fused into a single linear map
before concretizing (substitution depth 1, the default); depth 0 concretizes
after every primitive instead.  The input perturbation ball is concretized
against the first affine stage with the dual norm of the attack norm, and the
certified margins fuse the class-difference rows into the final affine layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cells import (DilConvOp, DilStage, DiscreteNet, IdentityOp, PoolOp,
                    SepConvOp, SuperNet, ZeroOp)
from .layers import BatchNorm2d, Conv2d, Linear, LinearModel, MLP
from .tensor import Tensor

BIG_NEG = 1e30
EPSILON_INIT = 0.03     # starting perturbation radius for the adaptive schedule

__all__ = [
    "PerturbationSpec",
    "IntervalBounds",
    "CertifiedRadius",
    "LinearBounds",
    "propagate_bounds",
    "propagate_margins",
    "margin_lower_bound",
    "cb_metric",
    "adapt_epsilon",
    "certify_radius",
    "verification_report",
    "block_bounds",
    "EPSILON_INIT",
]


def _norm_p(p):
    if p in (2, 2.0, "2"):
        return 2.0
    if p in (np.inf, math.inf, "inf", "linf"):
        return math.inf
    raise ValueError(f"unsupported norm p={p!r} (use 2 or inf)")


@dataclass
class PerturbationSpec:
    """Admissible inputs: {x + e : ||e||_p <= eps}, elementwise around a batch."""

    x: Tensor            # [N, C, H, W]
    eps: float
    p: float = math.inf

    def __post_init__(self):
        if not isinstance(self.x, Tensor):
            self.x = Tensor(self.x)
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        self.p = _norm_p(self.p)


class IntervalBounds:
    """Concretized per-neuron bounds (lower <= upper elementwise)."""

    def __init__(self, lower: Tensor, upper: Tensor):
        if lower.shape != upper.shape:
            raise ValueError("bound shapes differ")
        if np.any(lower.data > upper.data + 1e-9):
            raise ValueError("invalid interval: lower > upper")
        self.lower = lower
        self.upper = upper

    @property
    def shape(self):
        return self.lower.shape

    def width(self):
        return T.add(self.upper, T.neg(self.lower))

    def mid_rad(self):
        mid = T.mul(T.add(self.lower, self.upper), 0.5)
        rad = T.mul(T.add(self.upper, T.neg(self.lower)), 0.5)
        return mid, rad

    def contains(self, values, slack=1e-9):
        v = values.data if isinstance(values, Tensor) else np.asarray(values)
        return bool(np.all(v >= self.lower.data - slack) and np.all(v <= self.upper.data + slack))


@dataclass
class CertifiedRadius:
    value: float
    p: float
    tol: float


class _Ball:
    """Input region still awaiting its first affine concretization."""

    def __init__(self, x, eps, p):
        self.x = x
        self.eps = eps
        self.p = p

    def to_box(self):
        e = T.Tensor(np.full_like(self.x.data, self.eps))
        return IntervalBounds(T.add(self.x, T.neg(e)), T.add(self.x, e))


# ---------------------------------------------------------------------------
# affine stages as (weight-apply, |weight|-apply, bias) triples
# ---------------------------------------------------------------------------

def _bn_affine_tensors(bn: BatchNorm2d):
    """Inference-mode scale/shift with gradients flowing to gamma/beta;
    running statistics enter as constants."""
    inv = Tensor(1.0 / np.sqrt(bn.running_var.data + bn.eps))
    scale = T.mul(bn.gamma, inv)
    shift = T.add(bn.beta, T.neg(T.mul(scale, Tensor(bn.running_mean.data.copy()))))
    return scale, shift


def _fused_stage_kernel(stage: DilStage):
    """Compose depthwise, pointwise, and BN into one conv kernel + bias."""
    c = stage.dw.weight.shape[0]
    k = stage.dw.weight.shape[2]
    scale, shift = _bn_affine_tensors(stage.bn)
    pw = T.reshape(stage.pw.weight, (c, c))                 # [out, in]
    dw = T.reshape(stage.dw.weight, (c, k, k))              # per-channel taps
    scaled_pw = T.mul(T.reshape(scale, (c, 1)), pw)
    kernel = T.einsum2("oc,ckl->ockl", scaled_pw, dw)
    conf = dict(stride=stage.dw.stride, padding=stage.dw.padding,
                dilation=stage.dw.dilation)
    return kernel, shift, conf


def _fused_conv_bn_kernel(conv: Conv2d, bn: BatchNorm2d | None):
    if bn is None:
        bias = conv.bias
        kernel = conv.weight
    else:
        scale, shift = _bn_affine_tensors(bn)
        cout = conv.weight.shape[0]
        kernel = T.mul(T.reshape(scale, (cout, 1, 1, 1)), conv.weight)
        bias = shift if conv.bias is None else T.add(T.mul(scale, conv.bias), shift)
    conf = dict(stride=conv.stride, padding=conv.padding, dilation=conv.dilation)
    return kernel, bias, conf


def _conv_box(box: IntervalBounds, kernel, bias, conf) -> IntervalBounds:
    mid, rad = box.mid_rad()
    mid2 = T.conv2d(mid, kernel, bias, **conf)
    rad2 = T.conv2d(rad, T.abs_(kernel), None, **conf)
    return IntervalBounds(T.add(mid2, T.neg(rad2)), T.add(mid2, rad2))


def _conv_ball(ball: _Ball, kernel, bias, conf) -> IntervalBounds:
    """Concretize a conv directly against the input ball (dual-norm widths)."""
    mid = T.conv2d(ball.x, kernel, bias, **conf)
    if ball.p == math.inf:
        ones = Tensor(np.ones_like(ball.x.data))
        rad = T.mul(T.conv2d(ones, T.abs_(kernel), None, **conf), ball.eps)
    else:
        ones = Tensor(np.ones_like(ball.x.data))
        sq = T.conv2d(ones, T.mul(kernel, kernel), None, **conf)
        rad = T.mul(T.sqrt(sq), ball.eps)
    return IntervalBounds(T.add(mid, T.neg(rad)), T.add(mid, rad))


def _dense_box(box: IntervalBounds, weight, bias) -> IntervalBounds:
    mid, rad = box.mid_rad()
    wt = T.transpose(weight, (1, 0))
    mid2 = T.matmul(mid, wt)
    if bias is not None:
        mid2 = T.add(mid2, T.reshape(bias, (1, -1)))
    rad2 = T.matmul(rad, T.abs_(T.transpose(weight, (1, 0))))
    return IntervalBounds(T.add(mid2, T.neg(rad2)), T.add(mid2, rad2))


def _dense_ball(ball: _Ball, weight, bias) -> IntervalBounds:
    mid = T.matmul(ball.x, T.transpose(weight, (1, 0)))
    if bias is not None:
        mid = T.add(mid, T.reshape(bias, (1, -1)))
    if ball.p == math.inf:
        row = T.sum_(T.abs_(weight), axis=1)
    else:
        row = T.sqrt(T.sum_(T.mul(weight, weight), axis=1))
    rad = T.broadcast_to(T.reshape(T.mul(row, ball.eps), (1, -1)), mid.shape)
    return IntervalBounds(T.add(mid, T.neg(rad)), T.add(mid, rad))


def _relu_box(box: IntervalBounds) -> IntervalBounds:
    return IntervalBounds(T.relu(box.lower), T.relu(box.upper))


def _avg_pool_box(box, kernel, stride, padding):
    return IntervalBounds(T.avg_pool2d(box.lower, kernel, stride, padding),
                          T.avg_pool2d(box.upper, kernel, stride, padding))


def _max_pool_box(box, kernel, stride, padding):
    return IntervalBounds(T.max_pool2d(box.lower, kernel, stride, padding),
                          T.max_pool2d(box.upper, kernel, stride, padding))


def _add_boxes(a, b):
    return IntervalBounds(T.add(a.lower, b.lower), T.add(a.upper, b.upper))


def _scale_box(box, m):
    """Multiply by a positive scalar tensor (a softmax mixing weight)."""
    return IntervalBounds(T.mul(m, box.lower), T.mul(m, box.upper))


def _concat_boxes(boxes, axis=1):
    return IntervalBounds(T.concat([b.lower for b in boxes], axis),
                          T.concat([b.upper for b in boxes], axis))


def _gap_box(box):
    return IntervalBounds(T.global_avg_pool(box.lower), T.global_avg_pool(box.upper))


# ---------------------------------------------------------------------------
# per-op interval rules
# ---------------------------------------------------------------------------

def _stage_box(stage: DilStage, box, depth):
    pre = _relu_box(box)
    if depth >= 1:
        kernel, bias, conf = _fused_stage_kernel(stage)
        return _conv_box(pre, kernel, bias, conf)
    h = _conv_box(pre, stage.dw.weight, None,
                  dict(stride=stage.dw.stride, padding=stage.dw.padding,
                       dilation=stage.dw.dilation, groups=stage.dw.groups))
    h = _conv_box(h, stage.pw.weight, None, dict(stride=1, padding=0, dilation=1))
    scale, shift = _bn_affine_tensors(stage.bn)
    c = scale.shape[0]
    s4 = T.reshape(scale, (1, c, 1, 1))
    mid, rad = h.mid_rad()
    mid2 = T.add(T.mul(mid, s4), T.reshape(shift, (1, c, 1, 1)))
    rad2 = T.mul(rad, T.abs_(s4))
    return IntervalBounds(T.add(mid2, T.neg(rad2)), T.add(mid2, rad2))


def _op_box(op, box, depth):
    if isinstance(op, IdentityOp):
        return box
    if isinstance(op, ZeroOp):
        z = Tensor(np.zeros_like(box.lower.data))
        return IntervalBounds(z, z)
    if isinstance(op, PoolOp):
        pad = op.kernel // 2
        if op.kind == "max":
            return _max_pool_box(box, op.kernel, 1, pad)
        return _avg_pool_box(box, op.kernel, 1, pad)
    if isinstance(op, DilConvOp):
        return _stage_box(op.s1, box, depth)
    if isinstance(op, SepConvOp):
        return _stage_box(op.s2, _stage_box(op.s1, box, depth), depth)
    raise ValueError(f"no bound rule for op {type(op).__name__}")


def _preprocess_box(pre, box, depth):
    if pre.reduce:
        box = _avg_pool_box(box, 2, 2, 0)
    kernel, bias, conf = _fused_conv_bn_kernel(pre.conv, pre.bn)
    return _conv_box(box, kernel, bias, conf)


# ---------------------------------------------------------------------------
# whole-model propagation
# ---------------------------------------------------------------------------

class PropagationResult:
    """Logit box plus, when the model ends in an affine head, the head weights
    and the region feeding them (for class-difference fusion)."""

    def __init__(self, logits: IntervalBounds, head_w=None, head_b=None, feed=None):
        self.logits = logits
        self.head_w = head_w
        self.head_b = head_b
        self.feed = feed


def _mixed_edge_box(mixed_op, box, mix_row, depth):
    acc = None
    for i, op in enumerate(mixed_op.ops):
        m = T.reshape(T.slice_axis(mix_row, 0, i, i + 1), (1, 1, 1, 1))
        contrib = _scale_box(_op_box(op, box, depth), m)
        acc = contrib if acc is None else _add_boxes(acc, contrib)
    return acc


def _cell_box(cell, b0, b1, mix, depth):
    states = [_preprocess_box(cell.pre0, b0, depth), _preprocess_box(cell.pre1, b1, depth)]
    ordered = sorted(cell.edges, key=lambda e: (e.to_node, e.from_node))
    for i in range(cell.nodes):
        acc = None
        for e in ordered:
            if e.to_node != 2 + i:
                continue
            row = T.reshape(T.slice_axis(mix, 0, e.index, e.index + 1), (-1,))
            contrib = _mixed_edge_box(e.op, states[e.from_node], row, depth)
            acc = contrib if acc is None else _add_boxes(acc, contrib)
        states.append(acc)
    out = _concat_boxes(states[2:], axis=1)
    kernel, bias, conf = _fused_conv_bn_kernel(cell.proj, cell.proj_bn)
    return _conv_box(out, kernel, bias, conf)


def _discrete_cell_box(cell, b0, b1, depth):
    states = [_preprocess_box(cell.pre0, b0, depth), _preprocess_box(cell.pre1, b1, depth)]
    for i in range(cell.nodes):
        acc = None
        for node, frm, pick in cell.picks:
            if node != 2 + i:
                continue
            contrib = _op_box(pick.op, states[frm], depth)
            acc = contrib if acc is None else _add_boxes(acc, contrib)
        states.append(acc)
    out = _concat_boxes(states[2:], axis=1)
    kernel, bias, conf = _fused_conv_bn_kernel(cell.proj, cell.proj_bn)
    return _conv_box(out, kernel, bias, conf)


def _propagate_cells(net, arch, spec, depth):
    ball = _Ball(spec.x, spec.eps, spec.p)
    kernel, bias, conf = _fused_conv_bn_kernel(net.stem, net.stem_bn)
    stem_box = _conv_ball(ball, kernel, bias, conf)
    b0 = b1 = stem_box
    if isinstance(net, SuperNet):
        mix_normal = (arch if arch is not None else net.arch).mixing()
        mix_reduce = net.arch_reduce.mixing() if net.arch_reduce is not None else None
        for cell in net.cells:
            mix = mix_reduce if cell.reduction else mix_normal
            b0, b1 = b1, _cell_box(cell, b0, b1, mix, depth)
    else:
        for cell in net.cells:
            b0, b1 = b1, _discrete_cell_box(cell, b0, b1, depth)
    feats = _gap_box(b1)
    logit_box = _dense_box(feats, net.head.weight, net.head.bias)
    return PropagationResult(logit_box, net.head.weight, net.head.bias, feats)


def _propagate_flat(net, spec, depth):
    n = spec.x.shape[0]
    flat = T.reshape(spec.x, (n, -1))
    ball = _Ball(flat, spec.eps, spec.p)
    if isinstance(net, LinearModel):
        logit_box = _dense_ball(ball, net.fc.weight, net.fc.bias)
        return PropagationResult(logit_box, net.fc.weight, net.fc.bias, ball)
    if isinstance(net, MLP):
        h = _relu_box(_dense_ball(ball, net.fc1.weight, net.fc1.bias))
        logit_box = _dense_box(h, net.fc2.weight, net.fc2.bias)
        return PropagationResult(logit_box, net.fc2.weight, net.fc2.bias, h)
    raise ValueError(f"no propagation rule for model {type(net).__name__}")


def _propagate_chain(net, spec, depth):
    box = _Ball(spec.x, spec.eps, spec.p).to_box()
    for op in net.items:
        box = _relu_box(box) if op == "relu" else _op_box(op, box, depth)
    return PropagationResult(box)


def propagate_full(net, arch, spec: PerturbationSpec, depth=1) -> PropagationResult:
    if isinstance(net, (SuperNet, DiscreteNet)):
        return _propagate_cells(net, arch, spec, depth)
    if isinstance(net, (LinearModel, MLP)):
        return _propagate_flat(net, spec, depth)
    if hasattr(net, "items"):
        return _propagate_chain(net, spec, depth)
    raise ValueError(f"no propagation rule for model {type(net).__name__}")


def propagate_bounds(net, arch, spec: PerturbationSpec, depth=1) -> IntervalBounds:
    """Interval bounds on the logits over the whole perturbation ball."""
    return propagate_full(net, arch, spec, depth).logits


# ---------------------------------------------------------------------------
# margins and the differentiable metric
# ---------------------------------------------------------------------------

def _as_labels(labels, n):
    lab = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if lab.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {lab.shape}")
    return lab


def margin_lower_bound(bounds: IntervalBounds, labels, temperature=None):
    """lower(label) - max over other classes of upper, from plain logit boxes.

    With a temperature, the hard max is replaced by log-sum-exp/temperature
    (an upper bound of the max, so the margin stays sound).
    """
    lower, upper = bounds.lower, bounds.upper
    squeeze = lower.ndim == 1
    if squeeze:
        lower = T.reshape(lower, (1, -1))
        upper = T.reshape(upper, (1, -1))
    n, k = lower.shape
    if k < 2:
        raise ValueError("need at least two classes")
    lab = _as_labels(labels, n)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), lab] = 1.0
    own = T.sum_(T.mul(lower, Tensor(onehot)), axis=1)
    masked = T.add(upper, Tensor(-BIG_NEG * onehot))
    if temperature is None:
        rival = T.amax(masked, axis=1)
    else:
        rival = T.mul(T.logsumexp(T.mul(masked, temperature), axis=1), 1.0 / temperature)
    out = T.add(own, T.neg(rival))
    return T.reshape(out, ()) if squeeze and out.size == 1 else out


def propagate_margins(net, arch, spec, labels, temperature=None, depth=1):
    """Certified margin lower bounds with class differences fused into the
    final affine layer (exact for single-affine-layer models)."""
    prop = propagate_full(net, arch, spec, depth)
    if prop.head_w is None:
        return margin_lower_bound(prop.logits, labels, temperature)
    w, b, feed = prop.head_w, prop.head_b, prop.feed
    k = w.shape[0]
    if k < 2:
        raise ValueError("need at least two classes")
    n = spec.x.shape[0]
    lab = _as_labels(labels, n)
    # constant class-difference selectors: rows e_label - e_k for k != label
    sel = np.zeros((n, k - 1, k))
    for i, y in enumerate(lab):
        others = [c for c in range(k) if c != y]
        for m, c in enumerate(others):
            sel[i, m, y] = 1.0
            sel[i, m, c] = -1.0
    sel_t = Tensor(sel)
    d = T.einsum2("nmk,kf->nmf", sel_t, w)
    if isinstance(feed, _Ball):
        base = T.einsum2("nmf,nf->nm", d, feed.x)
        if feed.p == math.inf:
            radrow = T.sum_(T.abs_(d), axis=2)
        else:
            radrow = T.sqrt(T.sum_(T.mul(d, d), axis=2))
        rad = T.mul(radrow, feed.eps)
    else:
        mid, fr = feed.mid_rad()
        base = T.einsum2("nmf,nf->nm", d, mid)
        rad = T.einsum2("nmf,nf->nm", T.abs_(d), fr)
    if b is not None:
        base = T.add(base, T.einsum2("nmk,k->nm", sel_t, b))
    margins = T.add(base, T.neg(rad))     # [N, K-1] lower bounds on pairwise margins
    if temperature is None:
        worst = T.neg(T.amax(T.neg(margins), axis=1))
    else:
        worst = T.neg(T.mul(T.logsumexp(T.mul(margins, -temperature), axis=1),
                            1.0 / temperature))
    return worst


def cb_metric(net, arch, x, labels, eps, p=math.inf, temperature=50.0, depth=1):
    """Mean certified margin over the batch; differentiable in alpha and w."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[0] < 1:
        raise ValueError("batch must be non-empty")
    spec = PerturbationSpec(x, eps, p)
    margins = propagate_margins(net, arch, spec, labels, temperature, depth)
    return T.mean(margins)


def adapt_epsilon(eps_prev, bound_gap, margin_sign, step=0.005, eps_min=1e-4):
    """Grow the certification radius while the margin stays positive, else
    shrink it (clamped); `bound_gap` is logged by the caller but the declared
    rule keys on the margin sign."""
    if eps_prev <= 0:
        raise ValueError("eps_prev must be positive")
    if margin_sign > 0:
        return eps_prev + step
    return max(eps_min, eps_prev - step)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def _eval_logits(net, x, arch=None):
    with T.no_record():
        if isinstance(net, SuperNet):
            return net.forward(x, arch, training=False)
        return net.forward(x, training=False)


def _margin_at(net, arch, x, label, eps, p, depth):
    spec = PerturbationSpec(x, eps, p)
    with T.no_record():
        m = propagate_margins(net, arch, spec, [label], temperature=None, depth=depth)
    return float(m.data.reshape(-1)[0])


def certify_radius(net, x, label, p=math.inf, tol=1e-4, arch=None, depth=1,
                   hi_init=0.05, cap=64.0, max_iter=30):
    """Largest perturbation radius (within tol) at which the margin bound
    stays positive, found by geometric expansion plus bisection."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    p = _norm_p(p)
    pred = int(np.argmax(_eval_logits(net, x, arch).data[0]))
    if pred != int(label):
        return CertifiedRadius(0.0, p, tol)
    lo = 0.0
    hi = hi_init
    while _margin_at(net, arch, x, label, hi, p, depth) >= 0:
        lo = hi
        hi *= 2.0
        if hi > cap:
            return CertifiedRadius(cap, p, tol)
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if _margin_at(net, arch, x, label, mid, p, depth) >= 0:
            lo = mid
        else:
            hi = mid
    return CertifiedRadius(lo, p, tol)


def verification_report(net, dataset, p=math.inf, tol=1e-4, limit=None, arch=None, depth=1):
    """Per-example certified radii plus the mean (the verification artifact)."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    entries = []
    values = []
    for i in range(n):
        x = Tensor(dataset.images.data[i : i + 1])
        label = int(dataset.labels[i])
        pred = int(np.argmax(_eval_logits(net, x, arch).data[0]))
        radius = certify_radius(net, x, label, p, tol, arch=arch, depth=depth)
        entries.append({
            "example_id": i,
            "label": label,
            "predicted": pred,
            "certified_radius": radius.value,
            "norm": "inf" if radius.p == math.inf else "2",
            "tolerance": tol,
        })
        values.append(radius.value)
    return {
        "norm": "inf" if _norm_p(p) == math.inf else "2",
        "count": n,
        "mean_certified_radius": float(np.mean(values)) if values else 0.0,
        "examples": entries,
    }


# ---------------------------------------------------------------------------
# per-block linear bounds (the affine-sandwich form)
# ---------------------------------------------------------------------------

class LinMap:
    """Structured linear map z -> W (pre ⊙ z), with |coefficient| application."""

    def apply(self, z):
        raise NotImplementedError

    def apply_abs(self, z):
        raise NotImplementedError


class ZeroMap(LinMap):
    def __init__(self, out_shape_like):
        self.ref = out_shape_like

    def apply(self, z):
        return Tensor(np.zeros(np.broadcast_shapes(self.ref, z.shape[:1] + self.ref[1:])))

    apply_abs = apply


class DiagMap(LinMap):
    def __init__(self, diag: Tensor):
        self.diag = diag

    def apply(self, z):
        return T.mul(self.diag, z)

    def apply_abs(self, z):
        return T.mul(T.abs_(self.diag), z)


class ConvMap(LinMap):
    def __init__(self, kernel, conf, pre=None):
        self.kernel = kernel
        self.conf = conf
        self.pre = pre

    def _pre(self, z, use_abs):
        if self.pre is None:
            return z
        return T.mul(T.abs_(self.pre) if use_abs else self.pre, z)

    def apply(self, z):
        return T.conv2d(self._pre(z, False), self.kernel, None, **self.conf)

    def apply_abs(self, z):
        return T.conv2d(self._pre(z, True), T.abs_(self.kernel), None, **self.conf)


class AvgPoolMap(LinMap):
    def __init__(self, kernel, stride, padding):
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def apply(self, z):
        return T.avg_pool2d(z, self.kernel, self.stride, self.padding)

    apply_abs = apply   # all coefficients positive


class SumMap(LinMap):
    """Sum of maps whose coefficient supports are disjoint (so absolute values
    distribute across the parts)."""

    def __init__(self, parts):
        self.parts = parts

    def apply(self, z):
        out = None
        for part in self.parts:
            y = part.apply(z)
            out = y if out is None else T.add(out, y)
        return out

    def apply_abs(self, z):
        out = None
        for part in self.parts:
            y = part.apply_abs(z)
            out = y if out is None else T.add(out, y)
        return out


@dataclass
class LinearBounds:
    """Affine sandwich of a block over its input box:
    a_l·z + b_l <= block(z) <= a_u·z + b_u for all z in the box."""

    a_l: LinMap
    b_l: Tensor
    a_u: LinMap
    b_u: Tensor

    def lower_at(self, z):
        return T.add(self.a_l.apply(z), self.b_l)

    def upper_at(self, z):
        return T.add(self.a_u.apply(z), self.b_u)

    def concretize(self, box: IntervalBounds) -> IntervalBounds:
        mid, rad = box.mid_rad()
        lo = T.add(T.add(self.a_l.apply(mid), T.neg(self.a_l.apply_abs(rad))), self.b_l)
        hi = T.add(T.add(self.a_u.apply(mid), self.a_u.apply_abs(rad)), self.b_u)
        return IntervalBounds(lo, hi)


def _relu_envelope(box):
    """Three-case linear relaxation of ReLU on [l, u]: exact on pure-sign
    intervals; on crossing intervals the chord above and the line λz below,
    with λ = 1 when u >= |l| else 0."""
    l, u = box.lower.data, box.upper.data
    crossing = (l < 0) & (u > 0)
    pos = l >= 0
    denom = np.where(crossing, u - l, 1.0)
    a_hi = np.where(pos, 1.0, np.where(crossing, u / denom, 0.0))
    c_hi = np.where(crossing, -u * l / denom, 0.0)
    lam = np.where(crossing & (u >= -l), 1.0, 0.0)
    a_lo = np.where(pos, 1.0, lam)
    c_lo = np.zeros_like(l)
    return Tensor(a_lo), Tensor(c_lo), Tensor(a_hi), Tensor(c_hi)


def _split_kernel(kernel):
    pos = T.relu(kernel)
    negk = T.neg(T.relu(T.neg(kernel)))
    return pos, negk


def _stage_linear_bounds(stage: DilStage, box):
    a_lo, c_lo, a_hi, c_hi = _relu_envelope(box)
    kernel, bias, conf = _fused_stage_kernel(stage)
    kp, kn = _split_kernel(kernel)
    # lower: positive coefficients see the lower envelope, negative the upper
    bias4 = T.reshape(bias, (1, -1, 1, 1))
    b_l = T.add(T.add(T.conv2d(c_lo, kp, None, **conf), T.conv2d(c_hi, kn, None, **conf)), bias4)
    b_u = T.add(T.add(T.conv2d(c_hi, kp, None, **conf), T.conv2d(c_lo, kn, None, **conf)), bias4)
    a_l = SumMap([ConvMap(kp, conf, pre=a_lo), ConvMap(kn, conf, pre=a_hi)])
    a_u = SumMap([ConvMap(kp, conf, pre=a_hi), ConvMap(kn, conf, pre=a_lo)])
    return LinearBounds(a_l, b_l, a_u, b_u)


def block_bounds(block, input_interval: IntervalBounds) -> LinearBounds:
    """Sound affine sandwich for one building block given its input box.

    Affine blocks are exact (a_l == a_u); ReLU-led blocks use the standard
    three-case envelope; max pooling degrades to constant bounds, as does the
    two-stage separable conv (its interval concretization).
    """
    if isinstance(input_interval, tuple):
        input_interval = IntervalBounds(*input_interval)
    box = input_interval
    zeros_like = lambda t: Tensor(np.zeros_like(t.data))
    if block == "relu" or block is T.relu:
        a_lo, c_lo, a_hi, c_hi = _relu_envelope(box)
        return LinearBounds(DiagMap(a_lo), c_lo, DiagMap(a_hi), c_hi)
    if isinstance(block, IdentityOp):
        one = Tensor(np.ones_like(box.lower.data))
        z = zeros_like(box.lower)
        return LinearBounds(DiagMap(one), z, DiagMap(one), z)
    if isinstance(block, ZeroOp):
        z = zeros_like(box.lower)
        return LinearBounds(ZeroMap(box.lower.shape), z, ZeroMap(box.lower.shape), z)
    if isinstance(block, BatchNorm2d):
        scale, shift = _bn_affine_tensors(block)
        c = scale.shape[0]
        s4 = T.broadcast_to(T.reshape(scale, (1, c, 1, 1)), box.lower.shape)
        b4 = T.broadcast_to(T.reshape(shift, (1, c, 1, 1)), box.lower.shape)
        return LinearBounds(DiagMap(s4), b4, DiagMap(s4), b4)
    if isinstance(block, Conv2d):
        conf = dict(stride=block.stride, padding=block.padding, dilation=block.dilation)
        if block.groups != 1:
            raise ValueError("block_bounds expects fused kernels for grouped convs")
        amap = ConvMap(block.weight, conf)
        bias = block.bias
        ref = amap.apply(box.lower)
        b = zeros_like(ref) if bias is None else T.broadcast_to(
            T.reshape(bias, (1, -1, 1, 1)), ref.shape)
        return LinearBounds(amap, b, amap, b)
    if isinstance(block, PoolOp):
        pad = block.kernel // 2
        if block.kind == "avg":
            amap = AvgPoolMap(block.kernel, 1, pad)
            z = zeros_like(amap.apply(box.lower))
            return LinearBounds(amap, z, amap, z)
        lo = T.max_pool2d(box.lower, block.kernel, 1, pad)
        hi = T.max_pool2d(box.upper, block.kernel, 1, pad)
        return LinearBounds(ZeroMap(lo.shape), lo, ZeroMap(hi.shape), hi)
    if isinstance(block, DilConvOp):
        return _stage_linear_bounds(block.s1, box)
    if isinstance(block, DilStage):
        return _stage_linear_bounds(block, box)
    if isinstance(block, SepConvOp):
        out = _stage_box(block.s2, _stage_box(block.s1, box, depth=1), depth=1)
        return LinearBounds(ZeroMap(out.lower.shape), out.lower,
                            ZeroMap(out.upper.shape), out.upper)
    raise ValueError(f"unsupported block {block!r}")
