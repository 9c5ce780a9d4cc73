"""Jacobian-norm robustness metric.

The metric is the negated mean of per-row Jacobian q-norms scaled by the
perturbation budget: -(delta/N) * sum_i (1/K) * sum_k ||J_k(x_i)||_q, where q
is the Hölder conjugate of the attack norm p.  Rows come from seeded backward
passes; a random-projection estimator approximates the Frobenius variant with
far fewer passes.  Gradients with respect to architecture logits and weights
come from differentiating through the recorded backward computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cells import SuperNet
from .seeding import seed_stream
from .tensor import Tensor

EXACT_ROWS_CAP = 32

__all__ = [
    "JacNormConfig",
    "JacobianEstimate",
    "exact_jacobian",
    "jac_metric",
    "frobenius_estimate",
    "taylor_gap_check",
    "default_delta",
    "EXACT_ROWS_CAP",
]


def default_delta(p):
    """Budget aligned with the attack threat model: 8/255 for l-inf, 0.5 for l2."""
    return 8.0 / 255.0 if p == math.inf else 0.5


@dataclass
class JacNormConfig:
    p: float = math.inf                  # attack norm; q is its Hölder conjugate
    delta: float | None = None
    estimator: str = "exact_rows"        # or "random_projection"
    n_proj: int = 1
    seed: int = 0

    def __post_init__(self):
        self.p = math.inf if self.p in (math.inf, np.inf, "inf") else float(self.p)
        if self.p not in (2.0, math.inf):
            raise ValueError("attack norm p must be 2 or inf")
        if self.delta is None:
            self.delta = default_delta(self.p)
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.estimator not in ("exact_rows", "random_projection"):
            raise ValueError(f"unknown estimator '{self.estimator}'")
        if self.n_proj < 1:
            raise ValueError("n_proj must be >= 1")

    @property
    def q(self):
        return 2.0 if self.p == 2.0 else 1.0


@dataclass
class JacobianEstimate:
    per_example: np.ndarray     # (1/K) * sum_k ||J_k(x_i)||_q per example
    batch_mean: float
    estimator: str
    meta: dict = field(default_factory=dict)


def _forward(net, x, arch=None, training=False):
    if isinstance(net, SuperNet):
        return net.forward(x, arch, training)
    return net.forward(x, training)


def _jacobian_rows(net, arch, x, create_graph, tape):
    """All K Jacobian rows for each example via one replicated backward pass.

    Returns a tensor [N, K, D] where D is the flattened input size.
    """
    n = x.shape[0]
    d = int(np.prod(x.shape[1:]))
    with T.no_record():
        k = _forward(net, Tensor(x.data[:1]), arch).shape[1]
    xrep = Tensor(np.repeat(x.data, k, axis=0))
    xrep.requires_grad = True
    logits = _forward(net, xrep, arch)
    seed = np.tile(np.eye(k), (n, 1))
    (gx,) = tape.gradients(logits, [xrep], seed=Tensor(seed), create_graph=create_graph)
    return T.reshape(gx, (n, k, d)), k


def exact_jacobian(net, x, arch=None, cap=EXACT_ROWS_CAP):
    """Jacobian matrix [K, D] of the logits at a single input, one backward
    pass per output coordinate (batched); K above `cap` is refused."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3 or x.ndim == 1:
        x = T.reshape(x, (1,) + x.shape)
    with T.no_record():
        k = _forward(net, x, arch).shape[1]
    if k > cap:
        raise ValueError(
            f"output dimension {k} exceeds exact-mode cap {cap}; use the estimator")
    with T.Tape() as tape:
        rows, _ = _jacobian_rows(net, arch, x, create_graph=False, tape=tape)
    return rows.data[0]


def _row_norms(rows, q):
    if q == 2.0:
        return T.sqrt(T.sum_(T.mul(rows, rows), axis=2))
    return T.sum_(T.abs_(rows), axis=2)


def _frobenius_sq(net, arch, x, n_proj, rng, create_graph, tape):
    """Per-example mean of K*||v^T J||^2 over unit-sphere projections v."""
    n = x.shape[0]
    with T.no_record():
        k = _forward(net, Tensor(x.data[:1]), arch).shape[1]
    v = rng.standard_normal((n, n_proj, k))
    v /= np.linalg.norm(v, axis=2, keepdims=True)
    xrep = Tensor(np.repeat(x.data, n_proj, axis=0))
    xrep.requires_grad = True
    logits = _forward(net, xrep, arch)
    (gx,) = tape.gradients(logits, [xrep], seed=Tensor(v.reshape(n * n_proj, k)),
                           create_graph=create_graph)
    gx = T.reshape(gx, (n, n_proj, -1))
    sq = T.sum_(T.mul(gx, gx), axis=2)
    return T.mul(T.mean(sq, axis=1), float(k)), k


def frobenius_estimate(net, x, n_proj, rng=None, arch=None, seed=0):
    """Estimate of ||J(x)||_F via random projections.

    K * E_v ||v^T J||_2^2 over v uniform on the unit sphere equals ||J||_F^2;
    the estimate is the square root of the n_proj-sample mean.
    """
    if rng is None:
        rng = seed_stream(seed, "projections")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3 or x.ndim == 1:
        x = T.reshape(x, (1,) + x.shape)
    with T.Tape() as tape:
        sq, _ = _frobenius_sq(net, arch, x, n_proj, rng, create_graph=False, tape=tape)
    return float(np.sqrt(sq.data[0]))


def jac_metric(net, arch, x, cfg: JacNormConfig):
    """The Jacobian norm bound of the batch (higher is more robust);
    differentiable in alpha and w when called under a recording tape."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[0] < 1:
        raise ValueError("batch must be non-empty")
    with T.ambient_tape() as (tape, nested):
        if cfg.estimator == "exact_rows":
            rows, k = _jacobian_rows(net, arch, x, create_graph=nested, tape=tape)
            if k > EXACT_ROWS_CAP:
                raise ValueError(
                    f"output dimension {k} exceeds exact-mode cap {EXACT_ROWS_CAP}")
            per_ex = T.mul(T.sum_(_row_norms(rows, cfg.q), axis=1), 1.0 / k)
        else:
            if cfg.q != 2.0:
                raise ValueError("random_projection estimates the Frobenius (q=2) variant")
            rng = seed_stream(cfg.seed, "projections")
            sq, k = _frobenius_sq(net, arch, x, cfg.n_proj, rng, create_graph=nested,
                                  tape=tape)
            per_ex = T.mul(T.sqrt(sq), 1.0 / k)
        return T.mul(T.mean(per_ex), -cfg.delta)


def jacobian_estimate(net, arch, x, cfg: JacNormConfig):
    """Value-level summary of the per-example row-norm averages."""
    with T.no_record():
        value = jac_metric(net, arch, x, cfg)
        n = x.shape[0] if hasattr(x, "shape") else len(x)
        per = -value.item() / cfg.delta
    return JacobianEstimate(
        per_example=np.full(n, per),
        batch_mean=per,
        estimator=cfg.estimator,
        meta={"q": cfg.q, "delta": cfg.delta, "n_proj": cfg.n_proj},
    )


def taylor_gap_check(net, x, direction, delta, p=math.inf, arch=None):
    """Per-output ratio |f_k(x+δe) - f_k(x)| / (δ ||J_k||_q) for a unit-p-norm
    direction e; ratios near or below one confirm the Hölder/Taylor chain."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3 or x.ndim == 1:
        x = T.reshape(x, (1,) + x.shape)
    e = np.asarray(direction, dtype=np.float64).reshape(x.shape[1:])
    norm = np.abs(e).max() if p == math.inf else np.sqrt((e**2).sum())
    if norm <= 0:
        raise ValueError("direction must be nonzero")
    e = e / norm
    q = 2.0 if p == 2 else 1.0
    jac = exact_jacobian(net, x, arch)
    row_norm = np.abs(jac).sum(axis=1) if q == 1.0 else np.sqrt((jac**2).sum(axis=1))
    with T.no_record():
        f0 = _forward(net, x, arch).data[0]
        f1 = _forward(net, Tensor(x.data + delta * e[None]), arch).data[0]
    shift = np.abs(f1 - f0)
    denom = delta * row_norm
    ratios = np.where(denom > 0, shift / np.maximum(denom, 1e-300), np.where(shift > 0, np.inf, 0.0))
    return ratios
