"""White-box untargeted attacks (FGSM, PGD, C&W-l2) and robust-accuracy reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cells import SuperNet
from .optim import Adam
from .seeding import seed_stream
from .tensor import Tensor

__all__ = [
    "AttackConfig",
    "RobustnessReport",
    "fgsm",
    "pgd",
    "cw_l2",
    "run_attack",
    "evaluate_robust_accuracy",
]


@dataclass
class AttackConfig:
    kind: str                              # fgsm | pgd | cw_l2
    eps: float = 0.03
    step: float = 2.0 / 255.0
    iters: int = 10
    p: float = math.inf
    random_start: bool = True
    c: float = 1.0                         # cw_l2 margin weight
    lr: float = 0.01                       # cw_l2 Adam step
    kappa: float = 0.0
    seed: int = 0
    clamp: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "cw_l2"):
            raise ValueError(f"unknown attack kind '{self.kind}'")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.kind != "fgsm" and self.iters < 1:
            raise ValueError("iterative attacks need iters >= 1")
        if self.kind == "pgd" and self.step <= 0:
            raise ValueError("pgd needs a positive step size")
        self.p = math.inf if self.p in (math.inf, np.inf, "inf") else float(self.p)

    def label(self):
        if self.kind == "pgd":
            return f"pgd{self.iters}_eps{self.eps:g}_p{'inf' if self.p == math.inf else '2'}"
        if self.kind == "fgsm":
            return f"fgsm_eps{self.eps:g}"
        return f"cw_l2_{self.iters}it"


def _forward(model, x, arch=None, training=False):
    if isinstance(model, SuperNet):
        return model.forward(x, arch, training)
    return model.forward(x, training)


def _input_grad(model, x_np, labels, arch=None):
    x = Tensor(x_np)
    x.requires_grad = True
    with T.Tape() as tape:
        loss = T.cross_entropy(_forward(model, x, arch), labels)
        (g,) = tape.gradients(loss, [x])
    return g.data


def fgsm(model, x, labels, eps, clamp=(0.0, 1.0), arch=None):
    """One signed-gradient ascent step on the loss, then clamp to the pixel range."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    g = _input_grad(model, x.data, labels, arch)
    adv = np.clip(x.data + eps * np.sign(g), clamp[0], clamp[1])
    return Tensor(adv)


def _project(delta, eps, p):
    if p == math.inf:
        return np.clip(delta, -eps, eps)
    flat = delta.reshape(delta.shape[0], -1)
    norms = np.sqrt((flat**2).sum(axis=1, keepdims=True))
    scale = np.minimum(1.0, eps / np.maximum(norms, 1e-30))
    return (flat * scale).reshape(delta.shape)


def pgd(model, x, labels, cfg: AttackConfig, arch=None):
    """Iterated ascent with projection onto the p-ball and the pixel box."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x0 = x.data
    lo, hi = cfg.clamp
    if cfg.random_start and cfg.eps > 0:
        rng = seed_stream(cfg.seed, "pgd-start")
        if cfg.p == math.inf:
            delta = rng.uniform(-cfg.eps, cfg.eps, size=x0.shape)
        else:
            g = rng.standard_normal(x0.shape)
            flat = g.reshape(g.shape[0], -1)
            flat /= np.maximum(np.sqrt((flat**2).sum(axis=1, keepdims=True)), 1e-30)
            r = rng.uniform(0, 1, (x0.shape[0], 1)) ** (1.0 / flat.shape[1])
            delta = (flat * r * cfg.eps).reshape(x0.shape)
        delta = np.clip(x0 + delta, lo, hi) - x0
    else:
        delta = np.zeros_like(x0)
    for _ in range(cfg.iters):
        g = _input_grad(model, x0 + delta, labels, arch)
        if cfg.p == math.inf:
            delta = delta + cfg.step * np.sign(g)
        else:
            flat = g.reshape(g.shape[0], -1)
            norms = np.maximum(np.sqrt((flat**2).sum(axis=1, keepdims=True)), 1e-30)
            delta = delta + cfg.step * (flat / norms).reshape(g.shape)
        delta = _project(delta, cfg.eps, cfg.p)
        delta = np.clip(x0 + delta, lo, hi) - x0
    return Tensor(np.clip(x0 + delta, lo, hi))


def cw_l2(model, x, labels, cfg: AttackConfig, arch=None):
    """Margin-plus-norm minimization in tanh space; returns the smallest
    successful perturbation found (else the final iterate) and success flags."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x0 = x.data
    n = x0.shape[0]
    labels = np.asarray(labels, dtype=np.intp)
    squeeze = 1.0 - 1e-6
    w = Tensor(np.arctanh((2.0 * np.clip(x0, 1e-9, 1 - 1e-9) - 1.0) * squeeze))
    w.requires_grad = True
    opt = Adam(cfg.lr)

    best_adv = x0.copy()
    best_norm = np.full(n, np.inf)
    with T.no_record():
        clean_pred = np.argmax(_forward(model, x, arch).data, axis=1)
    success = clean_pred != labels
    best_norm[success] = 0.0

    onehot = np.zeros((n, int(_num_classes(model, x, arch))))
    onehot[np.arange(n), labels] = 1.0
    oh = Tensor(onehot)

    for _ in range(cfg.iters):
        with T.Tape() as tape:
            adv = T.mul(T.add(T.tanh(w), 1.0), 0.5)
            delta = T.add(adv, T.neg(Tensor(x0)))
            sq = T.sum_(T.mul(delta, delta), axis=tuple(range(1, x0.ndim)))
            logits = _forward(model, adv, arch)
            own = T.sum_(T.mul(logits, oh), axis=1)
            rival = T.amax(T.add(logits, Tensor(-1e30 * onehot)), axis=1)
            margin = T.add(own, T.neg(rival))
            hinge = T.maximum(margin, Tensor(np.full(n, -cfg.kappa)))
            loss = T.sum_(T.add(sq, T.mul(hinge, cfg.c)))
            (gw,) = tape.gradients(loss, [w])
            adv_np = adv.data
            logits_np = logits.data
        pred = np.argmax(logits_np, axis=1)
        norms = np.sqrt(((adv_np - x0).reshape(n, -1) ** 2).sum(axis=1))
        hit = (pred != labels) & (norms < best_norm)
        best_adv[hit] = adv_np[hit]
        best_norm[hit] = norms[hit]
        success |= pred != labels
        opt.step([w], [gw])
    fallback = ~np.isfinite(best_norm)
    if fallback.any():
        with T.no_record():
            adv_np = (np.tanh(w.data) + 1.0) * 0.5
        best_adv[fallback] = adv_np[fallback]
    return Tensor(best_adv), success


def _num_classes(model, x, arch):
    with T.no_record():
        return _forward(model, Tensor(x.data[:1]), arch).shape[1]


def run_attack(model, x, labels, cfg: AttackConfig, arch=None):
    """Dispatch one attack; returns adversarial inputs (success flags for C&W
    come from re-evaluating the returned examples, same as other attacks)."""
    if cfg.kind == "fgsm":
        return fgsm(model, x, labels, cfg.eps, cfg.clamp, arch)
    if cfg.kind == "pgd":
        return pgd(model, x, labels, cfg, arch)
    adv, _ = cw_l2(model, x, labels, cfg, arch)
    return adv


@dataclass
class RobustnessReport:
    clean_accuracy: float
    attacks: list = field(default_factory=list)   # {label, accuracy, config, success}
    count: int = 0

    def to_json(self):
        payload = {
            "clean_accuracy": self.clean_accuracy,
            "count": self.count,
            "attacks": [
                {k: v for k, v in entry.items() if k != "success"}
                | {"success_flags": [bool(s) for s in entry["success"]]}
                for entry in self.attacks
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def accuracy_for(self, label):
        for entry in self.attacks:
            if entry["label"] == label:
                return entry["accuracy"]
        raise KeyError(label)


def evaluate_robust_accuracy(model, dataset, configs, arch=None, batch=64):
    """Fraction of examples still classified correctly after each attack."""
    images = dataset.images.data
    labels = dataset.labels
    n = len(labels)
    with T.no_record():
        preds = []
        for s in range(0, n, batch):
            logits = _forward(model, Tensor(images[s : s + batch]), arch)
            preds.append(np.argmax(logits.data, axis=1))
    clean_pred = np.concatenate(preds)
    clean_acc = float((clean_pred == labels).mean())
    report = RobustnessReport(clean_accuracy=clean_acc, count=n)
    for cfg in configs:
        flags = np.zeros(n, dtype=bool)
        for s in range(0, n, batch):
            xb = Tensor(images[s : s + batch])
            yb = labels[s : s + batch]
            adv = run_attack(model, xb, yb, cfg, arch)
            with T.no_record():
                pred = np.argmax(_forward(model, adv, arch).data, axis=1)
            flags[s : s + batch] = pred != yb
        report.attacks.append({
            "label": cfg.label(),
            "kind": cfg.kind,
            "accuracy": float((~flags).mean()),
            "config": {
                "eps": cfg.eps, "step": cfg.step, "iters": cfg.iters,
                "p": "inf" if cfg.p == math.inf else cfg.p,
                "random_start": cfg.random_start, "c": cfg.c, "lr": cfg.lr,
                "kappa": cfg.kappa, "seed": cfg.seed,
            },
            "success": flags,
        })
    return report
