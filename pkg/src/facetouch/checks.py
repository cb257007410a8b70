"""Finite-difference sweep over every layer and every loss, for the CLI and the acceptance suite."""
from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tape, Tensor, backward
from .gradcheck import numeric_gradient, relative_error
from .losses import (
    DetectionBatch, cross_entropy, detection_loss, focal_loss, smooth_l1, smooth_l1_grad, supcon_loss,
)
from .rng import make_rng


def _layer_error(fn, inputs, seed) -> float:
    """Max relative error over all inputs of ``sum(fn(*inputs) * probe)``."""
    tensors = [Tensor(x.copy(), requires_grad=True, name=f"in{i}") for i, x in enumerate(inputs)]
    probe = make_rng(seed, "probe").standard_normal(fn(*tensors).shape)
    with Tape() as tape:
        loss = ops.total(ops.mul(fn(*tensors), Tensor(probe)))
    grads = backward(tape, loss)
    scalar = lambda: float((fn(*tensors).data * probe).sum())  # noqa: E731
    return max(relative_error(grads[t.name], numeric_gradient(scalar, t.data)) for t in tensors)


def _fixed_dropout(seed):
    rng = make_rng(seed, "drop")
    state = rng.bit_generator.state

    def f(x):
        rng.bit_generator.state = state
        return ops.dropout(x, 0.3, rng, True)
    return f


def layer_cases(seed: int) -> dict:
    r = make_rng(seed, "layers")
    n = r.standard_normal
    return {
        "dense": (ops.dense, [n((3, 4)), n((4, 5)), n(5)]),
        "conv2d": (ops.conv2d, [n((2, 4, 4, 2)), n((3, 3, 2, 3)), n(3)]),
        "conv2d_stride2": (lambda x, w, b: ops.conv2d(x, w, b, 2), [n((2, 6, 6, 2)), n((3, 3, 2, 3)), n(3)]),
        "relu": (ops.relu, [n((4, 6))]),
        "maxpool2": (ops.maxpool2, [n((2, 4, 6, 3))]),
        "global_avg_pool": (ops.global_avg_pool, [n((2, 3, 3, 4))]),
        "dropout": (_fixed_dropout(seed), [n((4, 5))]),
        "softmax": (ops.softmax, [n((3, 5))]),
        "l2_normalize": (ops.l2_normalize, [n((3, 5))]),
    }


def _loss_errors(seed: int) -> dict[str, float]:
    r = make_rng(seed, "losses")
    out = {}
    Z = r.standard_normal((8, 4))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    labels = np.array([0, 0, 1, 1, 0, 1, 1, 0])
    for v in ("in", "out"):
        _, g = supcon_loss(Z, labels, 0.5, v)
        out[f"supcon_{v}"] = relative_error(g, numeric_gradient(lambda: supcon_loss(Z, labels, 0.5, v)[0], Z))

    y = r.integers(0, 2, 12)
    p = r.uniform(0.05, 0.95, 12)
    gamma, alpha = r.uniform(0, 3), r.uniform(0.25, 2)
    _, g = focal_loss(y, p, gamma, alpha)
    out["focal"] = relative_error(g, numeric_gradient(lambda: focal_loss(y, p, gamma, alpha)[0], p))

    logits, cls = r.standard_normal((6, 3)), r.integers(0, 3, 6)
    _, g = cross_entropy(logits, cls)
    out["cross_entropy"] = relative_error(g, numeric_gradient(lambda: cross_entropy(logits, cls)[0], logits))

    d = r.uniform(-3, 3, 10)
    d = d[np.abs(np.abs(d) - 1) > 1e-3]  # keep away from the kink
    out["smooth_l1"] = relative_error(smooth_l1_grad(d), numeric_gradient(lambda: float(smooth_l1(d).sum()), d))

    m, k, gt = 6, 3, 2
    default = np.c_[r.uniform(0.2, 0.8, (m, 2)), r.uniform(0.1, 0.4, (m, 2))]
    match = r.integers(-1, gt, m)
    match[0] = 0
    b = DetectionBatch(default, r.standard_normal((m, k)), r.standard_normal((m, 4)),
                       np.c_[r.uniform(0.2, 0.8, (gt, 2)), r.uniform(0.1, 0.4, (gt, 2))],
                       r.integers(1, k, gt), match, alpha=float(r.uniform(0.5, 2)))
    _, grads = detection_loss(b)
    out["detection"] = max(relative_error(grads[key], numeric_gradient(lambda: detection_loss(b)[0], getattr(b, key)))
                           for key in ("logits", "loc"))
    return out


def check_suite(seeds=range(20)) -> dict[str, float]:
    """Worst relative error per layer and per loss across ``seeds`` (float64)."""
    worst: dict[str, float] = {}
    for s in seeds:
        errs = {f"layer:{k}": _layer_error(fn, xs, s) for k, (fn, xs) in layer_cases(s).items()}
        errs.update({f"loss:{k}": v for k, v in _loss_errors(s).items()})
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst
