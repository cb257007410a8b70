"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import ContractError, ParamSet, Tape, Tensor, backward


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes.

    Scaling by the array-wide magnitude rather than per element keeps entries
    whose true gradient is ~0 from producing meaningless ratios.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbing ``x`` in place."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_check(forward: Callable[[ParamSet, object], Tensor], params: ParamSet, batch,
               tolerance: float = 1e-6, h: float = 1e-5,
               analytic: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare tape gradients of ``forward(params, batch)`` against central differences.

    ``forward`` must be deterministic (dropout off). ``analytic`` overrides the
    tape gradients, which is how fault injection is tested.
    """
    def value() -> float:
        return float(forward(params, batch).data)

    v0, v1 = value(), value()
    if v0 != v1:
        raise ContractError(f"grad_check: forward is not deterministic ({v0!r} != {v1!r})")

    if analytic is None:
        trainable = [n for n in params if params.is_trainable(n)]
        if trainable:
            with Tape() as tape:
                loss = forward(params, batch)
            analytic = backward(tape, loss, params)
        else:
            analytic = {}

    report = GradCheckReport(tolerance)
    for name in params:
        if not params.is_trainable(name):
            continue
        num = numeric_gradient(value, params[name].data, h)
        report.errors[name] = relative_error(analytic[name], num)
    return report
