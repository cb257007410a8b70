"""Training and detection objectives.

Each loss is a pure numpy function returning ``(value, gradient)``; the
``*_op`` wrappers put them on the active tape so they compose with the model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import ContractError, Tensor

PROB_CLAMP = 1e-7


def _logsumexp_rows(S: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masked row-wise log-sum-exp and the matching softmax weights."""
    neg = np.where(mask, S, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(S - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(s > 0, e / s, 0.0)
        lse = np.where(s > 0, np.log(s) + m, -np.inf)
    return lse[:, 0], w


def supcon_loss(Z: np.ndarray, labels, tau: float, variant: str = "in") -> tuple[float, np.ndarray]:
    """Supervised contrastive loss summed over anchors, and d loss / d Z.

    ``variant="in"`` averages the positive-pair probabilities inside the log;
    ``variant="out"`` averages the log-probabilities instead. Anchors whose
    label occurs nowhere else in the batch contribute nothing.
    """
    Z = np.asarray(Z)
    labels = np.asarray(labels)
    if tau <= 0:
        raise ContractError(f"supcon_loss: temperature must be > 0, got {tau}")
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ContractError(f"supcon_loss: need an (N >= 2, D) batch, got shape {Z.shape}")
    if labels.shape != (Z.shape[0],):
        raise ContractError(f"supcon_loss: {labels.shape[0] if labels.ndim else 0} labels for {Z.shape[0]} rows")
    if variant not in ("in", "out"):
        raise ContractError(f"supcon_loss: variant must be 'in' or 'out', got {variant!r}")

    n = Z.shape[0]
    S = Z @ Z.T / tau
    not_self = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & not_self
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        raise ContractError("no positive pairs in batch")

    lse_all, r = _logsumexp_rows(S, not_self)
    if variant == "in":
        lse_pos, q = _logsumexp_rows(S, pos)
        per_anchor = np.where(anchors, -(lse_pos - np.log(np.maximum(n_pos, 1))) + lse_all, 0.0)
        G = r - q
    else:
        mean_pos = np.where(anchors, (S * pos).sum(axis=1) / np.maximum(n_pos, 1), 0.0)
        per_anchor = np.where(anchors, lse_all - mean_pos, 0.0)
        G = r - pos / np.maximum(n_pos, 1)[:, None]
    G = G * anchors[:, None]
    dZ = (G + G.T) @ Z / tau
    return float(per_anchor.sum()), dZ


def focal_loss(y, p_hat, gamma: float = 2.0, alpha: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean binary focal loss and d loss / d p_hat.

    Per sample: ``-alpha*y*(1-p)^gamma*log(p) - (1-y)*p^gamma*log(1-p)`` with
    ``p`` clamped to [1e-7, 1-1e-7]; the gradient is zero where clamping bites.
    """
    if gamma < 0:
        raise ContractError(f"focal_loss: gamma must be >= 0, got {gamma}")
    if alpha <= 0:
        raise ContractError(f"focal_loss: alpha must be > 0, got {alpha}")
    y = np.asarray(y, dtype=np.float64)
    p_raw = np.asarray(p_hat, dtype=np.float64)
    if y.shape != p_raw.shape or y.ndim != 1 or y.size == 0:
        raise ContractError(f"focal_loss: labels {y.shape} and probabilities {p_raw.shape} must be equal-length vectors")
    p = np.clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = y.size
    one_m = 1.0 - p
    pos_w = one_m ** gamma
    neg_w = p ** gamma
    loss = -alpha * y * pos_w * np.log(p) - (1.0 - y) * neg_w * np.log(one_m)
    # derivatives of each term w.r.t. p
    d_pos = -alpha * y * (pos_w / p - gamma * one_m ** (gamma - 1) * np.log(p)) if gamma else -alpha * y / p
    if gamma:
        d_neg = -(1.0 - y) * (gamma * p ** (gamma - 1) * np.log(one_m) - neg_w / one_m)
    else:
        d_neg = (1.0 - y) / one_m
    grad = (d_pos + d_neg) / n
    grad = np.where((p_raw > PROB_CLAMP) & (p_raw < 1.0 - PROB_CLAMP), grad, 0.0)
    return float(loss.mean()), grad


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the true class, and d loss / d logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ContractError(f"cross_entropy: need (N, C >= 2) logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ContractError(f"cross_entropy: {labels.size} labels for {logits.shape[0]} rows")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"cross_entropy: labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def smooth_l1(d):
    """0.5*d^2 where |d| < 1, else |d| - 0.5. Works on scalars and arrays."""
    d = np.asarray(d, dtype=np.float64)
    a = np.abs(d)
    out = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(d):
    d = np.asarray(d, dtype=np.float64)
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


# ---------------------------------------------------------------- detection

def encode_boxes(gt: np.ndarray, default: np.ndarray) -> np.ndarray:
    """SSD offsets of (cx, cy, w, h) ground truth relative to default boxes."""
    gt = np.asarray(gt, dtype=np.float64)
    default = np.asarray(default, dtype=np.float64)
    return np.stack([
        (gt[..., 0] - default[..., 0]) / default[..., 2],
        (gt[..., 1] - default[..., 1]) / default[..., 3],
        np.log(gt[..., 2] / default[..., 2]),
        np.log(gt[..., 3] / default[..., 3]),
    ], axis=-1)


@dataclass
class DetectionBatch:
    """Per-image matched detection targets.

    ``match[i]`` is the index of the ground-truth box that default box ``i``
    is matched to, or -1 for background. Class 0 of ``logits`` is
    background; ground-truth classes are >= 1. Together ``match`` and
    ``gt_classes`` carry the x_ij^k indicator.
    """

    default_boxes: np.ndarray  # (M, 4) cx, cy, w, h
    logits: np.ndarray  # (M, K)
    loc: np.ndarray  # (M, 4) predicted offsets
    gt_boxes: np.ndarray  # (G, 4)
    gt_classes: np.ndarray  # (G,)
    match: np.ndarray  # (M,)
    alpha: float = 1.0

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.match) >= 0)

    @property
    def n_matched(self) -> int:
        return int(self.positives.size)

    def validate(self) -> None:
        match = np.asarray(self.match)
        g = len(self.gt_boxes)
        bad = np.flatnonzero(match >= g)
        if bad.size:
            raise ContractError(f"default box {int(bad[0])} is positive but has no ground-truth partner (index {int(match[bad[0]])}, {g} boxes)")
        if self.alpha < 0:
            raise ContractError(f"detection loss weight alpha must be >= 0, got {self.alpha}")
        k = self.logits.shape[1]
        if g and (np.min(self.gt_classes) < 1 or np.max(self.gt_classes) >= k):
            raise ContractError(f"ground-truth classes must lie in [1, {k})")

    def targets(self) -> np.ndarray:
        """Encoded ground truth for every positive default box, (|Pos|, 4)."""
        pos = self.positives
        return encode_boxes(np.asarray(self.gt_boxes)[np.asarray(self.match)[pos]],
                            np.asarray(self.default_boxes)[pos])


def localization_loss(batch: DetectionBatch) -> tuple[float, np.ndarray]:
    """Smooth-L1 over the four offsets of every positive match; grad w.r.t. ``loc``."""
    batch.validate()
    grad = np.zeros_like(np.asarray(batch.loc, dtype=np.float64))
    pos = batch.positives
    if pos.size == 0:
        return 0.0, grad
    d = np.asarray(batch.loc, dtype=np.float64)[pos] - batch.targets()
    grad[pos] = smooth_l1_grad(d)
    return float(smooth_l1(d).sum()), grad


def confidence_loss(batch: DetectionBatch) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy summed over all provided default boxes."""
    batch.validate()
    logits = np.asarray(batch.logits, dtype=np.float64)
    match = np.asarray(batch.match)
    m = logits.shape[0]
    if m == 0:
        return 0.0, np.zeros_like(logits)
    target = np.zeros(m, dtype=int)
    pos = match >= 0
    target[pos] = np.asarray(batch.gt_classes)[match[pos]]
    mean_loss, mean_grad = cross_entropy(logits, target)
    return mean_loss * m, mean_grad * m


def combine_detection_loss(l_conf: float, l_loc: float, n: int, alpha: float = 1.0) -> float:
    if alpha < 0:
        raise ContractError(f"detection loss weight alpha must be >= 0, got {alpha}")
    if n == 0:
        return 0.0
    return (l_conf + alpha * l_loc) / n


def detection_loss(batch: DetectionBatch) -> tuple[float, dict[str, np.ndarray]]:
    """(L_conf + alpha*L_loc) / N, exactly 0 when nothing matched.

    Returns the value and gradients keyed ``"logits"`` and ``"loc"``.
    """
    batch.validate()
    n = batch.n_matched
    if n == 0:
        return 0.0, {"logits": np.zeros_like(np.asarray(batch.logits, dtype=np.float64)),
                     "loc": np.zeros_like(np.asarray(batch.loc, dtype=np.float64))}
    l_conf, g_conf = confidence_loss(batch)
    l_loc, g_loc = localization_loss(batch)
    value = combine_detection_loss(l_conf, l_loc, n, batch.alpha)
    return value, {"logits": g_conf / n, "loc": batch.alpha * g_loc / n}


# ---------------------------------------------------------------- tape wrappers

def supcon_op(z: Tensor, labels, tau: float, variant: str = "in") -> Tensor:
    value, grad = supcon_loss(z.data, labels, tau, variant)
    return ops.scalar_loss(z, value, grad.astype(z.dtype), "supcon")


def cross_entropy_op(logits: Tensor, labels) -> Tensor:
    value, grad = cross_entropy(logits.data, labels)
    return ops.scalar_loss(logits, value, grad.astype(logits.dtype), "cross_entropy")


def focal_op(p_hat: Tensor, y, gamma: float, alpha: float) -> Tensor:
    value, grad = focal_loss(y, p_hat.data, gamma, alpha)
    return ops.scalar_loss(p_hat, value, grad.astype(p_hat.dtype), "focal")
