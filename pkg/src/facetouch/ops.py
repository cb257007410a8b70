"""Differentiable primitives. Activations are NHWC for images, (N, D) for vectors."""
from __future__ import annotations

import numpy as np
from . import _kernels
from .autograd import ContractError, Tensor, record


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def square(a: Tensor) -> Tensor:
    return record("square", (a,), a.data ** 2, lambda g: (2.0 * a.data * g,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    return record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return record("mean", (a,), np.asarray(a.data.mean()),
                  lambda g: (np.full_like(a.data, float(g) / n),))


def take_column(x: Tensor, j: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= j < x.shape[1]:
        raise ContractError(f"take_column: column {j} out of range for shape {x.shape}")

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[:, j] = g
        return (dx,)

    return record("take_column", (x,), x.data[:, j].copy(), bw)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ContractError(f"concat_rows: trailing shape mismatch {a.shape} vs {b.shape}")
    n = a.shape[0]
    return record("concat_rows", (a, b), np.concatenate([a.data, b.data], axis=0),
                  lambda g: (g[:n], g[n:]))


def scalar_loss(x: Tensor, value: float, grad: np.ndarray, op: str = "loss") -> Tensor:
    """Attach a precomputed scalar ``value`` with known ``d value / d x``."""
    if grad.shape != x.shape:
        raise ContractError(f"{op}: gradient shape {grad.shape} != input shape {x.shape}")
    return record(op, (x,), np.asarray(value, dtype=x.dtype), lambda g: (float(g) * grad,))


# ---------------------------------------------------------------- layers

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), np.maximum(x.data, 0), lambda g: (g * mask,))


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ContractError(f"dense: incompatible shapes x{x.shape} W{W.shape} b{b.shape}")
    out = x.data @ W.data + b.data
    return record("dense", (x, W, b), out,
                  lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)))


def conv2d(x: Tensor, W: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Convolution with zero "same" padding (k//2 each side); W is (k, k, C_in, C_out).

    With stride s the output is ceil(H/s) x ceil(W/s).
    """
    if x.data.ndim != 4 or W.data.ndim != 4:
        raise ContractError(f"conv2d: expected NHWC input and (k,k,Cin,Cout) kernel, got x{x.shape} W{W.shape}")
    k, k2, cin, cout = W.shape
    if k != k2 or k % 2 == 0 or x.shape[3] != cin or b.shape != (cout,) or stride < 1:
        raise ContractError(f"conv2d: incompatible shapes x{x.shape} W{W.shape} b{b.shape} stride {stride}")
    n, h, w, _ = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    ho, wo = _kernels.out_size(h + 2 * p, k, stride), _kernels.out_size(w + 2 * p, k, stride)
    cols = _kernels.im2col(xp, k, stride)
    Wm = W.data.reshape(k * k * cin, cout)
    out = cols @ Wm
    out += b.data
    out = out.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        dW = (cols.T @ g2).reshape(W.shape)
        # gemv is far faster than an axis-0 reduce over few columns
        db = np.ones(g2.shape[0], dtype=g2.dtype) @ g2
        if not x.requires_grad:
            return None, dW, db
        dxp = _kernels.col2im(g2 @ Wm.T, xp.shape, k, stride)
        return dxp[:, p:p + h, p:p + w, :], dW, db

    return record("conv2d", (x, W, b), out, bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Ties send the gradient to the first maximum
    in row-major window order."""
    if x.data.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ContractError(f"maxpool2: needs NHWC input with even H, W, got {x.shape}")
    out, arg = _kernels.pool2(x.data)
    return record("maxpool2", (x,), out, lambda g: (_kernels.unpool2(g, arg),))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ContractError(f"global_avg_pool: needs NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    return record("global_avg_pool", (x,), x.data.mean(axis=(1, 2)),
                  lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: train mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ContractError(f"softmax: needs (N, C) input, got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)
    return record("softmax", (x,), s,
                  lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


L2_EPS = 1e-12


def l2_normalize(x: Tensor) -> Tensor:
    """Row-wise x / (||x|| + 1e-12)."""
    if x.data.ndim != 2:
        raise ContractError(f"l2_normalize: needs (N, D) input, got {x.shape}")
    norm = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    denom = norm + L2_EPS
    y = x.data / denom

    def bw(g):
        dot = (x.data * g).sum(axis=1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - x.data * dot / (safe * denom ** 2),)

    return record("l2_normalize", (x,), y, bw)


LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool2", "global_avg_pool", "dropout", "softmax", "l2_normalize")


def forward_layer(kind: str, x: Tensor, params: dict | None = None, mode: str = "eval",
                  rate: float = 0.5, rng: np.random.Generator | None = None) -> Tensor:
    """Dispatch one layer by name. ``params`` holds ``W``/``b`` for weighted kinds."""
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if kind == "conv2d":
        return conv2d(x, params["W"], params["b"], params.get("stride", 1))
    if kind == "dense":
        return dense(x, params["W"], params["b"])
    if kind == "relu":
        return relu(x)
    if kind == "maxpool2":
        return maxpool2(x)
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    if kind == "dropout":
        return dropout(x, rate, rng, mode == "train")
    if kind == "softmax":
        return softmax(x)
    if kind == "l2_normalize":
        return l2_normalize(x)
    raise ContractError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
