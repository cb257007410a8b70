"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable op in :mod:`facetouch.ops` records a node on the
currently active :class:`Tape`. :func:`backward` replays the tape in exact
reverse order of recording and accumulates gradients into ``Tensor.grad``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np


class ContractError(ValueError):
    """Raised when an op receives inputs that violate its contract."""


class Tensor:
    """Dense real array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps upstream grad of output -> grads for each input (None = no grad)
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of primitive ops.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded on this tape. Tapes do not nest: entering a second tape while one
    is active replaces it until the inner block exits.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(Tape._local, "active", None)
        Tape._local.active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._local.active = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def active() -> "Tape | None":
        return getattr(Tape._local, "active", None)


def record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap ``out_data`` in a Tensor and put the op on the active tape."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = Tape.active()
    if needs and tape is not None:
        tape.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ContractError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor, params: "ParamSet | None" = None) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss`` through ``tape``.

    Returns ``{param name: gradient}``. With ``params`` given, every trainable
    parameter appears in the map, zero-filled when it is not on any path to
    the loss; otherwise only named leaves that received a gradient appear.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise ContractError("backward: tape is empty")

    for node in tape.nodes:
        node.output.grad = None
        for t in node.inputs:
            t.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(tape.nodes):
        g_out = node.output.grad
        if g_out is None:
            continue
        grads = node.backward(g_out)
        for t, g in zip(node.inputs, grads):
            if g is not None and t.requires_grad:
                _accumulate(t, g)

    result: dict[str, np.ndarray] = {}
    if params is not None:
        for name, p in params.items():
            if not params.is_trainable(name):
                continue
            result[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    else:
        seen = set()
        for node in tape.nodes:
            for t in node.inputs:
                if t.name and t.grad is not None and id(t) not in seen:
                    seen.add(id(t))
                    result[t.name] = t.grad.copy()
    return result


@dataclass
class ParamSet:
    """Named parameter tensors with a per-parameter trainable flag."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    trainable: dict[str, bool] = field(default_factory=dict)

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=trainable, name=name)
        self.tensors[name] = t
        self.trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def is_trainable(self, name: str) -> bool:
        return self.trainable[name]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        """Toggle every parameter whose name starts with ``prefix``."""
        for name, t in self.tensors.items():
            if name.startswith(prefix):
                self.trainable[name] = flag
                t.requires_grad = flag

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if n.startswith(prefix)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def astype(self, dtype) -> None:
        for t in self.tensors.values():
            t.data = t.data.astype(dtype)
