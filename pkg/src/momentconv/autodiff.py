"""Minimal reverse-mode differentiation for the network's operation set.

A Tape records (output, inputs, vjp) triples in execution order while the
forward pass runs; ``backward`` walks them in reverse, feeding each op's
output gradient through its vector-Jacobian product and accumulating into
the input nodes.  Record order is a valid topological order because every
op's inputs were created before its output.

Ops live next to the code that knows their math (field ops in ``network``,
task losses in ``tasks``); they call ``Tape.record`` with a closure over
whatever residuals their adjoint needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TapeError(RuntimeError):
    pass


class Node:
    """A value in the computation graph.  ``grad`` is filled by backward()."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Node(shape={self.data.shape}, dtype={self.data.dtype})"


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


class Tape:
    """Execution-ordered record of primal ops and their adjoint closures."""

    def __init__(self):
        self._records: list[tuple[Node, tuple[Node, ...], object]] = []

    def record(self, out: Node, inputs: tuple[Node, ...], vjp) -> None:
        """vjp(output_grad) must return one gradient array per input (None to skip)."""
        self._records.append((out, inputs, vjp))

    def __len__(self):
        return len(self._records)


def backward(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    """Accumulate gradients of ``loss`` w.r.t. every node on the tape.

    Returns a table keyed by node id; each touched node also gets its
    gradient assigned to ``.grad`` (nodes off the loss path get zeros only
    if some op on the path consumed them, otherwise grad stays None).
    """
    if loss.data.size != 1:
        raise TapeError("loss must be a scalar")
    recorded_outputs = {id(out) for out, _, _ in tape._records}
    if id(loss) not in recorded_outputs:
        raise TapeError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    nodes: dict[int, Node] = {id(loss): loss}
    for out, inputs, vjp in reversed(tape._records):
        gout = grads.get(id(out))
        if gout is None:
            continue
        gins = vjp(gout)
        if len(gins) != len(inputs):
            raise TapeError("vjp arity mismatch")
        for node, g in zip(inputs, gins):
            if g is None:
                continue
            key = id(node)
            nodes[key] = node
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    for key, node in nodes.items():
        node.grad = grads[key]
    return grads


# ---------------------------------------------------------------------------
# elementary ops


def add(tape: Tape | None, a: Node, b: Node) -> Node:
    out = Node(a.data + b.data)
    if tape is not None:
        def vjp(g):
            ga = g if a.data.shape == g.shape else _unbroadcast(g, a.data.shape)
            gb = g if b.data.shape == g.shape else _unbroadcast(g, b.data.shape)
            return ga, gb
        tape.record(out, (a, b), vjp)
    return out


def add_scalars(tape: Tape | None, terms: list[Node]) -> Node:
    out = terms[0]
    for t in terms[1:]:
        out = add(tape, out, t)
    return out


def scale(tape: Tape | None, a: Node, c: float) -> Node:
    out = Node(a.data * c)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * c,))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# losses


def mse(tape: Tape | None, pred: Node, target: np.ndarray) -> Node:
    """Mean squared error over all elements."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {target.shape}")
    diff = pred.data - target
    out = Node(np.asarray(np.mean(diff * diff), dtype=pred.data.dtype))
    if tape is not None:
        n = diff.size
        tape.record(out, (pred,), lambda g: (g * 2.0 * diff / n,))
    return out


def weighted_sse(tape: Tape | None, pred: Node, target: np.ndarray,
                 weight: np.ndarray | float) -> Node:
    """Sum of weight * (pred - target)^2; weight is constant."""
    target = np.asarray(target, dtype=pred.data.dtype)
    diff = pred.data - target
    out = Node(np.asarray(np.sum(weight * diff * diff), dtype=pred.data.dtype))
    if tape is not None:
        tape.record(out, (pred,), lambda g: (g * 2.0 * weight * diff,))
    return out


def cross_entropy(tape: Tape | None, scores: Node, labels: np.ndarray) -> Node:
    """Mean softmax cross-entropy; scores (B, K), integer labels (B,)."""
    labels = np.asarray(labels)
    s = scores.data
    if s.ndim != 2:
        raise ValueError("scores must be (batch, classes)")
    b, k = s.shape
    if labels.shape != (b,):
        raise ValueError("labels must be (batch,)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    shifted = s - s.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    picked = shifted[np.arange(b), labels]
    out = Node(np.asarray(np.mean(logz - picked), dtype=s.dtype))
    if tape is not None:
        softmax = np.exp(shifted) / np.sum(np.exp(shifted), axis=1, keepdims=True)
        def vjp(g):
            grad = softmax.copy()
            grad[np.arange(b), labels] -= 1.0
            return (g * grad / b,)
        tape.record(out, (scores,), vjp)
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators for a fixed parameter list."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Node], lr: float = 1e-4, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(state: AdamState, grads: list[np.ndarray], params: list[Node]) -> list[Node]:
    """One bias-corrected Adam update, in place on the parameter nodes."""
    if not (len(grads) == len(params) == len(state.m)):
        raise ValueError("parameter/gradient/state length mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (g, p) in enumerate(zip(grads, params)):
        if g is None:
            continue
        g = np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params
