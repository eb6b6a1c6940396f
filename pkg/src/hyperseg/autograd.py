"""Minimal reverse-mode gradient engine over 64-bit float matrices.

The op set covers exactly what the convolutional layers and losses need:
dense and sparse matrix products, bias/scaling broadcasts, ELU, row-wise
log-softmax, batch normalization, and masked NLL. Each forward call builds a
fresh graph of Var nodes (define-by-run); ``backward`` sweeps it once in
reverse creation order, which is a valid topological order because inputs
are always created before the ops that consume them.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import EmptySupervisionError, ShapeMismatchError
from .sparse import SparseMatrix

IGNORE = -1

_ids = itertools.count()


class Var:
    """One node of the recorded computation: a value plus backward hook."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self._id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None


def parameter(value) -> Var:
    return Var(value, requires_grad=True)


def constant(value) -> Var:
    return Var(value, requires_grad=False)


def _out(value, parents, backward) -> Var:
    needs = any(p.requires_grad for p in parents)
    return Var(value, requires_grad=needs, parents=parents,
               backward=backward if needs else None)


def matmul(a: Var, b: Var) -> Var:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(
            f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    out_val = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.value.T)
        if b.requires_grad:
            b.accumulate(a.value.T @ g)

    return _out(out_val, (a, b), backward)


def spmm(s: SparseMatrix, x: Var) -> Var:
    """Sparse operator times dense activations; the operator is constant."""
    out_val = s.matmul_dense(x.value)

    def backward(g):
        if x.requires_grad:
            x.accumulate(s.transpose().matmul_dense(g))

    return _out(out_val, (x,), backward)


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    out_val = a.value + b.value

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _out(out_val, (a, b), backward)


def add_row_vector(x: Var, v: Var) -> Var:
    """x (N x F) plus a length-F vector broadcast over rows."""
    if x.value.ndim != 2 or v.value.shape != (x.value.shape[1],):
        raise ShapeMismatchError(
            f"bias shape mismatch: {x.value.shape} + {v.value.shape}")
    out_val = x.value + v.value[None, :]

    def backward(g):
        if x.requires_grad:
            x.accumulate(g)
        if v.requires_grad:
            v.accumulate(g.sum(axis=0))

    return _out(out_val, (x, v), backward)


def row_scale(x: Var, s: np.ndarray) -> Var:
    """Multiply row i by constant s[i] (diagonal scaling)."""
    s = np.asarray(s, dtype=np.float64)
    if x.value.shape[0] != s.shape[0] or s.ndim != 1:
        raise ShapeMismatchError("row_scale length mismatch")
    out_val = x.value * s[:, None]

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * s[:, None])

    return _out(out_val, (x,), backward)


def elementwise_mul(x: Var, m: np.ndarray) -> Var:
    """Multiply by a constant same-shape mask (dropout)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != x.value.shape:
        raise ShapeMismatchError("mask shape mismatch")
    out_val = x.value * m

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * m)

    return _out(out_val, (x,), backward)


def elu(x: Var) -> Var:
    """x if x > 0 else exp(x) - 1."""
    neg = x.value <= 0.0
    expm1 = np.expm1(np.where(neg, x.value, 0.0))
    out_val = np.where(neg, expm1, x.value)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * np.where(neg, expm1 + 1.0, 1.0))

    return _out(out_val, (x,), backward)


def log_softmax_rows(x: Var) -> Var:
    """Row-wise log-softmax with max subtraction for stability."""
    if x.value.ndim != 2:
        raise ShapeMismatchError("log_softmax expects a 2-d input")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_val = shifted - lse

    def backward(g):
        if x.requires_grad:
            soft = np.exp(out_val)
            x.accumulate(g - soft * g.sum(axis=1, keepdims=True))

    return _out(out_val, (x,), backward)


def nll_loss(logp: Var, labels) -> tuple[Var, int]:
    """Mean negative log-likelihood over nodes whose label is not IGNORE.

    Returns the scalar loss and the count of contributing nodes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logp.value.shape[0],):
        raise ShapeMismatchError("one label per row required")
    keep = labels != IGNORE
    n = int(keep.sum())
    if n == 0:
        raise EmptySupervisionError("nll_loss: no labeled nodes")
    c = logp.value.shape[1]
    if labels[keep].min() < 0 or labels[keep].max() >= c:
        raise ShapeMismatchError("label outside [0, n_classes)")
    rows = np.nonzero(keep)[0]
    out_val = -logp.value[rows, labels[rows]].sum() / n

    def backward(g):
        if logp.requires_grad:
            grad = np.zeros_like(logp.value)
            grad[rows, labels[rows]] = -float(g) / n
            logp.accumulate(grad)

    return _out(np.float64(out_val), (logp,), backward), n


def matrix_sum(x: Var) -> Var:
    out_val = np.float64(x.value.sum())

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.value, float(g)))

    return _out(out_val, (x,), backward)


def batchnorm_train(x: Var, gain: Var, shift: Var, eps: float = 1e-5):
    """Normalize each column by batch statistics, then scale and shift.

    Returns (output, batch_mean, batch_var); the caller folds the batch
    statistics into its running estimates. Requires at least 2 rows.
    """
    if x.value.shape[0] < 2:
        raise ShapeMismatchError("batchnorm train mode needs at least 2 rows")
    n = x.value.shape[0]
    mean = x.value.mean(axis=0)
    var = x.value.var(axis=0)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mean[None, :]) * invstd[None, :]
    out_val = xhat * gain.value[None, :] + shift.value[None, :]

    def backward(g):
        if shift.requires_grad:
            shift.accumulate(g.sum(axis=0))
        if gain.requires_grad:
            gain.accumulate((g * xhat).sum(axis=0))
        if x.requires_grad:
            gxhat = g * gain.value[None, :]
            x.accumulate(invstd[None, :] / n * (
                n * gxhat
                - gxhat.sum(axis=0, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=0, keepdims=True)))

    return _out(out_val, (x, gain, shift), backward), mean, var


def batchnorm_eval(x: Var, gain: Var, shift: Var, running_mean: np.ndarray,
                   running_var: np.ndarray, eps: float = 1e-5) -> Var:
    """Affine normalization by the (constant) running statistics."""
    invstd = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.value - running_mean[None, :]) * invstd[None, :]
    out_val = xhat * gain.value[None, :] + shift.value[None, :]

    def backward(g):
        if shift.requires_grad:
            shift.accumulate(g.sum(axis=0))
        if gain.requires_grad:
            gain.accumulate((g * xhat).sum(axis=0))
        if x.requires_grad:
            x.accumulate(g * (gain.value * invstd)[None, :])

    return _out(out_val, (x, gain, shift), backward)


def backward(loss: Var) -> None:
    """Reverse sweep from a scalar loss, accumulating grads additively."""
    if loss.value.shape != ():
        raise ShapeMismatchError("backward expects a scalar loss")
    # Reverse creation order restricted to nodes reachable from the loss is a
    # reverse topological order; each node's hook fires exactly once.
    stack = [loss]
    seen = {loss._id}
    nodes = []
    while stack:
        node = stack.pop()
        nodes.append(node)
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                stack.append(p)
    nodes.sort(key=lambda v: v._id, reverse=True)
    loss.grad = np.ones_like(loss.value)
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
