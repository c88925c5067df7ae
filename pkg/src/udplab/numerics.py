"""Dense linear algebra, RNG, losses and the SGD step used everywhere else.

All numeric state is float64. Matrices are 2-D C-contiguous numpy arrays,
which gives a fixed row-major reduction order for reproducible results.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import NumericError, ShapeError, UsageError


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rng:
    """Counter-based splittable random source.

    A value of this type names a stream, it holds no mutable state. Child
    streams are derived by label with :meth:`split`, so per-class or
    per-sample draws do not depend on iteration order. The same (seed, path)
    always yields a byte-identical stream.
    """

    seed: int
    path: tuple = ()

    def split(self, *labels) -> "Rng":
        """Derive an independent child stream named by ``labels``."""
        return Rng(self.seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        """A fresh Philox generator keyed by this stream's identity.

        Calling this twice on the same Rng returns identical streams;
        consume a generator locally rather than storing it.
        """
        h = hashlib.blake2b(digest_size=32)
        h.update(str(int(self.seed)).encode())
        for label in self.path:
            h.update(b"/")
            h.update(repr(label).encode())
        key = int.from_bytes(h.digest(), "little")
        return np.random.Generator(np.random.Philox(key=key & (2**256 - 1)))


# ---------------------------------------------------------------------------
# Matrices
# ---------------------------------------------------------------------------


def as_matrix(data) -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 2-D array."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with the usual (rows_a, cols_b) result."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def sample_delta(rng: Rng, dims: int, eps: float) -> np.ndarray:
    """Draw a vector whose coordinates are independently +eps or -eps.

    Each coordinate takes either sign with probability 1/2 (the two-point
    distribution 2*eps*Bernoulli(1/2) - eps). eps=0 collapses to zeros.
    """
    if eps < 0:
        raise UsageError(f"eps must be nonnegative, got {eps}")
    bits = rng.generator().integers(0, 2, size=dims)
    return (2.0 * bits - 1.0) * float(eps)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


class LossKind(Enum):
    CROSS_ENTROPY = "cross-entropy"
    HINGE = "multiclass-hinge"
    MSE = "mean-squared"

    @classmethod
    def parse(cls, tag: str) -> "LossKind":
        for kind in cls:
            if kind.value == tag:
                return kind
        raise UsageError(f"unknown loss kind {tag!r}; expected one of "
                         f"{[k.value for k in cls]}")


def loss_and_grad(kind: LossKind, logits: np.ndarray, label: int):
    """Loss value and its gradient w.r.t. a single logits vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("logits must be a 1-D vector")
    if not (0 <= label < z.shape[0]):
        raise UsageError(f"label {label} out of range for {z.shape[0]} logits")
    loss, grad = batch_loss_and_grad(kind, z[None, :], np.array([label]))
    return float(loss), grad[0]


def batch_loss_and_grad(kind: LossKind, logits: np.ndarray, labels: np.ndarray):
    """Mean loss over a batch and gradient of that mean w.r.t. the logits.

    logits: (N, C); labels: (N,). Cross-entropy is computed through a
    shifted log-sum-exp so large logits do not overflow.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.ndim != 1 or z.shape[0] != y.shape[0]:
        raise ShapeError(f"bad batch shapes: logits {z.shape}, labels {y.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    n, c = z.shape
    rows = np.arange(n)

    if kind is LossKind.CROSS_ENTROPY:
        m = z.max(axis=1, keepdims=True)
        ez = np.exp(z - m)
        lse = m[:, 0] + np.log(ez.sum(axis=1))
        loss = float(np.mean(lse - z[rows, y]))
        softmax = ez / ez.sum(axis=1, keepdims=True)
        grad = softmax
        grad[rows, y] -= 1.0
        return loss, grad / n

    if kind is LossKind.HINGE:
        margins = z - z[rows, y][:, None] + 1.0
        margins[rows, y] = 0.0
        active = margins > 0.0
        loss = float(np.sum(margins[active]) / n)
        grad = active.astype(np.float64)
        grad[rows, y] = -active.sum(axis=1)
        return loss, grad / n

    if kind is LossKind.MSE:
        target = np.zeros_like(z)
        target[rows, y] = 1.0
        diff = z - target
        loss = float(np.sum(diff * diff) / n)
        return loss, 2.0 * diff / n

    raise UsageError(f"unhandled loss kind {kind}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def sgd_step(params, grads, lr: float, momentum: float, weight_decay: float,
             velocity):
    """One SGD update with classical momentum and L2 weight decay.

        v <- momentum * v + (grad + weight_decay * param)
        param <- param - lr * v

    params/grads/velocity are parallel lists of arrays; returns new lists.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("params, grads and velocity must have equal length")
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"shape mismatch: {p.shape} vs {g.shape} vs {v.shape}")
        v_next = momentum * v + (g + weight_decay * p)
        new_velocity.append(v_next)
        new_params.append(p - lr * v_next)
    return new_params, new_velocity
