"""Model families, training loops and the PGD attack.

Three architectures: a linear classifier, a two-layer ReLU network whose
hidden width defaults to the input dimension, and a small two-stage
convolutional net standing in for a deep victim at desk scale. Forward and
backward passes are written directly on numpy so gradients are exact and
checkable against finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .data import AugmentPolicy, Dataset, Split, augment
from .errors import (FormatError, NumericError, ShapeError, TrainingError,
                     UsageError)
from .numerics import LossKind, Rng, batch_loss_and_grad, sgd_step


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "constant"          # constant | cosine | step
    milestones: tuple = ()                 # for the step schedule
    loss: LossKind = LossKind.CROSS_ENTROPY
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise UsageError("lr must be positive")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.lr_schedule not in ("constant", "cosine", "step"):
            raise UsageError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / self.epochs))
        lr = self.lr
        for m in self.milestones:
            if epoch >= m:
                lr *= 0.1
        return lr


@dataclass(frozen=True)
class PgdConfig:
    budget: float
    steps: int = 20
    step_size: float | None = None         # defaults to budget / 8
    direction: str = "maximize"            # maximize | minimize
    random_start: bool = True
    clamp_to_unit: bool = True

    def __post_init__(self):
        if self.budget < 0:
            raise UsageError("budget must be >= 0")
        if self.direction not in ("maximize", "minimize"):
            raise UsageError("direction must be 'maximize' or 'minimize'")
        if self.step_size is not None and self.step_size <= 0:
            raise UsageError("step_size must be positive")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.budget / 8.0


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


class LinearModel:
    """Logits(x) = W x + b."""

    arch = "linear"

    def __init__(self, W: np.ndarray, b: np.ndarray):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError("LinearModel needs W (C,d) and b (C,)")

    @classmethod
    def init(cls, rng: Rng, d: int, c: int) -> "LinearModel":
        g = rng.generator()
        scale = 1.0 / np.sqrt(d)
        return cls(g.normal(0.0, scale, size=(c, d)), np.zeros(c))

    @property
    def dims(self):
        return (self.W.shape[0], self.W.shape[1])

    def params(self):
        return [self.W, self.b]

    def with_params(self, params) -> "LinearModel":
        return LinearModel(params[0], params[1])

    def forward_batch(self, X: np.ndarray):
        return X @ self.W.T + self.b, (X,)

    def backward_batch(self, grad_logits: np.ndarray, cache):
        (X,) = cache
        gW = grad_logits.T @ X
        gb = grad_logits.sum(axis=0)
        gX = grad_logits @ self.W
        return [gW, gb], gX


class TwoLayerModel:
    """ReLU MLP with one hidden layer; hidden width defaults to d."""

    arch = "two-layer"

    def __init__(self, W1, b1, W2, b2):
        self.W1 = np.asarray(W1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.W2 = np.asarray(W2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        if self.W1.shape[0] != self.b1.shape[0] or \
           self.W2.shape != (self.b2.shape[0], self.W1.shape[0]):
            raise ShapeError("inconsistent TwoLayerModel parameter shapes")

    @classmethod
    def init(cls, rng: Rng, d: int, c: int, hidden: int | None = None) -> "TwoLayerModel":
        h = d if hidden is None else hidden
        g = rng.generator()
        W1 = g.normal(0.0, np.sqrt(2.0 / d), size=(h, d))
        W2 = g.normal(0.0, np.sqrt(1.0 / h), size=(c, h))
        return cls(W1, np.zeros(h), W2, np.zeros(c))

    @property
    def dims(self):
        return (self.W2.shape[0], self.W1.shape[1], self.W1.shape[0])

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def with_params(self, params) -> "TwoLayerModel":
        return TwoLayerModel(*params)

    def forward_batch(self, X: np.ndarray):
        pre = X @ self.W1.T + self.b1
        act = np.maximum(pre, 0.0)
        logits = act @ self.W2.T + self.b2
        return logits, (X, pre, act)

    def backward_batch(self, grad_logits: np.ndarray, cache):
        X, pre, act = cache
        gW2 = grad_logits.T @ act
        gb2 = grad_logits.sum(axis=0)
        g_act = grad_logits @ self.W2
        g_pre = g_act * (pre > 0.0)
        gW1 = g_pre.T @ X
        gb1 = g_pre.sum(axis=0)
        gX = g_pre @ self.W1
        return [gW1, gb1, gW2, gb2], gX


def _im2col(x: np.ndarray, k: int):
    """(N,H,W,C) -> (N,H,W, k*k*C) patches under 'same' zero padding."""
    n, h, w, c = x.shape
    pad = k // 2
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    xp[:, pad:pad + h, pad:pad + w, :] = x
    cols = np.empty((n, h, w, k * k * c))
    idx = 0
    for dy in range(k):
        for dx in range(k):
            cols[:, :, :, idx * c:(idx + 1) * c] = xp[:, dy:dy + h, dx:dx + w, :]
            idx += 1
    return cols


def _col2im(g_cols: np.ndarray, x_shape, k: int):
    """Adjoint of :func:`_im2col`."""
    n, h, w, c = x_shape
    pad = k // 2
    gp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    idx = 0
    for dy in range(k):
        for dx in range(k):
            gp[:, dy:dy + h, dx:dx + w, :] += g_cols[:, :, :, idx * c:(idx + 1) * c]
            idx += 1
    return gp[:, pad:pad + h, pad:pad + w, :]


class SmallConvModel:
    """Two 3x3 conv stages (stride 1, same padding, ReLU, 2x2 max-pool)
    followed by a dense head. Desk-scale stand-in for a deep victim."""

    arch = "small-conv"
    KERNEL = 3

    def __init__(self, shape_hint, channels, K1, b1, K2, b2, W3, b3):
        self.shape_hint = tuple(shape_hint)
        self.channels = tuple(channels)
        # conv kernels stored as (k*k*c_in, c_out) column matrices
        self.K1 = np.asarray(K1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.K2 = np.asarray(K2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.W3 = np.asarray(W3, dtype=np.float64)
        self.b3 = np.asarray(b3, dtype=np.float64)

    @classmethod
    def init(cls, rng: Rng, shape_hint, c: int,
             channels: tuple = (8, 16)) -> "SmallConvModel":
        if shape_hint is None:
            raise UsageError("SmallConvModel requires a shape_hint")
        h, w, cin = shape_hint
        if h % 4 or w % 4:
            raise UsageError("image sides must be divisible by 4 (two 2x2 pools)")
        ch1, ch2 = channels
        g = rng.generator()
        k = cls.KERNEL
        K1 = g.normal(0.0, np.sqrt(2.0 / (k * k * cin)), size=(k * k * cin, ch1))
        K2 = g.normal(0.0, np.sqrt(2.0 / (k * k * ch1)), size=(k * k * ch1, ch2))
        flat = (h // 4) * (w // 4) * ch2
        W3 = g.normal(0.0, np.sqrt(1.0 / flat), size=(c, flat))
        return cls(shape_hint, channels, K1, np.zeros(ch1), K2, np.zeros(ch2),
                   W3, np.zeros(c))

    @property
    def dims(self):
        h, w, cin = self.shape_hint
        return (h, w, cin, self.channels[0], self.channels[1], self.W3.shape[0])

    def params(self):
        return [self.K1, self.b1, self.K2, self.b2, self.W3, self.b3]

    def with_params(self, params) -> "SmallConvModel":
        return SmallConvModel(self.shape_hint, self.channels, *params)

    @staticmethod
    def _pool(x):
        n, h, w, c = x.shape
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c)
        flat = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        arg = flat.argmax(axis=4)
        pooled = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
        return pooled, arg

    @staticmethod
    def _pool_backward(g_pooled, arg, x_shape):
        n, h, w, c = x_shape
        flat = np.zeros((n, h // 2, w // 2, c, 4))
        np.put_along_axis(flat, arg[..., None], g_pooled[..., None], axis=4)
        blocks = flat.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return blocks.reshape(n, h, w, c)

    def forward_batch(self, X: np.ndarray):
        n = X.shape[0]
        h, w, cin = self.shape_hint
        x0 = X.reshape(n, h, w, cin)

        cols1 = _im2col(x0, self.KERNEL)
        pre1 = cols1 @ self.K1 + self.b1
        act1 = np.maximum(pre1, 0.0)
        pool1, arg1 = self._pool(act1)

        cols2 = _im2col(pool1, self.KERNEL)
        pre2 = cols2 @ self.K2 + self.b2
        act2 = np.maximum(pre2, 0.0)
        pool2, arg2 = self._pool(act2)

        flat = pool2.reshape(n, -1)
        logits = flat @ self.W3.T + self.b3
        cache = (x0, cols1, pre1, act1, arg1, pool1, cols2, pre2, act2, arg2,
                 pool2, flat)
        return logits, cache

    def backward_batch(self, grad_logits: np.ndarray, cache):
        (x0, cols1, pre1, act1, arg1, pool1, cols2, pre2, act2, arg2,
         pool2, flat) = cache
        n = grad_logits.shape[0]

        gW3 = grad_logits.T @ flat
        gb3 = grad_logits.sum(axis=0)
        g_flat = grad_logits @ self.W3
        g_pool2 = g_flat.reshape(pool2.shape)

        g_act2 = self._pool_backward(g_pool2, arg2, act2.shape)
        g_pre2 = g_act2 * (pre2 > 0.0)
        gK2 = np.tensordot(cols2, g_pre2, axes=([0, 1, 2], [0, 1, 2]))
        gb2 = g_pre2.sum(axis=(0, 1, 2))
        g_cols2 = g_pre2 @ self.K2.T
        g_pool1 = _col2im(g_cols2, pool1.shape, self.KERNEL)

        g_act1 = self._pool_backward(g_pool1, arg1, act1.shape)
        g_pre1 = g_act1 * (pre1 > 0.0)
        gK1 = np.tensordot(cols1, g_pre1, axes=([0, 1, 2], [0, 1, 2]))
        gb1 = g_pre1.sum(axis=(0, 1, 2))
        g_cols1 = g_pre1 @ self.K1.T
        g_x0 = _col2im(g_cols1, x0.shape, self.KERNEL)

        return [gK1, gb1, gK2, gb2, gW3, gb3], g_x0.reshape(n, -1)


ARCHS = {"linear": LinearModel, "two-layer": TwoLayerModel,
         "small-conv": SmallConvModel}


def make_model(arch: str, rng: Rng, ds: Dataset, hidden: int | None = None):
    """Construct an initialized model of the named architecture for ``ds``."""
    if arch == "linear":
        return LinearModel.init(rng, ds.dim, ds.num_classes)
    if arch == "two-layer":
        return TwoLayerModel.init(rng, ds.dim, ds.num_classes, hidden)
    if arch == "small-conv":
        return SmallConvModel.init(rng, ds.shape_hint, ds.num_classes)
    raise UsageError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# Forward / evaluation
# ---------------------------------------------------------------------------


def forward(model, batch: np.ndarray) -> np.ndarray:
    """Deterministic logits for a (N, d) batch."""
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("batch must be (N, d)")
    expected = _input_dim(model)
    if X.shape[1] != expected:
        raise ShapeError(f"batch dimension {X.shape[1]} != model input {expected}")
    logits, _ = model.forward_batch(X)
    return logits


def _input_dim(model) -> int:
    if isinstance(model, LinearModel):
        return model.W.shape[1]
    if isinstance(model, TwoLayerModel):
        return model.W1.shape[1]
    h, w, c = model.shape_hint
    return h * w * c


def predict(model, batch: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return forward(model, batch).argmax(axis=1)


def accuracy(model, ds: Dataset, batch_size: int = 4096) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(ds) == 0:
        raise UsageError("cannot evaluate accuracy on an empty dataset")
    correct = 0
    for start in range(0, len(ds), batch_size):
        stop = min(start + batch_size, len(ds))
        pred = predict(model, ds.features[start:stop])
        correct += int((pred == ds.labels[start:stop]).sum())
    return correct / len(ds)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainTrace:
    """Per-epoch accuracy record produced by :func:`train`."""

    train_accuracy: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)


def train(model, ds: Dataset, cfg: TrainConfig,
          augment_policy: AugmentPolicy | None = None,
          val: Dataset | None = None,
          attack: PgdConfig | None = None):
    """Mini-batch SGD training; returns (trained model, TrainTrace).

    The per-epoch trace records accuracy on the raw dataset (and on
    ``val`` when given). When ``attack`` is set, every mini-batch is
    perturbed by PGD before the optimizer step.
    """
    rng = Rng(cfg.seed, ("train",))
    params = [p.copy() for p in model.params()]
    velocity = [np.zeros_like(p) for p in params]
    trace = TrainTrace()
    n = len(ds)
    if n == 0:
        raise UsageError("cannot train on an empty dataset")

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.split("epoch", epoch).generator().permutation(n)
        model = model.with_params(params)
        for bstart in range(0, n, cfg.batch_size):
            idx = order[bstart:bstart + cfg.batch_size]
            X = ds.features[idx]
            y = ds.labels[idx]
            if augment_policy is not None and augment_policy.ops:
                X = augment(X, ds.shape_hint, augment_policy,
                            rng.split("aug", epoch, int(bstart)))
            if attack is not None and attack.budget > 0 and (
                    attack.steps > 0 or attack.random_start):
                delta = pgd(model, X, y, attack,
                            rng.split("pgd", epoch, int(bstart)), loss=cfg.loss)
                X = X + delta
            logits, cache = model.forward_batch(X)
            loss, g_logits = batch_loss_and_grad(cfg.loss, logits, y)
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged at epoch {epoch}",
                                    epoch=epoch)
            grads, _ = model.backward_batch(g_logits, cache)
            params, velocity = sgd_step(params, grads, lr, cfg.momentum,
                                        cfg.weight_decay, velocity)
            model = model.with_params(params)
        trace.train_accuracy.append(accuracy(model, ds))
        if val is not None:
            trace.val_accuracy.append(accuracy(model, val))
    return model, trace


def adversarial_train(model, ds: Dataset, cfg: TrainConfig, attack: PgdConfig,
                      augment_policy: AugmentPolicy | None = None,
                      val: Dataset | None = None):
    """Min-max training: PGD perturbs each mini-batch before the SGD step."""
    if attack.direction != "maximize":
        raise UsageError("adversarial training needs a maximizing attack")
    return train(model, ds, cfg, augment_policy=augment_policy, val=val,
                 attack=attack)


# ---------------------------------------------------------------------------
# PGD
# ---------------------------------------------------------------------------


def pgd(model, X: np.ndarray, y: np.ndarray, cfg: PgdConfig,
        rng: Rng | None = None,
        loss: LossKind = LossKind.CROSS_ENTROPY) -> np.ndarray:
    """Sign-gradient PGD under an l-infinity budget; returns perturbations.

    The perturbation is projected onto the budget ball after every step,
    so ||delta||_inf <= budget holds exactly. With clamp_to_unit, x+delta
    additionally stays in [0, 1]. direction='minimize' descends the loss
    instead of ascending it.
    """
    X = np.asarray(X, dtype=np.float64)
    eps = cfg.budget
    if eps == 0.0:
        return np.zeros_like(X)
    sign = 1.0 if cfg.direction == "maximize" else -1.0

    if cfg.random_start:
        if rng is None:
            raise UsageError("random_start requires an rng")
        delta = rng.split("init").generator().uniform(-eps, eps, size=X.shape)
    else:
        delta = np.zeros_like(X)
    if cfg.clamp_to_unit:
        delta = np.clip(X + delta, 0.0, 1.0) - X

    for _ in range(cfg.steps):
        logits, cache = model.forward_batch(X + delta)
        _, g_logits = batch_loss_and_grad(loss, logits, y)
        _, g_input = model.backward_batch(g_logits, cache)
        if not np.all(np.isfinite(g_input)):
            raise NumericError("non-finite input gradient in PGD")
        delta = delta + sign * cfg.alpha * np.sign(g_input)
        delta = np.clip(delta, -eps, eps)
        if cfg.clamp_to_unit:
            delta = np.clip(X + delta, 0.0, 1.0) - X
    return delta


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"UDPM"
_ARCH_TAGS = {"linear": 0, "two-layer": 1, "small-conv": 2}
_TAG_ARCHS = {v: k for k, v in _ARCH_TAGS.items()}


def save_model(path: str, model) -> None:
    """Write the checkpoint container: magic, arch tag, dims, f32 params."""
    dims = model.dims
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<BB", _ARCH_TAGS[model.arch], len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        for p in model.params():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path: str):
    """Read a checkpoint written by :func:`save_model`."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        tag, ndims = struct.unpack("<BB", f.read(2))
        if tag not in _TAG_ARCHS:
            raise FormatError(f"unknown architecture tag {tag}")
        dims = struct.unpack(f"<{ndims}I", f.read(4 * ndims))
        payload = f.read()

    arch = _TAG_ARCHS[tag]
    if arch == "linear":
        c, d = dims
        shapes = [(c, d), (c,)]
        build = lambda ps: LinearModel(*ps)
    elif arch == "two-layer":
        c, d, h = dims
        shapes = [(h, d), (h,), (c, h), (c,)]
        build = lambda ps: TwoLayerModel(*ps)
    else:
        h, w, cin, ch1, ch2, c = dims
        k = SmallConvModel.KERNEL
        flat = (h // 4) * (w // 4) * ch2
        shapes = [(k * k * cin, ch1), (ch1,), (k * k * ch1, ch2), (ch2,),
                  (c, flat), (c,)]
        build = lambda ps: SmallConvModel((h, w, cin), (ch1, ch2), *ps)

    params, offset = [], 0
    raw = np.frombuffer(payload, dtype="<f4")
    for shape in shapes:
        size = int(np.prod(shape))
        if offset + size > raw.size:
            raise FormatError("checkpoint payload shorter than declared dims")
        params.append(raw[offset:offset + size].reshape(shape).astype(np.float64))
        offset += size
    if offset != raw.size:
        raise FormatError("checkpoint payload longer than declared dims")
    return build(params)
