"""Construction, application and serialization of unlearnable-example poisons.

Class-wise poisons hold one perturbation row per class; sample-wise
poisons hold one row per sample. Every generator except the bias shift
respects an exact l-infinity budget. Training-facing applications clamp
back into [0,1]; theory-facing ones leave values unclamped so the exact
certificates see the constructions as analyzed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import FormatError, GenerationError, ShapeError, UsageError
from .models import PgdConfig, TrainConfig, TwoLayerModel, pgd, train
from .numerics import Rng, batch_loss_and_grad, sample_delta, sgd_step

METHOD_TAGS = ("random-c", "region-k", "err-min-s", "err-min-c", "err-max",
               "bias-shift", "thm3-4eps", "thm4-sign-shift", "external")

POISON_MAGIC = b"UDPP"
POISON_VERSION = 1


@dataclass
class PoisonSet:
    """A perturbation tensor plus the metadata needed to apply it honestly."""

    mode: str                      # class-wise | sample-wise
    budget: float
    vectors: np.ndarray            # (C, d) or (N, d); bias shift uses (1, d)
    method_tag: str
    clamp_policy: str = "clamped"  # clamped | unclamped
    degenerate: bool = False
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.mode not in ("class-wise", "sample-wise"):
            raise UsageError(f"unknown poison mode {self.mode!r}")
        if self.method_tag not in METHOD_TAGS:
            raise UsageError(f"unknown method tag {self.method_tag!r}")
        if self.clamp_policy not in ("clamped", "unclamped"):
            raise UsageError(f"unknown clamp policy {self.clamp_policy!r}")
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise UsageError("poison vectors must be 2-D")
        if not np.all(np.isfinite(self.vectors)):
            raise UsageError("poison vectors must be finite")
        if self.method_tag != "bias-shift" and self.vectors.size:
            sup = float(np.max(np.abs(self.vectors)))
            if sup > self.budget * (1.0 + 1e-9) + 1e-12:
                raise UsageError(
                    f"poison exceeds budget: max |v| = {sup} > {self.budget}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row_for_label(self, label: int) -> np.ndarray:
        if self.mode != "class-wise":
            raise UsageError("per-label rows only exist for class-wise poisons")
        if self.vectors.shape[0] == 1:
            return self.vectors[0]
        return self.vectors[label]


@dataclass(frozen=True)
class RegionPartition:
    """Assignment of each coordinate to one of k regions."""

    k: int
    assignment: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "assignment",
                           np.ascontiguousarray(self.assignment, dtype=np.int64))
        counts = np.bincount(self.assignment, minlength=self.k)
        if counts.size > self.k or np.any(counts == 0):
            raise UsageError("every region must be nonempty and indices < k")


def region_partition_flat(d: int, k: int) -> RegionPartition:
    """Contiguous chunks; sizes differ by at most one so all are nonempty."""
    if not (1 <= k <= d):
        raise UsageError(f"need 1 <= k <= d, got k={k}, d={d}")
    bounds = np.linspace(0, d, k + 1).astype(int)
    assignment = np.empty(d, dtype=np.int64)
    for r in range(k):
        assignment[bounds[r]:bounds[r + 1]] = r
    return RegionPartition(k, assignment)


def region_partition_image(shape_hint, k: int) -> RegionPartition:
    """Equal square blocks in the spatial plane, replicated across channels."""
    h, w, c = shape_hint
    side = int(round(np.sqrt(k)))
    if side * side != k:
        raise UsageError(f"image regions need a square count, got k={k}")
    if h % side or w % side:
        raise UsageError(f"{h}x{w} image is not divisible into {side}x{side} blocks")
    bh, bw = h // side, w // side
    rows = np.arange(h) // bh
    cols = np.arange(w) // bw
    block = rows[:, None] * side + cols[None, :]
    assignment = np.repeat(block.reshape(-1), c)
    return RegionPartition(k, assignment.astype(np.int64))


def region_partition_for(ds: Dataset, k: int) -> RegionPartition:
    """The natural partition for a dataset: image blocks or flat chunks."""
    if ds.shape_hint is not None:
        side = int(round(np.sqrt(k)))
        h, w, _ = ds.shape_hint
        if side * side == k and h % side == 0 and w % side == 0:
            return region_partition_image(ds.shape_hint, k)
    return region_partition_flat(ds.dim, k)


# ---------------------------------------------------------------------------
# Pure generators
# ---------------------------------------------------------------------------


def gen_random_classwise(rng: Rng, c: int, d: int, eps: float,
                         clamp_policy: str = "clamped") -> PoisonSet:
    """One +-eps sign vector per class, coordinates i.i.d. fair draws."""
    vectors = np.stack([sample_delta(rng.split("class", i), d, eps)
                        for i in range(c)])
    return PoisonSet("class-wise", eps, vectors, "random-c",
                     clamp_policy=clamp_policy, degenerate=(eps == 0.0))


def gen_region(rng: Rng, c: int, partition: RegionPartition, eps: float,
               clamp_policy: str = "clamped") -> PoisonSet:
    """Per class: one +-eps draw per region, broadcast over its coordinates."""
    d = partition.assignment.shape[0]
    if partition.k > d:
        raise UsageError("more regions than coordinates")
    vectors = np.empty((c, d))
    for i in range(c):
        region_values = sample_delta(rng.split("class", i), partition.k, eps)
        vectors[i] = region_values[partition.assignment]
    return PoisonSet("class-wise", eps, vectors, "region-k",
                     clamp_policy=clamp_policy, degenerate=(eps == 0.0))


def gen_bias_shift(d: int, b: float) -> PoisonSet:
    """The constant shift b * ones(d), shared by every class, never clamped."""
    return PoisonSet("class-wise", abs(b), np.full((1, d), float(b)),
                     "bias-shift", clamp_policy="unclamped")


def gen_thm4(base: PoisonSet, eta: float) -> PoisonSet:
    """Shift each class vector by eta along its own sign pattern.

    Requires the base to be exactly +-eps valued; the result is
    (eps + eta) * sign(v) per class, which keeps every coordinate's sign.
    """
    if base.mode != "class-wise":
        raise UsageError("sign-shift construction needs a class-wise base")
    if eta < 0:
        raise UsageError("eta must be >= 0")
    eps = base.budget
    if not np.all(np.isclose(np.abs(base.vectors), eps, rtol=0, atol=1e-12)):
        raise UsageError("base vectors must lie exactly on the +-eps support")
    vectors = (eps + eta) * np.sign(base.vectors)
    return PoisonSet("class-wise", eps + eta, vectors, "thm4-sign-shift",
                     clamp_policy=base.clamp_policy)


def thm3_first_draw(rng: Rng, ds: Dataset, eps_adv: float) -> PoisonSet:
    """A single unrejected 4*eps-budget class-wise draw (one trial)."""
    if eps_adv <= 0:
        raise UsageError("eps_adv must be positive")
    draw = gen_random_classwise(rng, ds.num_classes, ds.dim, 4.0 * eps_adv)
    return PoisonSet("class-wise", 4.0 * eps_adv, draw.vectors, "thm3-4eps",
                     clamp_policy="unclamped")


def gen_thm3(rng: Rng, ds: Dataset, eps_adv: float,
             max_attempts: int = 100) -> PoisonSet:
    """Class-wise 4*eps draws, rejected until the exact certificate passes.

    The accepted poison makes every point of the poisoned dataset provably
    correct under any l-infinity perturbation of size eps_adv (robust
    margin > 0 for all samples under the stacked-vector linear model).
    The attempt count is recorded in ``history``.
    """
    from .certificates import explicit_classifier, robust_margin

    best_margin = -np.inf
    for attempt in range(1, max_attempts + 1):
        poison = thm3_first_draw(rng.split("attempt", attempt), ds, eps_adv)
        poisoned, _ = apply(ds, poison, ratio=1.0)
        cert = robust_margin(poisoned, explicit_classifier(poison), eps_adv)
        worst = float(cert.margins.min())
        best_margin = max(best_margin, worst)
        if cert.certified:
            poison.history.append({"attempts": attempt, "worst_margin": worst})
            if 4.0 * eps_adv > 1.0:
                poison.history.append({"warning": "budget exceeds pixel range"})
            return poison
    raise GenerationError(
        f"no draw certified in {max_attempts} attempts; best worst-case "
        f"margin was {best_margin:.6g}")


# ---------------------------------------------------------------------------
# Optimized generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrMinSchedule:
    """Alternating min-min schedule for the error-minimizing generator."""

    outer_iters: int = 8
    inner_train_steps: int = 60
    pgd: PgdConfig = PgdConfig(budget=8 / 255, steps=20, direction="minimize",
                               random_start=False)


def _generator_model(ds: Dataset, seed: int) -> TwoLayerModel:
    return TwoLayerModel.init(Rng(seed, ("errgen",)), ds.dim, ds.num_classes)


def gen_errmin(ds: Dataset, model_seed: int, eps: float, mode: str,
               sched: ErrMinSchedule) -> PoisonSet:
    """Error-minimizing noise via alternating optimization.

    Repeats: take some SGD steps on the currently poisoned data, then move
    the perturbations a PGD pass in the loss-decreasing direction. Stops
    early once the generator fits the poisoned data at >= 0.99 accuracy.
    Class-wise mode averages sign gradients over each class before
    stepping, so members of a class share one perturbation.
    """
    if mode not in ("sample-wise", "class-wise"):
        raise UsageError(f"unknown err-min mode {mode!r}")
    if sched.pgd.direction != "minimize":
        raise UsageError("err-min needs a minimizing PGD config")
    if abs(sched.pgd.budget - eps) > 1e-12:
        raise UsageError("pgd budget must equal the poison budget")
    tag = "err-min-s" if mode == "sample-wise" else "err-min-c"
    n, d, c = len(ds), ds.dim, ds.num_classes
    rows = n if mode == "sample-wise" else c
    if eps == 0.0 or sched.outer_iters == 0:
        return PoisonSet(mode, eps, np.zeros((rows, d)), tag,
                         clamp_policy="clamped", degenerate=True)

    rng = Rng(model_seed, ("errmin",))
    model = _generator_model(ds, model_seed)
    delta = np.zeros((rows, d))
    history = []
    params = [p.copy() for p in model.params()]
    velocity = [np.zeros_like(p) for p in params]
    cfg = TrainConfig(epochs=1, batch_size=128, lr=0.01, seed=model_seed)

    for outer in range(sched.outer_iters):
        poisoned = ds.features + (delta if mode == "sample-wise"
                                  else delta[ds.labels])
        # inner minimization over the generator parameters
        order = rng.split("order", outer).generator().permutation(n)
        for step in range(sched.inner_train_steps):
            lo = (step * cfg.batch_size) % n
            idx = order[lo:lo + cfg.batch_size]
            logits, cache = model.forward_batch(poisoned[idx])
            loss, g_logits = batch_loss_and_grad(cfg.loss, logits, ds.labels[idx])
            if not np.isfinite(loss):
                raise GenerationError(f"generator diverged at outer iter {outer}")
            grads, _ = model.backward_batch(g_logits, cache)
            params, velocity = sgd_step(params, grads, cfg.lr, cfg.momentum,
                                        cfg.weight_decay, velocity)
            model = model.with_params(params)

        loss_before = _mean_loss(model, poisoned, ds.labels, cfg.loss)
        delta = _errmin_pgd(model, ds, delta, mode, eps, sched.pgd, cfg.loss)
        poisoned = ds.features + (delta if mode == "sample-wise"
                                  else delta[ds.labels])
        loss_after = _mean_loss(model, poisoned, ds.labels, cfg.loss)
        acc = float(np.mean(model.forward_batch(poisoned)[0].argmax(axis=1)
                            == ds.labels))
        history.append({"outer": outer, "loss_before": loss_before,
                        "loss_after": loss_after, "poisoned_accuracy": acc})
        if acc >= 0.99:
            break

    return PoisonSet(mode, eps, delta, tag, clamp_policy="clamped",
                     history=history)


def _mean_loss(model, X, y, kind) -> float:
    logits, _ = model.forward_batch(X)
    loss, _ = batch_loss_and_grad(kind, logits, y)
    return float(loss)


def _errmin_pgd(model, ds: Dataset, delta, mode: str, eps: float,
                cfg: PgdConfig, loss_kind) -> np.ndarray:
    """One loss-minimizing PGD pass over the perturbations."""
    X, y = ds.features, ds.labels
    new = delta.copy()
    for _ in range(cfg.steps):
        inputs = X + (new if mode == "sample-wise" else new[y])
        logits, cache = model.forward_batch(inputs)
        _, g_logits = batch_loss_and_grad(loss_kind, logits, y)
        _, g_input = model.backward_batch(g_logits, cache)
        if mode == "sample-wise":
            step_dir = np.sign(g_input)
        else:
            sums = np.zeros_like(new)
            np.add.at(sums, y, g_input)
            step_dir = np.sign(sums)
        new = np.clip(new - cfg.alpha * step_dir, -eps, eps)
        if cfg.clamp_to_unit and mode == "sample-wise":
            new = np.clip(X + new, 0.0, 1.0) - X
    return new


def gen_errmax(ds: Dataset, eps: float, pgd_cfg: PgdConfig,
               model_seed: int = 0,
               train_cfg: TrainConfig | None = None) -> PoisonSet:
    """Error-maximizing noise: fit a clean model, then one PGD ascent pass."""
    if pgd_cfg.direction != "maximize":
        raise UsageError("err-max needs a maximizing PGD config")
    if abs(pgd_cfg.budget - eps) > 1e-12:
        raise UsageError("pgd budget must equal the poison budget")
    if eps == 0.0:
        return PoisonSet("sample-wise", 0.0, np.zeros((len(ds), ds.dim)),
                         "err-max", clamp_policy="clamped", degenerate=True)
    cfg = train_cfg or TrainConfig(epochs=20, batch_size=128, lr=0.01,
                                   seed=model_seed)
    model = _generator_model(ds, model_seed)
    model, _ = train(model, ds, cfg)
    delta = pgd(model, ds.features, ds.labels, pgd_cfg,
                Rng(model_seed, ("errmax",)), loss=cfg.loss)
    return PoisonSet("sample-wise", eps, delta, "err-max",
                     clamp_policy="clamped")


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------


def apply(ds: Dataset, poison: PoisonSet, ratio: float = 1.0,
          rng: Rng | None = None):
    """Poison a uniformly chosen floor(ratio*N) subset; returns (ds, mask).

    Class-wise poisons add the row of each sample's label; sample-wise
    poisons add row i to sample i. Values are clamped to [0,1] only when
    the poison's clamp policy says so.
    """
    if not (0.0 <= ratio <= 1.0):
        raise UsageError("ratio must lie in [0, 1]")
    if poison.dim != ds.dim:
        raise ShapeError(f"poison dim {poison.dim} != dataset dim {ds.dim}")
    n = len(ds)
    if poison.mode == "sample-wise" and poison.vectors.shape[0] != n:
        raise ShapeError(f"sample-wise poison has {poison.vectors.shape[0]} "
                         f"rows for {n} samples")

    mask = np.zeros(n, dtype=bool)
    count = int(np.floor(ratio * n))
    if count == n:
        mask[:] = True
    elif count > 0:
        if rng is None:
            raise UsageError("a partial ratio requires an rng")
        chosen = rng.split("ratio").generator().choice(n, size=count,
                                                       replace=False)
        mask[chosen] = True

    features = ds.features.copy()
    if count:
        if poison.mode == "class-wise":
            if poison.vectors.shape[0] == 1:
                add = np.broadcast_to(poison.vectors[0], (n, ds.dim))[mask]
            else:
                add = poison.vectors[ds.labels[mask]]
        else:
            add = poison.vectors[mask]
        features[mask] = features[mask] + add
        if poison.clamp_policy == "clamped":
            features[mask] = np.clip(features[mask], 0.0, 1.0)
    return ds.with_features(features), mask


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_MODE_TAGS = {"class-wise": 0, "sample-wise": 1}
_CLAMP_TAGS = {"unclamped": 0, "clamped": 1}


def save_poison(path: str, poison: PoisonSet) -> None:
    """Write the poison container: header then f32 vectors."""
    rows, d = poison.vectors.shape
    with open(path, "wb") as f:
        f.write(POISON_MAGIC)
        f.write(struct.pack("<I", POISON_VERSION))
        f.write(struct.pack("<BBB", _MODE_TAGS[poison.mode],
                            METHOD_TAGS.index(poison.method_tag),
                            _CLAMP_TAGS[poison.clamp_policy]))
        f.write(struct.pack("<II", rows, d))
        f.write(struct.pack("<d", poison.budget))
        f.write(np.ascontiguousarray(poison.vectors, dtype="<f4").tobytes())


def load_poison(path: str) -> PoisonSet:
    """Read a poison container, validating the declared budget row by row."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != POISON_MAGIC:
            raise FormatError(f"bad poison magic {magic!r}")
        head = f.read(4 + 3 + 8 + 8)
        if len(head) != 23:
            raise FormatError("truncated poison header")
        version, mode_tag, method_tag, clamp_tag, rows, d, budget = \
            struct.unpack("<IBBBIId", head)
        if version != POISON_VERSION:
            raise FormatError(f"unsupported poison version {version}")
        payload = f.read()
    expected = 4 * rows * d
    if len(payload) != expected:
        raise FormatError(f"poison payload has {len(payload)} bytes, "
                          f"expected {expected}")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(rows, d) \
                .astype(np.float64)
    modes = {v: k for k, v in _MODE_TAGS.items()}
    clamps = {v: k for k, v in _CLAMP_TAGS.items()}
    if mode_tag not in modes or method_tag >= len(METHOD_TAGS) \
            or clamp_tag not in clamps:
        raise FormatError("unknown enum tag in poison header")
    method = METHOD_TAGS[method_tag]
    if method != "bias-shift":
        tol = budget * 1e-6 + 1e-7  # f32 round-trip slack
        bad = np.flatnonzero(np.max(np.abs(vectors), axis=1) > budget + tol)
        if bad.size:
            raise FormatError(f"row {int(bad[0])} violates the declared "
                              f"budget {budget}")
        vectors = np.clip(vectors, -budget, budget)
    return PoisonSet(modes[mode_tag], budget, vectors, method,
                     clamp_policy=clamps[clamp_tag])
