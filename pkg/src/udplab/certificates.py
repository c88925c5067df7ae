"""Exact robustness certificates and Monte-Carlo checks of the theory.

The library's separability theory makes five quantitative claims, checked
here at desk scale:

  1. class-wise sign poisons make a dataset linearly separable with
     probability at least 1 - N*C*(2*exp(-d*eps^2/18) + exp(-d/32));
  2. the same with k regions instead of d coordinates:
     1 - N*C*(2*exp(-k*eps^2/18) + exp(-k/32));
  3. a 4*eps-budget poison exists whose every eps-ball neighborhood stays
     separable, with probability 1 - N*C*(2*exp(-d*eps^2/8) + 2*exp(-d/50));
  4. shifting a separable sign poison by eta along its own signs keeps the
     whole eta-ball separable (exact, via the identity
     <a,b> + ||a-b||_1 = d for sign vectors); the required base budget is
     eps > sqrt(32*ln(3*N*C)/d);
  5. turning a non-separable set separable at hinge-loss level mu2 (with a
     max-row-l1 penalty) from clean hinge level mu1 > mu2 forces a poison
     of sup-norm at least mu1 / (2*mu2*(C-1)).

Claims 1-3 are probabilistic and get Monte-Carlo harnesses; 4 and 5 are
deterministic and get exact checkers (claim 5 by exact enumeration on
tiny instances, descent elsewhere).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import Dataset, synth_uniform
from .errors import CertificationError, UsageError
from .models import LinearModel, forward
from .numerics import LossKind, Rng, batch_loss_and_grad
from .poisons import (PoisonSet, RegionPartition, apply, gen_random_classwise,
                      gen_region, region_partition_flat, thm3_first_draw)


# ---------------------------------------------------------------------------
# Exact margin certificates
# ---------------------------------------------------------------------------


@dataclass
class MarginCertificate:
    """Worst-case margins of a linear model over an l-infinity ball.

    For each sample, the margin is
        min over k != y of  (W_y - W_k) . x + (b_y - b_k) - eta * ||W_y - W_k||_1,
    the exact worst case because the minimizing perturbation of an affine
    gap is -eta * sign(W_y - W_k). certified means every margin is > 0.
    """

    dataset_id: str
    adv_budget: float
    margins: np.ndarray
    certified: bool
    model: LinearModel = field(repr=False, default=None)


def explicit_classifier(poison: PoisonSet) -> LinearModel:
    """The linear model whose rows are the class poison vectors, zero bias."""
    if poison.mode != "class-wise":
        raise UsageError("the stacked-vector classifier needs a class-wise poison")
    return LinearModel(poison.vectors.copy(), np.zeros(poison.vectors.shape[0]))


def robust_margin(ds: Dataset, model: LinearModel, eta: float,
                  dataset_id: str = "") -> MarginCertificate:
    """Exact worst-case margins of ``model`` on ``ds`` at budget ``eta``."""
    if eta < 0:
        raise UsageError("eta must be >= 0")
    W, b = model.W, model.b
    c = W.shape[0]
    logits = ds.features @ W.T + b
    # pairwise row-difference l1 norms, computed once
    l1 = np.array([[np.abs(W[y] - W[k]).sum() for k in range(c)]
                   for y in range(c)])
    y = ds.labels
    gap = logits[np.arange(len(ds)), y][:, None] - logits    # (N, C)
    penalty = eta * l1[y]                                    # (N, C)
    worst = gap - penalty
    worst[np.arange(len(ds)), y] = np.inf
    margins = worst.min(axis=1)
    return MarginCertificate(dataset_id, eta, margins,
                             bool(np.all(margins > 0.0)), model)


def sign_shift_margin_identity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """<a,b> + ||a-b||_1, which equals d for sign vectors a, b in {-1,+1}^d."""
    return (a * b).sum(axis=-1) + np.abs(a - b).sum(axis=-1)


def sign_poison_budget_threshold(n: int, c: int, d: int) -> float:
    """Base budget above which a random sign poison is separable w.h.p.

    From 3*exp(-d*eps^2/32) < 1/(N*C): eps > sqrt(32*ln(3*N*C)/d).
    """
    return float(np.sqrt(32.0 * np.log(3.0 * n * c) / d))


# ---------------------------------------------------------------------------
# Monte-Carlo bound checks
# ---------------------------------------------------------------------------


@dataclass
class BoundCheck:
    """An empirical success rate next to the corresponding closed-form bound.

    The bound may be vacuous (<= 0); it is reported as computed either way
    and only compared against the empirical rate when positive.
    """

    theorem: str
    parameters: dict
    theoretical_bound: float
    empirical_rate: float
    trials: int
    seeds: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def consistent(self) -> bool:
        if self.theoretical_bound <= 0.0:
            return True
        return self.empirical_rate >= self.theoretical_bound


def separability_bound(n: int, c: int, scale: int, eps: float) -> float:
    """1 - N*C*(2*exp(-s*eps^2/18) + exp(-s/32)) with s = d or s = k."""
    return 1.0 - n * c * (2.0 * np.exp(-scale * eps * eps / 18.0)
                          + np.exp(-scale / 32.0))


def robust_separability_bound(n: int, c: int, d: int, eps: float) -> float:
    """1 - N*C*(2*exp(-d*eps^2/8) + 2*exp(-d/50))."""
    return 1.0 - n * c * (2.0 * np.exp(-d * eps * eps / 8.0)
                          + 2.0 * np.exp(-d / 50.0))


def _default_source(trial_rng: Rng, n: int, d: int, c: int) -> Dataset:
    return synth_uniform(trial_rng.split("data"), n, d, c)


def check_thm1(n: int, d: int, c: int, eps: float, trials: int,
               seed: int = 0, data_source=None) -> BoundCheck:
    """Random class-wise poison: does the stacked classifier separate all N?

    Each trial draws fresh data and poison, builds the explicit linear
    model from the poison rows, and counts the trial a success only if
    every poisoned sample is classified correctly.
    """
    if trials < 1:
        raise UsageError("trials must be >= 1")
    source = data_source or _default_source
    successes = 0
    root = Rng(seed, ("check1",))
    for t in range(trials):
        trial = root.split("trial", t)
        ds = source(trial, n, d, c)
        poison = gen_random_classwise(trial.split("poison"), c, d, eps,
                                      clamp_policy="unclamped")
        poisoned, _ = apply(ds, poison, ratio=1.0)
        pred = forward(explicit_classifier(poison), poisoned.features).argmax(axis=1)
        successes += bool(np.all(pred == poisoned.labels))
    return BoundCheck("separability-random", dict(N=n, d=d, C=c, eps=eps),
                      separability_bound(n, c, d, eps), successes / trials,
                      trials, seeds=[seed])


def check_thm2(n: int, d: int, c: int, k: int, eps: float, trials: int,
               seed: int = 0, partition: RegionPartition | None = None,
               data_source=None) -> BoundCheck:
    """Region-k variant of :func:`check_thm1` with the k-based bound."""
    if k > d:
        raise UsageError("k cannot exceed d")
    if trials < 1:
        raise UsageError("trials must be >= 1")
    part = partition or region_partition_flat(d, k)
    source = data_source or _default_source
    successes = 0
    root = Rng(seed, ("check2",))
    for t in range(trials):
        trial = root.split("trial", t)
        ds = source(trial, n, d, c)
        poison = gen_region(trial.split("poison"), c, part, eps,
                            clamp_policy="unclamped")
        poisoned, _ = apply(ds, poison, ratio=1.0)
        pred = forward(explicit_classifier(poison), poisoned.features).argmax(axis=1)
        successes += bool(np.all(pred == poisoned.labels))
    return BoundCheck("separability-region", dict(N=n, d=d, C=c, k=k, eps=eps),
                      separability_bound(n, c, k, eps), successes / trials,
                      trials, seeds=[seed])


def check_thm3(n: int, d: int, c: int, eps_adv: float, trials: int,
               seed: int = 0, data_source=None) -> BoundCheck:
    """Robust separability: first 4*eps draw certified at budget eps.

    The constructive generator rejects failed draws; the Monte-Carlo rate
    here counts first-draw certifications so it is comparable to the
    closed-form probability. Both the statement-side premise
    exp(-d e^2/8)+exp(-d/50) <= 1/(2NC) and the proof-side bound are
    reported.
    """
    if eps_adv <= 0:
        raise UsageError("eps_adv must be positive")
    if trials < 1:
        raise UsageError("trials must be >= 1")
    source = data_source or _default_source
    successes = 0
    worst_margins = []
    root = Rng(seed, ("check3",))
    for t in range(trials):
        trial = root.split("trial", t)
        ds = source(trial, n, d, c)
        poison = thm3_first_draw(trial.split("poison"), ds, eps_adv)
        poisoned, _ = apply(ds, poison, ratio=1.0)
        cert = robust_margin(poisoned, explicit_classifier(poison), eps_adv)
        successes += bool(cert.certified)
        worst_margins.append(float(cert.margins.min()))
    premise = (np.exp(-d * eps_adv ** 2 / 8.0) + np.exp(-d / 50.0)
               <= 1.0 / (2.0 * n * c))
    return BoundCheck("robust-separability", dict(N=n, d=d, C=c, eps=eps_adv),
                      robust_separability_bound(n, c, d, eps_adv),
                      successes / trials, trials, seeds=[seed],
                      extra={"statement_premise_holds": bool(premise),
                             "worst_margin_min": min(worst_margins)})


# ---------------------------------------------------------------------------
# Hinge-loss lower bound on the poison budget
# ---------------------------------------------------------------------------


def hinge_objective(u, xs, signs, l1_weight: Fraction):
    """(1/N) sum max(0, 1 + s_i <u, x_i>) + l1_weight * ||u||_1, exactly.

    Two-class hinge in the row-difference parametrization u = W_1 - W_2:
    class-0 samples need <u, x> >= 1 (s = -1), class-1 samples <u, x> <= -1
    (s = +1). Augmenting W = (u/2, -u/2) realizes max-row-l1 = ||u||_1 / 2,
    the smallest possible, so l1_weight = 1/2 prices the norm penalty.
    """
    total = Fraction(0)
    for x, s in zip(xs, signs):
        val = Fraction(1) + s * sum(u_j * x_j for u_j, x_j in zip(u, x))
        if val > 0:
            total += val
    total = total / len(xs)
    return total + l1_weight * sum(abs(u_j) for u_j in u)


def _solve_linear_system(rows, rhs):
    """Exact Gaussian elimination over the rationals; None if singular."""
    d = len(rows[0])
    aug = [list(r) + [b] for r, b in zip(rows, rhs)]
    for col in range(d):
        pivot = next((r for r in range(col, d) if aug[r][col] != 0), None)
        if pivot is None:
            return None
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = Fraction(1) / aug[col][col]
        aug[col] = [v * inv for v in aug[col]]
        for r in range(d):
            if r != col and aug[r][col] != 0:
                factor = aug[r][col]
                aug[r] = [v - factor * p for v, p in zip(aug[r], aug[col])]
    return [aug[r][d] for r in range(d)]


def exact_hinge_min(xs, signs, l1_weight: Fraction):
    """Global minimum of :func:`hinge_objective` by kink-point enumeration.

    The objective is convex piecewise linear in u, so some minimizer lies
    at an intersection of d kink hyperplanes (hinge activations
    1 + s_i <u, x_i> = 0 and sign changes u_j = 0), or the minimizer set
    is unbounded, in which case u = 0 and the evaluated kink subsets still
    bracket the optimum. Returns (value, u) over all candidates.

    Tiny instances only: the candidate count is C(N + d, d).
    """
    d = len(xs[0])
    planes = []
    for x, s in zip(xs, signs):
        planes.append(([s * Fraction(xj) for xj in x], Fraction(-1)))
    for j in range(d):
        row = [Fraction(0)] * d
        row[j] = Fraction(1)
        planes.append((row, Fraction(0)))

    xs_f = [[Fraction(v) for v in x] for x in xs]
    best_val, best_u = None, None
    for combo in itertools.combinations(range(len(planes)), d):
        rows = [planes[i][0] for i in combo]
        rhs = [planes[i][1] for i in combo]
        u = _solve_linear_system(rows, rhs)
        if u is None:
            continue
        val = hinge_objective(u, xs_f, signs, l1_weight)
        if best_val is None or val < best_val:
            best_val, best_u = val, u
    zero = [Fraction(0)] * d
    val0 = hinge_objective(zero, xs_f, signs, l1_weight)
    if best_val is None or val0 < best_val:
        best_val, best_u = val0, zero
    return best_val, best_u


def _two_class_signs(labels) -> list:
    # class 0 wants <u, x> large positive: its hinge term is 1 - <u, x>
    return [Fraction(-1) if int(y) == 0 else Fraction(1) for y in labels]


def _descent_hinge_min(X, labels, c, l1_penalty, seed=0, iters=4000):
    """Subgradient descent on mean hinge + l1_penalty * max-row-l1(W)."""
    g = Rng(seed, ("hinge-descent",)).generator()
    n, d = X.shape
    best_val, best_W = np.inf, None
    for restart in range(4):
        W = g.normal(0.0, 0.5, size=(c, d)) if restart else np.zeros((c, d))
        for it in range(iters):
            _, g_logits = batch_loss_and_grad(LossKind.HINGE, X @ W.T, labels)
            gW = g_logits.T @ X
            if l1_penalty > 0:
                row = int(np.argmax(np.abs(W).sum(axis=1)))
                gW[row] += l1_penalty * np.sign(W[row])
            W = W - (0.5 / (1.0 + it / 50.0)) * gW
        loss, _ = batch_loss_and_grad(LossKind.HINGE, X @ W.T, labels)
        val = float(loss) + l1_penalty * float(np.abs(W).sum(axis=1).max())
        if val < best_val:
            best_val, best_W = val, W
    return best_val, best_W


@dataclass
class HingeBudgetReport:
    """Outcome of the hinge-loss budget lower-bound check."""

    mu1: float
    mu2: float
    rhs: float
    max_poison_norm: float
    satisfied: bool
    applicable: bool
    exact: bool


def check_thm5(ds_clean: Dataset, ds_poisoned: Dataset,
               tol: float = 1e-6) -> HingeBudgetReport:
    """Check max_i ||eps_i||_inf >= mu1 / (2 mu2 (C-1)).

    mu1 is the minimum mean hinge loss over linear models on the clean
    set (a lower bound on every model's clean loss); mu2 the minimum of
    mean poisoned hinge plus the max-row-l1 norm. On instances small
    enough the minima are computed exactly over the rationals; otherwise
    by subgradient descent, with mu1 reduced by tol to stay a defensible
    lower estimate.
    """
    if len(ds_clean) != len(ds_poisoned) or ds_clean.dim != ds_poisoned.dim:
        raise UsageError("clean and poisoned sets must align row for row")
    if not np.array_equal(ds_clean.labels, ds_poisoned.labels):
        raise UsageError("clean and poisoned labels must agree")
    n, d, c = len(ds_clean), ds_clean.dim, ds_clean.num_classes
    eps = ds_poisoned.features - ds_clean.features
    max_norm = float(np.max(np.abs(eps))) if eps.size else 0.0

    tiny = (c == 2 and n <= 8 and d <= 3)
    if tiny:
        signs = _two_class_signs(ds_clean.labels)
        xs_clean = [list(map(Fraction, map(float, row)))
                    for row in ds_clean.features]
        xs_pois = [list(map(Fraction, map(float, row)))
                   for row in ds_poisoned.features]
        mu1_f, _ = exact_hinge_min(xs_clean, signs, Fraction(0))
        mu2_f, u = exact_hinge_min(xs_pois, signs, Fraction(1, 2))
        mu1, mu2 = float(mu1_f), float(mu2_f)
        # separability under the found minimizer: every sample strictly won
        separable = all(
            s * sum(uj * xj for uj, xj in zip(u, x)) < 0
            for x, s in zip(xs_pois, signs))
        exact = True
    else:
        mu1_raw, _ = _descent_hinge_min(ds_clean.features, ds_clean.labels,
                                        c, 0.0)
        mu1 = max(mu1_raw - tol, 0.0)
        mu2, W2 = _descent_hinge_min(ds_poisoned.features, ds_poisoned.labels,
                                     c, 1.0)
        pred = (ds_poisoned.features @ W2.T).argmax(axis=1)
        separable = bool(np.all(pred == ds_poisoned.labels))
        exact = False

    if not separable:
        raise CertificationError(
            "the regularized minimizer does not separate the poisoned set; "
            "the mu2 route is invalid on this instance")
    applicable = mu1 > mu2
    rhs = mu1 / (2.0 * mu2 * (c - 1)) if applicable and mu2 > 0 else 0.0
    satisfied = bool(applicable and max_norm >= rhs)
    return HingeBudgetReport(mu1, mu2, rhs, max_norm, satisfied, applicable,
                             exact)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def similarity_report(poison: PoisonSet, labels: np.ndarray,
                      pairs: int = 10000, seed: int = 0) -> dict:
    """Within-class vs between-class similarity of sample-wise poisons.

    Cosine similarity is averaged over Monte-Carlo sampled pairs.
    Divergences come from per-class diagonal Gaussian fits and the
    symmetrized closed form; within-class divergence follows the
    split-in-half protocol. Classes with fewer than 4 samples are skipped.
    """
    if poison.mode != "sample-wise":
        raise UsageError("similarity analysis applies to sample-wise poisons")
    labels = np.asarray(labels)
    if labels.shape[0] != poison.vectors.shape[0]:
        raise UsageError("labels must align with poison rows")
    g = Rng(seed, ("similarity",)).generator()
    V = poison.vectors
    norm = np.linalg.norm(V, axis=1)
    norm[norm == 0] = 1.0
    unit = V / norm[:, None]
    classes = np.unique(labels)
    skipped = [int(cl) for cl in classes
               if np.count_nonzero(labels == cl) < 4]
    kept = [int(cl) for cl in classes if int(cl) not in skipped]
    if len(kept) < 2:
        raise UsageError("need at least two classes with >= 4 samples")

    intra_idx = {cl: np.flatnonzero(labels == cl) for cl in kept}
    intra_sum = inter_sum = 0.0
    for _ in range(pairs):
        cl = kept[int(g.integers(0, len(kept)))]
        i, j = g.choice(intra_idx[cl], size=2, replace=False)
        intra_sum += float(unit[i] @ unit[j])
        ca, cb = g.choice(len(kept), size=2, replace=False)
        i = g.choice(intra_idx[kept[ca]])
        j = g.choice(intra_idx[kept[cb]])
        inter_sum += float(unit[i] @ unit[j])

    def gaussian_ckl(A: np.ndarray, B: np.ndarray) -> float:
        floor = 1e-8
        mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
        var_a = np.maximum(A.var(axis=0), floor)
        var_b = np.maximum(B.var(axis=0), floor)

        def kl(m0, v0, m1, v1):
            return 0.5 * float(np.sum(v0 / v1 + (m1 - m0) ** 2 / v1
                                      - 1.0 + np.log(v1 / v0)))
        return 0.5 * (kl(mu_a, var_a, mu_b, var_b)
                      + kl(mu_b, var_b, mu_a, var_a))

    intra_ckls = []
    for cl in kept:
        idx = intra_idx[cl]
        perm = g.permutation(idx.size)
        half = idx.size // 2
        intra_ckls.append(gaussian_ckl(V[idx[perm[:half]]],
                                       V[idx[perm[half:half * 2]]]))
    inter_ckls = [gaussian_ckl(V[intra_idx[a]], V[intra_idx[b]])
                  for a, b in itertools.combinations(kept, 2)]

    return {"intra_cos": intra_sum / pairs,
            "inter_cos": inter_sum / pairs,
            "intra_ckl": float(np.mean(intra_ckls)),
            "inter_ckl": float(np.mean(inter_ckls)),
            "skipped_classes": skipped}


def mixup_linearity(model, ds: Dataset, pairs: int, lambdas,
                    seed: int = 0) -> float:
    """Mean squared gap between logits of mixed inputs and mixed logits.

    Exactly zero for any affine model, since the bias terms cancel:
    lambda*b + (1-lambda)*b = b.
    """
    if pairs < 1:
        raise UsageError("pairs must be >= 1")
    g = Rng(seed, ("mixup",)).generator()
    total, count = 0.0, 0
    for _ in range(pairs):
        i, j = g.choice(len(ds), size=2, replace=False)
        xi, xj = ds.features[i], ds.features[j]
        fi = forward(model, xi[None, :])[0]
        fj = forward(model, xj[None, :])[0]
        for lam in lambdas:
            mixed = forward(model, (lam * xi + (1 - lam) * xj)[None, :])[0]
            gap = mixed - (lam * fi + (1 - lam) * fj)
            total += float(gap @ gap)
            count += 1
    return total / count


def noise_learnability_suite(poison: PoisonSet, ds_test: Dataset, victim,
                             seed: int = 0) -> dict:
    """Victim accuracy on the poison-only evaluation variants.

    Builds, from an aligned test set and its poison: the poisoned set
    itself, the bare noises, the noises under +-0.5 global shifts, the
    noises pasted onto foreign images under both labelings, and the
    noises under large +-32/255 sign and uniform global shifts. Returns a
    name -> accuracy table for the victim on each variant.
    """
    n, d = len(ds_test), ds_test.dim
    if poison.mode == "sample-wise":
        if poison.vectors.shape[0] != n:
            raise UsageError("sample-wise poison must align with the test set")
        eps_rows = poison.vectors
    else:
        eps_rows = poison.vectors[ds_test.labels] \
            if poison.vectors.shape[0] > 1 \
            else np.broadcast_to(poison.vectors[0], (n, d))
    g = Rng(seed, ("noise-learn",)).generator()

    # foreign images: a random sample with a different label, per row
    foreign = np.empty(n, dtype=np.int64)
    for i in range(n):
        while True:
            j = int(g.integers(0, n))
            if ds_test.labels[j] != ds_test.labels[i]:
                foreign[i] = j
                break
    rad = (2.0 * g.integers(0, 2, size=n) - 1.0) * (32.0 / 255.0)
    uni = g.uniform(-32.0 / 255.0, 32.0 / 255.0, size=n)

    variants = {
        "clean": (ds_test.features, ds_test.labels),
        "poisoned": (ds_test.features + eps_rows, ds_test.labels),
        "noise-only": (eps_rows, ds_test.labels),
        "noise+0.5": (eps_rows + 0.5, ds_test.labels),
        "noise-0.5": (eps_rows - 0.5, ds_test.labels),
        "noise+foreign(keep-label)": (eps_rows + ds_test.features[foreign],
                                      ds_test.labels),
        "noise+foreign(foreign-label)": (eps_rows + ds_test.features[foreign],
                                         ds_test.labels[foreign]),
        "noise+sign-shift": (eps_rows + rad[:, None], ds_test.labels),
        "noise+uniform-shift": (eps_rows + uni[:, None], ds_test.labels),
    }
    table = {}
    for name, (X, y) in variants.items():
        pred = forward(victim, X).argmax(axis=1)
        table[name] = float(np.mean(pred == y))
    return table
