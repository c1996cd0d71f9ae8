"""Slot identifiability scoring.

How well does an inferred representation isolate the ground-truth slots?
For every (inferred slot, ground-truth slot) pair a radial-basis kernel
ridge readout is fit; pairs are matched with the Hungarian algorithm on
held-out R^2, and the final report combines

* S1: mean over ground-truth slots of the matched readout's test R^2, and
* S2: mean over inferred slots of the best test R^2 they achieve against
  ground-truth slots they were *not* matched with (information leakage).

The identifiability score is S1 - S2. With statistically dependent slots
S2 is nonzero even for a perfect representation, so the S1 component alone
is reported as the slot mean correlation coefficient.

Readout fits are pure given their inputs, so scores are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, pdist

from .generator import LatentBatch


@dataclass(frozen=True)
class ReadoutConfig:
    """Kernel ridge defaults: median-heuristic bandwidth, light ridge,
    and a cap on fit points to bound the cubic solve."""

    bandwidth: float | None = None  # None = median pairwise distance
    ridge: float = 1e-3
    max_fit_points: int = 2000


def median_heuristic_bandwidth(x):
    """Median pairwise distance of the rows of x (1.0 for degenerate x)."""
    if x.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(x)))
    return med if med > 0.0 else 1.0


@dataclass
class ReadoutModel:
    """RBF kernel ridge regressor in dual form."""

    inputs: np.ndarray
    dual_coef: np.ndarray
    bandwidth: float
    ridge: float

    def predict(self, x):
        k = np.exp(-cdist(np.atleast_2d(x), self.inputs, "sqeuclidean")
                   / (2.0 * self.bandwidth ** 2))
        return k @ self.dual_coef


def fit_readout(inputs, targets, bandwidth=None, ridge=1e-3):
    """Fit dual coefficients solving (Gram + ridge*I) alpha = targets.

    The ridge keeps the system solvable even with duplicate input rows;
    a genuinely singular system (ridge too small) raises.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets disagree on sample count")
    if inputs.shape[0] < 2:
        raise ValueError("need at least two samples")
    if ridge <= 0 or (bandwidth is not None and bandwidth <= 0):
        raise ValueError("bandwidth and ridge must be positive")
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(inputs)
    gram = np.exp(-cdist(inputs, inputs, "sqeuclidean")
                  / (2.0 * bandwidth ** 2))
    gram[np.diag_indices_from(gram)] += ridge
    try:
        factor = cho_factor(gram, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"readout system singular (ridge too small): {exc}"
                         ) from exc
    return ReadoutModel(inputs, cho_solve(factor, targets), bandwidth, ridge)


def r2_score(true, predicted):
    """Coefficient of determination, clipped to [0, 1] and averaged over
    target dimensions. Zero-variance targets are an error; callers decide
    how to flag degenerate slots."""
    true = np.asarray(true, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if true.ndim == 1:
        true = true[:, None]
    if predicted.ndim == 1:
        predicted = predicted[:, None]
    if true.shape[0] < 2:
        raise ValueError("need at least two samples")
    ss_tot = ((true - true.mean(axis=0)) ** 2).sum(axis=0)
    if np.any(ss_tot == 0.0):
        raise ValueError("target has zero variance")
    ss_res = ((true - predicted) ** 2).sum(axis=0)
    return float(np.mean(np.maximum(0.0, 1.0 - ss_res / ss_tot)))


@dataclass(frozen=True)
class Assignment:
    """A bijection on slot indices with its total matched score."""

    permutation: tuple  # permutation[row] = assigned column
    total: float


def hungarian(scores, maximize=True):
    """Optimal one-to-one assignment on a square score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"score matrix must be square, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("score matrix has non-finite entries")
    rows, cols = linear_sum_assignment(scores, maximize=maximize)
    perm = [0] * scores.shape[0]
    for r, c in zip(rows, cols):
        perm[r] = int(c)
    return Assignment(tuple(perm), float(scores[rows, cols].sum()))


@dataclass(frozen=True)
class EvalSplit:
    """Index triple: fit readouts on ``fit``, choose the matching on
    ``val``, score on ``test``."""

    fit: np.ndarray
    val: np.ndarray
    test: np.ndarray


def three_way_split(n, n_fit, n_val, seed=None):
    """Consecutive fit/val/test index ranges over n samples."""
    if n_fit + n_val >= n:
        raise ValueError("split sizes exceed sample count")
    idx = np.arange(n)
    return EvalSplit(idx[:n_fit], idx[n_fit:n_fit + n_val],
                     idx[n_fit + n_val:])


@dataclass
class SisReport:
    """Matched readout scores and the leakage-corrected identifiability.

    ``permutation[i]`` is the ground-truth slot matched to inferred slot
    i. ``matched_r2[j]`` is the test R^2 for ground-truth slot j under its
    matched readout. Slots whose ground-truth latents have zero variance
    on the scoring split are flagged and excluded from the means.
    """

    s1: float
    s2: float
    permutation: tuple
    matched_r2: list
    n_fit: int
    n_val: int
    n_test: int
    degenerate_slots: list = field(default_factory=list)

    @property
    def sis(self):
        return self.s1 - self.s2

    @property
    def slot_mcc(self):
        return self.s1

    def lines(self):
        yield (f"sis={self.sis!r} s1={self.s1!r} s2={self.s2!r} "
               f"permutation={'-'.join(str(p) for p in self.permutation)} "
               f"samples={self.n_fit}/{self.n_val}/{self.n_test}")
        for j, r2 in enumerate(self.matched_r2):
            tag = " degenerate" if j in self.degenerate_slots else ""
            yield f"slot={j} matched_r2={r2!r}{tag}"


def _slot_views(data, K, M):
    return [data[:, k * M:(k + 1) * M] for k in range(K)]


def _as_latents(z, K, M):
    if isinstance(z, LatentBatch):
        return z.data, z.K, z.M
    z = np.asarray(z, dtype=np.float64)
    if K is None or M is None:
        raise ValueError("K and M required for plain-array latents")
    return z, K, M


def sis(z_true, z_hat, split, config=None, K=None, M=None):
    """Fit, match and score the slot readout grid.

    Readouts (inferred slot -> ground-truth slot) are fit on the fit
    indices (capped at ``config.max_fit_points``), the matching is chosen
    by Hungarian assignment on the val-index R^2 matrix, and S1/S2 are
    computed from the test-index R^2 matrix.
    """
    config = config or ReadoutConfig()
    z_true, K, M = _as_latents(z_true, K, M)
    z_hat, _, _ = _as_latents(z_hat, K, M)
    if z_true.shape != z_hat.shape:
        raise ValueError("latent batches disagree on shape")
    fit_idx = np.asarray(split.fit)[:config.max_fit_points]
    true_slots = _slot_views(z_true, K, M)
    hat_slots = _slot_views(z_hat, K, M)

    degenerate = [j for j in range(K)
                  if np.all(true_slots[j][split.test].std(axis=0) == 0.0)]
    val_r2 = np.zeros((K, K))
    test_r2 = np.zeros((K, K))
    for i in range(K):
        x_fit = hat_slots[i][fit_idx]
        bw = (config.bandwidth if config.bandwidth is not None
              else median_heuristic_bandwidth(x_fit))
        for j in range(K):
            if j in degenerate:
                continue
            model = fit_readout(x_fit, true_slots[j][fit_idx],
                                bandwidth=bw, ridge=config.ridge)
            val_r2[i, j] = r2_score(true_slots[j][split.val],
                                    model.predict(hat_slots[i][split.val]))
            test_r2[i, j] = r2_score(true_slots[j][split.test],
                                     model.predict(hat_slots[i][split.test]))
    match = hungarian(val_r2, maximize=True)
    perm = match.permutation
    live = [j for j in range(K) if j not in degenerate]
    if not live:
        raise ValueError("every ground-truth slot is degenerate")
    matched_r2 = [float(test_r2[perm.index(j), j]) if j in live else 0.0
                  for j in range(K)]
    s1 = float(np.mean([matched_r2[j] for j in live]))
    s2_terms = []
    for i in range(K):
        rivals = [test_r2[i, j] for j in live if j != perm[i]]
        if rivals:
            s2_terms.append(max(rivals))
    s2 = float(np.mean(s2_terms)) if s2_terms else 0.0
    return SisReport(s1=s1, s2=s2, permutation=perm, matched_r2=matched_r2,
                     n_fit=len(fit_idx), n_val=len(split.val),
                     n_test=len(split.test), degenerate_slots=degenerate)


def slot_mcc(z_true, z_hat, split, config=None, K=None, M=None):
    """S1 alone: the matched-readout score without the leakage penalty,
    appropriate when the latent slots are statistically dependent."""
    return sis(z_true, z_hat, split, config=config, K=K, M=M).slot_mcc
