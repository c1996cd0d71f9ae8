"""Jacobian structure of slot-to-pixel maps.

Tools for asking, at a given latent point, which output coordinates a slot
actually touches (index sets), how much latent capacity a group of pixels
consumes (numerical rank of the corresponding Jacobian rows), whether two
pixel groups share that capacity (rank additivity vs. deficit), and how far
a map is from the ideal in which every pixel listens to a single slot (the
compositional contrast and its normalized variants).

Array inputs are plain float64 numpy; the ``*_node`` variants build the
same quantities out of live autodiff nodes so they can serve as training
penalties with exact second-order gradients.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

DEFAULT_INDEX_THRESHOLD = 1e-6
DEFAULT_RANK_TOLERANCE = 1e-8
# learned maps carry optimization noise; rank questions about them should
# use a coarser cutoff than analytic constructions
TRAINED_RANK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class IndexSets:
    """Per-slot pixel index lists at one latent point."""

    per_slot: tuple
    threshold: float
    degenerate: bool = False  # all-zero Jacobian: every set empty

    def overlap_pairs(self):
        """Pairs (k, j, shared pixel count) with nonempty intersection."""
        out = []
        for k in range(len(self.per_slot)):
            for j in range(k + 1, len(self.per_slot)):
                shared = np.intersect1d(self.per_slot[k], self.per_slot[j])
                if shared.size:
                    out.append((k, j, shared.size))
        return out

    @property
    def disjoint(self):
        return not self.overlap_pairs()


@dataclass(frozen=True)
class RankReport:
    rank: int
    singular_values: np.ndarray
    tolerance: float
    subset: tuple | None = None
    slot: int | None = None


@dataclass(frozen=True)
class ContrastValue:
    value: float
    variant: str = "raw"

    def __post_init__(self):
        if self.value < 0:
            raise ValueError(f"contrast cannot be negative: {self.value}")


@dataclass(frozen=True)
class IndependenceReport:
    independent: bool
    rank_union: int
    rank_first: int
    rank_second: int
    tolerance: float


@dataclass
class IrreducibilityReport:
    slot: int
    n_checked: int = 0
    exhaustive: bool = False
    counterexamples: list = field(default_factory=list)

    @property
    def irreducible_so_far(self):
        return not self.counterexamples


def slot_jacobian_blocks_from_matrix(jac, K):
    """Split an (N, K*M) Jacobian into K blocks of shape (N, M)."""
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim != 2 or jac.shape[1] % K:
        raise ValueError(f"Jacobian shape {jac.shape} not divisible into {K} slots")
    m = jac.shape[1] // K
    return [jac[:, k * m:(k + 1) * m] for k in range(K)]


def slot_jacobian_blocks(decoder, z, K):
    """Per-slot derivative blocks of a decoder at one latent point.

    The horizontal concatenation of the blocks is the full Jacobian.
    """
    jac = decoder.jacobian(np.asarray(z, dtype=np.float64))
    if not np.all(np.isfinite(jac)):
        raise ValueError("decoder Jacobian contains non-finite entries")
    return slot_jacobian_blocks_from_matrix(jac, K)


def pixel_index_sets(blocks, threshold=DEFAULT_INDEX_THRESHOLD):
    """Pixels that functionally depend on each slot.

    Pixel n belongs to slot k's set when the norm of its gradient with
    respect to slot k exceeds ``threshold`` times the largest such norm
    over all pixels and slots. Exact zero-gradient theory corresponds to
    threshold 0; trained networks need slack for tiny cross-slot leakage.
    """
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    norms = np.stack([np.linalg.norm(b, axis=1) for b in blocks], axis=1)
    top = norms.max()
    if top == 0.0:
        return IndexSets(tuple(np.empty(0, dtype=int) for _ in blocks),
                         threshold, degenerate=True)
    cut = threshold * top
    sets = tuple(np.flatnonzero(norms[:, k] > cut) for k in range(len(blocks)))
    return IndexSets(sets, threshold)


def numerical_rank(matrix, rel_tolerance=DEFAULT_RANK_TOLERANCE, subset=None,
                   slot=None):
    """Count of singular values above rel_tolerance times the largest.

    An exactly zero matrix has rank 0.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if matrix.size == 0:
        raise ValueError("matrix is empty")
    sv = np.linalg.svd(matrix, compute_uv=False)
    if sv[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(sv > rel_tolerance * sv[0]))
    return RankReport(rank, sv, rel_tolerance,
                      subset=None if subset is None else tuple(subset),
                      slot=slot)


def check_independence(s1, s2, jac, rel_tolerance=DEFAULT_RANK_TOLERANCE):
    """Test whether pixel groups s1 and s2 use disjoint latent capacity.

    Independent when the rank of the union of their Jacobian rows equals
    the sum of the individual ranks; dependent when strictly less.
    """
    s1 = np.asarray(sorted(s1), dtype=int)
    s2 = np.asarray(sorted(s2), dtype=int)
    if s1.size == 0 or s2.size == 0:
        raise ValueError("pixel sets must be nonempty")
    if np.intersect1d(s1, s2).size:
        raise ValueError("pixel sets overlap")
    jac = np.asarray(jac, dtype=np.float64)
    r1 = numerical_rank(jac[s1], rel_tolerance).rank
    r2 = numerical_rank(jac[s2], rel_tolerance).rank
    union = numerical_rank(jac[np.concatenate([s1, s2])], rel_tolerance).rank
    return IndependenceReport(union == r1 + r2, union, r1, r2, rel_tolerance)


def _bipartitions(members, budget, rng):
    """Unordered proper bipartitions of ``members``: exhaustive when the
    count fits the budget, otherwise distinct uniform samples."""
    n = len(members)
    total = 2 ** (n - 1) - 1
    if total <= budget:
        for mask in range(total):
            s1 = [members[0]]
            s1 += [members[i + 1] for i in range(n - 1) if mask >> i & 1]
            s2 = [m for m in members if m not in set(s1)]
            yield s1, s2
        return
    seen = set()
    while len(seen) < budget:
        bits = rng.integers(0, 2, size=n)
        bits[0] = 1  # canonical side for the first member
        if bits.all():
            continue
        key = tuple(bits)
        if key in seen:
            continue
        seen.add(key)
        s1 = [m for m, b in zip(members, bits) if b]
        s2 = [m for m, b in zip(members, bits) if not b]
        yield s1, s2


def check_irreducibility(map_like, z, k, partition_budget=200,
                         tolerance=DEFAULT_RANK_TOLERANCE, seed=0,
                         K=None, jac=None, index_sets=None,
                         index_threshold=DEFAULT_INDEX_THRESHOLD):
    """Probe whether slot k's pixels can be split into independent parts.

    Samples up to ``partition_budget`` bipartitions of the slot's pixel
    set (exhaustively when few enough exist) and records every bipartition
    that tests independent. An empty counterexample list means no split
    was found at this point.
    """
    n_slots = K if K is not None else map_like.K
    if jac is None:
        jac = map_like.jacobian(np.asarray(z, dtype=np.float64))
    if index_sets is None:
        blocks = slot_jacobian_blocks_from_matrix(jac, n_slots)
        index_sets = pixel_index_sets(blocks, index_threshold)
    members = [int(i) for i in index_sets.per_slot[k]]
    if not members:
        raise ValueError(f"slot {k} touches no pixels at this point")
    report = IrreducibilityReport(slot=k)
    if len(members) == 1:
        # a single pixel admits no proper bipartition
        report.exhaustive = True
        return report
    total = 2 ** (len(members) - 1) - 1
    report.exhaustive = total <= partition_budget
    rng = np.random.default_rng(seed)
    for s1, s2 in _bipartitions(members, partition_budget, rng):
        verdict = check_independence(s1, s2, jac, tolerance)
        report.n_checked += 1
        if verdict.independent:
            report.counterexamples.append(frozenset(s1))
    return report


def contrast_from_jacobian(jac, K):
    """Raw contrast of one Jacobian: the sum over pixels of all pairwise
    products of per-slot gradient norms."""
    jac = np.asarray(jac, dtype=np.float64)
    return float(contrast_batch(jac[None], K)[0])


def contrast_batch(jac, K):
    """Raw contrast per sample for a stack of Jacobians (B, N, K*M).

    The pairwise-product identity is evaluated per pixel before summing,
    so a pixel with a single active slot contributes an exact 0.
    """
    b_sz, n_pix, total = jac.shape
    m = total // K
    u = np.sqrt((jac.reshape(b_sz, n_pix, K, m) ** 2).sum(axis=3))
    s = u.sum(axis=2)
    return 0.5 * (s ** 2 - (u ** 2).sum(axis=2)).sum(axis=1)


def contrast_batch_with_grad(jac, K):
    """Per-sample contrast and its gradient with respect to the Jacobian.

    At a pixel whose slot-gradient norm is exactly zero the norm's
    subgradient 0 is used, matching the node-level construction.
    """
    b_sz, n_pix, total = jac.shape
    m = total // K
    blocks = jac.reshape(b_sz, n_pix, K, m)
    u = np.sqrt((blocks ** 2).sum(axis=3))
    s = u.sum(axis=2)
    values = 0.5 * (s ** 2 - (u ** 2).sum(axis=2)).sum(axis=1)
    du = s[:, :, None] - u
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(u > 0.0, du / u, 0.0)
    grad = (scale[:, :, :, None] * blocks).reshape(b_sz, n_pix, total)
    return values, grad


def compositional_contrast(decoder, z, K):
    """Raw contrast of a decoder at one latent point.

    Zero exactly when every pixel has a nonzero gradient toward at most
    one slot; any pixel pulled by two slots contributes the product of the
    two gradient norms.
    """
    jac = decoder.jacobian(np.asarray(z, dtype=np.float64))
    if not np.all(np.isfinite(jac)):
        raise ValueError("decoder Jacobian contains non-finite entries")
    return ContrastValue(contrast_from_jacobian(jac, K), "raw")


def contrast_slot_normalized(raw, K):
    """Divide by K^2 - K so values are comparable across slot counts."""
    if K < 2:
        raise ValueError("slot normalization needs K >= 2")
    value = raw.value if isinstance(raw, ContrastValue) else float(raw)
    return ContrastValue(value / (K * K - K), "slot_normalized")


def contrast_gradient_normalized(decoder, z, K):
    """Scale-invariant contrast variant.

    Per pixel, slot-gradient norms are divided by their mean across slots
    and the pixel's pairwise-product sum is weighted by that same mean, so
    rescaling the map rescales the value only through the weights. Pixels
    with no gradient in any slot contribute nothing.
    """
    jac = decoder.jacobian(np.asarray(z, dtype=np.float64))
    if not np.all(np.isfinite(jac)):
        raise ValueError("decoder Jacobian contains non-finite entries")
    n_pix, total = jac.shape
    m = total // K
    u = np.sqrt((jac.reshape(n_pix, K, m) ** 2).sum(axis=2))
    mean = u.mean(axis=1)
    s = u.sum(axis=1)
    pair_sums = 0.5 * (s ** 2 - (u ** 2).sum(axis=1))  # sum_{k<j} u_k u_j
    with np.errstate(invalid="ignore", divide="ignore"):
        per_pixel = np.where(mean > 0.0, pair_sums / mean, 0.0)
    return ContrastValue(float(per_pixel.sum()), "gradient_normalized")


def _node_norm(entries):
    """L2 norm of a tuple of nodes; exact zero input uses subgradient 0."""
    graph = entries[0].graph
    ss = None
    for e in entries:
        sq = ad.mul(e, e)
        ss = sq if ss is None else ad.add(ss, sq)
    if ss.value == 0.0:
        return graph.constant(0.0)
    return ad.sqrt(ss)


def contrast_node(jac, K):
    """Raw contrast over a node-valued Jacobian, as a differentiable node.

    The result participates in further backward passes, which is what
    makes the contrast usable as a training penalty.
    """
    if jac.n_inputs % K:
        raise ValueError(f"{jac.n_inputs} inputs not divisible into {K} slots")
    m = jac.n_inputs // K
    graph = jac.entries[0][0].graph
    total = graph.constant(0.0)
    for row in jac.entries:
        norms = [_node_norm(row[k * m:(k + 1) * m]) for k in range(K)]
        for k in range(K):
            for j in range(k + 1, K):
                total = ad.add(total, ad.mul(norms[k], norms[j]))
    return total


def _z_hash(z):
    return hashlib.sha1(np.ascontiguousarray(z, dtype="<f8").tobytes()
                        ).hexdigest()[:10]


def rank_probe_line(z, slot, subset, report):
    """One structured text record for a rank probe."""
    return (f"z={_z_hash(z)} slot={slot} subset_size={len(subset)} "
            f"rank={report.rank} tol={report.tolerance!r}")


def independence_probe_line(z, slot, s1, s2, report):
    verdict = "independent" if report.independent else "dependent"
    return (f"z={_z_hash(z)} slot={slot} sizes={len(s1)}/{len(s2)} "
            f"ranks={report.rank_first}+{report.rank_second}"
            f"->{report.rank_union} verdict={verdict}")


def irreducibility_report_lines(z, report):
    status = "irreducible-so-far" if report.irreducible_so_far else "reducible"
    yield (f"z={_z_hash(z)} slot={report.slot} checked={report.n_checked} "
           f"exhaustive={report.exhaustive} verdict={status}")
    for part in report.counterexamples:
        yield f"z={_z_hash(z)} slot={report.slot} split={sorted(part)}"
