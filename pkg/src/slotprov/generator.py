"""Ground-truth generative process for slot-structured scenes.

Latent scene vectors hold K slots of dimension M and are drawn from a
zero-mean Gaussian, either with identity covariance or with a covariance
sampled from a Wishart distribution (statistically dependent slots). A
single 2-layer LeakyReLU perceptron, shared across slots, maps each slot to
its own group of ``slot_out`` output coordinates; the concatenation of the
groups is the observation. Each output coordinate therefore depends on
exactly one slot, and with ``slot_out > M`` and generic random weights the
per-slot mechanisms are full rank and cannot be split into independent
parts, which ``validate_generator`` probes numerically.

Everything here is a pure function of its arguments including the seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import jacobian as ja
from .nnet import Mlp

GENERATOR_MAGIC = b"SLOTGEN1"


@dataclass(frozen=True)
class LatentDistribution:
    """Zero-mean Gaussian over K*M latents with full support."""

    kind: str  # 'independent' or 'correlated'
    K: int
    M: int
    covariance: np.ndarray

    def __post_init__(self):
        if self.kind not in ("independent", "correlated"):
            raise ValueError(f"unknown latent distribution kind {self.kind!r}")
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (self.dim, self.dim):
            raise ValueError(
                f"covariance shape {cov.shape} does not match dim {self.dim}")
        if not np.array_equal(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig[0] < -1e-10 * max(eig[-1], 1.0):
            raise ValueError(f"covariance not PSD (min eigenvalue {eig[0]})")
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self):
        return self.K * self.M


def independent_latents(K, M):
    return LatentDistribution("independent", K, M, np.eye(K * M))


def sample_wishart_covariance(dim, dof, seed):
    """Draw from Wishart(I, dof) via the Bartlett decomposition.

    Builds a lower-triangular A with chi-distributed diagonal entries
    (A[i,i]^2 ~ chi2(dof - i)) and standard-normal entries below the
    diagonal, and returns A @ A.T, symmetric by construction.
    """
    if dof < dim:
        raise ValueError(f"dof {dof} must be >= dim {dim}")
    rng = np.random.default_rng(seed)
    a = np.zeros((dim, dim))
    a[np.diag_indices(dim)] = np.sqrt(rng.chisquare(dof - np.arange(dim)))
    a[np.tril_indices(dim, k=-1)] = rng.standard_normal(dim * (dim - 1) // 2)
    return a @ a.T


def correlated_latents(K, M, seed, dof=None):
    """Latents with a Wishart-sampled covariance (scale I, dof = K*M)."""
    dim = K * M
    cov = sample_wishart_covariance(dim, dim if dof is None else dof, seed)
    return LatentDistribution("correlated", K, M, cov)


@dataclass(frozen=True)
class LatentBatch:
    """Rows of latent scene vectors; slot k occupies columns
    [k*M, (k+1)*M)."""

    data: np.ndarray
    K: int
    M: int
    seed: int | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != self.K * self.M:
            raise ValueError(
                f"latent data shape {data.shape} incompatible with "
                f"K={self.K}, M={self.M}")
        object.__setattr__(self, "data", data)

    def __len__(self):
        return self.data.shape[0]

    def slot(self, k):
        return self.data[:, k * self.M:(k + 1) * self.M]


@dataclass(frozen=True)
class ObservationBatch:
    """Rows of rendered observations of pixel dimension N."""

    data: np.ndarray
    N: int
    seed: int | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != self.N:
            raise ValueError(
                f"observation data shape {data.shape}, expected width {self.N}")
        object.__setattr__(self, "data", data)

    def __len__(self):
        return self.data.shape[0]


def sample_latents(n, dist, seed):
    """n rows from N(0, covariance), via the Cholesky factor.

    Deterministic for a fixed (dist, seed).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    try:
        chol = np.linalg.cholesky(dist.covariance)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"covariance has no Cholesky factor: {exc}") from exc
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, dist.dim)) @ chol.T
    return LatentBatch(data, dist.K, dist.M, seed=seed)


@dataclass(frozen=True)
class GeneratorSpec:
    """Slot-wise generator: one 2-layer perceptron shared by all K slots."""

    K: int
    M: int
    slot_out: int
    mlp: Mlp

    def __post_init__(self):
        if self.slot_out <= self.M:
            raise ValueError(
                f"slot_out ({self.slot_out}) must exceed slot dimension "
                f"({self.M}); equal-size mechanisms decompose")
        if self.mlp.in_dim != self.M or self.mlp.out_dim != self.slot_out:
            raise ValueError("per-slot network shape does not match (M, slot_out)")

    @property
    def N(self):
        return self.K * self.slot_out

    @property
    def in_dim(self):
        return self.K * self.M

    @property
    def out_dim(self):
        return self.N

    @property
    def hidden(self):
        return self.mlp.sizes[1]

    @property
    def slope(self):
        return self.mlp.slope

    def forward(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.K * self.M:
            raise ValueError(
                f"latent width {z.shape[1]}, expected {self.K * self.M}")
        return np.concatenate(
            [self.mlp.forward(z[:, k * self.M:(k + 1) * self.M])
             for k in range(self.K)], axis=1)

    def jacobian_batch(self, z):
        """Per-sample Jacobians (B, N, K*M); off-slot blocks are exactly 0."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        b_sz = z.shape[0]
        out = np.zeros((b_sz, self.N, self.K * self.M))
        for k in range(self.K):
            blk = self.mlp.jacobian_batch(z[:, k * self.M:(k + 1) * self.M])
            out[:, k * self.slot_out:(k + 1) * self.slot_out,
                k * self.M:(k + 1) * self.M] = blk
        return out

    def jacobian(self, z):
        return self.jacobian_batch(z)[0]


def build_generator(K, M, slot_out, seed, weight_range=10.0, hidden=None,
                    slope=0.2):
    """Generator with entries drawn uniformly from [-weight_range,
    weight_range]; deterministic per seed.

    The hidden width defaults to ``slot_out``, keeping both layer shapes
    generic for the rank structure the construction relies on.
    """
    if K < 1 or M < 1:
        raise ValueError("K and M must be positive")
    if slot_out <= M:
        raise ValueError(f"slot_out ({slot_out}) must exceed M ({M})")
    hidden = slot_out if hidden is None else hidden
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in ((M, hidden), (hidden, slot_out)):
        weights.append(rng.uniform(-weight_range, weight_range,
                                   size=(fan_out, fan_in)))
        biases.append(rng.uniform(-weight_range, weight_range, size=fan_out))
    return GeneratorSpec(K, M, slot_out, Mlp(weights, biases, slope))


def render(gen, z):
    """Observations for a latent batch; row i is the concatenation over
    slots of the shared perceptron applied to z_i's slot k."""
    if isinstance(z, LatentBatch):
        if z.K != gen.K or z.M != gen.M:
            raise ValueError(
                f"latent batch ({z.K},{z.M}) does not match generator "
                f"({gen.K},{gen.M})")
        data, seed = z.data, z.seed
    else:
        data, seed = np.atleast_2d(np.asarray(z, dtype=np.float64)), None
    return ObservationBatch(gen.forward(data), gen.N, seed=seed)


@dataclass
class GeneratorValidation:
    """Numerical probe report for a constructed generator."""

    probes: int
    mechanism_rank_violations: list = field(default_factory=list)
    full_rank_violations: list = field(default_factory=list)
    reducibility_witnesses: list = field(default_factory=list)
    max_contrast: float = 0.0
    contrast_tolerance: float = 1e-12
    partitions_checked: int = 0

    @property
    def passed(self):
        return (not self.mechanism_rank_violations
                and not self.full_rank_violations
                and not self.reducibility_witnesses
                and self.max_contrast <= self.contrast_tolerance)

    def lines(self):
        yield (f"probes={self.probes} partitions={self.partitions_checked} "
               f"max_contrast={self.max_contrast!r} passed={self.passed}")
        for z_i, k, rank in self.mechanism_rank_violations:
            yield f"probe={z_i} slot={k} mechanism_rank={rank} verdict=rank-deficient"
        for z_i, rank in self.full_rank_violations:
            yield f"probe={z_i} full_jacobian_rank={rank} verdict=not-locally-invertible"
        for z_i, k, part in self.reducibility_witnesses:
            yield (f"probe={z_i} slot={k} partition={sorted(part)} "
                   f"verdict=independent-split")


def validate_generator(gen, probe_count, seed, partition_budget=200,
                       rank_tolerance=1e-8, contrast_tolerance=1e-12):
    """Probe a generator's rank structure at random latent points.

    At each probe the report collects: slots whose mechanism rank is not M,
    probes where the full Jacobian is rank deficient (local invertibility
    check), slot-pixel bipartitions that test independent (a split
    witness), and the largest contrast seen. Violations are report entries,
    not exceptions.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be positive")
    dist = independent_latents(gen.K, gen.M)
    probes = sample_latents(probe_count, dist, seed)
    report = GeneratorValidation(probes=probe_count,
                                 contrast_tolerance=contrast_tolerance)
    rng = np.random.default_rng(seed)
    for i in range(probe_count):
        z = probes.data[i]
        jac = gen.jacobian(z)
        full = ja.numerical_rank(jac, rank_tolerance)
        if full.rank != gen.K * gen.M:
            report.full_rank_violations.append((i, full.rank))
        blocks = ja.slot_jacobian_blocks_from_matrix(jac, gen.K)
        index_sets = ja.pixel_index_sets(blocks)
        for k in range(gen.K):
            rows = index_sets.per_slot[k]
            if rows.size == 0:
                report.mechanism_rank_violations.append((i, k, 0))
                continue
            mech = ja.numerical_rank(jac[rows], rank_tolerance)
            if mech.rank != gen.M:
                report.mechanism_rank_violations.append((i, k, mech.rank))
            irr = ja.check_irreducibility(
                gen, z, k, partition_budget, rank_tolerance,
                seed=int(rng.integers(2 ** 63)), jac=jac,
                index_sets=index_sets)
            report.partitions_checked += irr.n_checked
            for part in irr.counterexamples:
                report.reducibility_witnesses.append((i, k, part))
        contrast = ja.contrast_from_jacobian(jac, gen.K)
        report.max_contrast = max(report.max_contrast, contrast)
    return report


def find_valid_generator(K, M, slot_out, seed, weight_range=10.0, hidden=None,
                         slope=0.2, probe_count=20, max_attempts=10):
    """Build a generator, probing each candidate and moving to the next
    seed on a violation. Random weight draws essentially never fail the
    probes, so this is a cheap guard rather than a search."""
    base = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    for attempt in range(max_attempts):
        attempt_seed = base + [attempt]
        gen = build_generator(K, M, slot_out, attempt_seed,
                              weight_range=weight_range, hidden=hidden,
                              slope=slope)
        if validate_generator(gen, probe_count, seed=attempt_seed,
                              partition_budget=32).passed:
            return gen
    raise RuntimeError(
        f"no valid generator in {max_attempts} attempts from seed {seed}")


def save_generator(gen, path):
    """Versioned flat-file format: magic, little-endian header
    (K, M, slot_out, hidden as uint32, slope as float64), then row-major
    float64 arrays in layer order (weights then bias per layer)."""
    header = struct.pack(
        "<4I d", gen.K, gen.M, gen.slot_out, gen.hidden, gen.slope)
    with open(path, "wb") as fh:
        fh.write(GENERATOR_MAGIC)
        fh.write(header)
        for w, b in zip(gen.mlp.weights, gen.mlp.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_generator(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(GENERATOR_MAGIC))
        if magic != GENERATOR_MAGIC:
            raise ValueError(
                f"{path}: bad magic {magic!r}, expected {GENERATOR_MAGIC!r}")
        header = fh.read(struct.calcsize("<4I d"))
        if len(header) != struct.calcsize("<4I d"):
            raise ValueError(f"{path}: truncated header")
        K, M, slot_out, hidden, slope = struct.unpack("<4I d", header)
        weights, biases = [], []
        for fan_in, fan_out in ((M, hidden), (hidden, slot_out)):
            wb = fh.read(8 * fan_in * fan_out)
            bb = fh.read(8 * fan_out)
            if len(wb) != 8 * fan_in * fan_out or len(bb) != 8 * fan_out:
                raise ValueError(f"{path}: truncated weight data")
            weights.append(np.frombuffer(wb, dtype="<f8").reshape(
                fan_out, fan_in).copy())
            biases.append(np.frombuffer(bb, dtype="<f8").copy())
    return GeneratorSpec(K, M, slot_out, Mlp(weights, biases, slope))


def export_generator_text(gen):
    """Human-readable mirror of the serialized fields, for debugging."""
    lines = [
        "slot generator v1",
        f"K = {gen.K}",
        f"M = {gen.M}",
        f"slot_out = {gen.slot_out}",
        f"hidden = {gen.hidden}",
        f"leaky_slope = {gen.slope!r}",
    ]
    for i, (w, b) in enumerate(zip(gen.mlp.weights, gen.mlp.biases)):
        lines.append(f"layer {i} weights {w.shape[0]}x{w.shape[1]}:")
        for row in w:
            lines.append("  " + " ".join(repr(float(v)) for v in row))
        lines.append(f"layer {i} bias:")
        lines.append("  " + " ".join(repr(float(v)) for v in b))
    return "\n".join(lines) + "\n"
