"""Latent sampling, Wishart covariances, slot-wise generators."""

import numpy as np
import pytest

from slotprov import generator as sg
from slotprov import jacobian as ja
from slotprov.nnet import Mlp


def test_wishart_dim1_matches_chi_square_mean():
    # dim=1, dof=1: the draw is g^2 for g ~ N(0,1), mean 1
    draws = np.array([sg.sample_wishart_covariance(1, 1, seed=[5, i])[0, 0]
                      for i in range(100_000)])
    assert abs(draws.mean() - 1.0) < 0.02


def test_wishart_mean_is_dof_times_identity():
    dim, dof, n = 3, 5, 4000
    total = np.zeros((dim, dim))
    for i in range(n):
        total += sg.sample_wishart_covariance(dim, dof, seed=[9, i])
    mean = total / n
    # var of a Wishart diagonal entry is 2*dof
    se_diag = np.sqrt(2.0 * dof / n)
    assert np.all(np.abs(np.diag(mean) - dof) < 3 * se_diag)
    off = mean[~np.eye(dim, dtype=bool)]
    se_off = np.sqrt(dof / n)
    assert np.all(np.abs(off) < 3 * se_off)


def test_wishart_symmetric_and_psd():
    for i in range(10):
        cov = sg.sample_wishart_covariance(6, 6, seed=i)
        assert np.array_equal(cov, cov.T)
        eig = np.linalg.eigvalsh(cov)
        assert eig[0] >= -1e-10 * eig[-1]


def test_wishart_rejects_dof_below_dim():
    with pytest.raises(ValueError):
        sg.sample_wishart_covariance(4, 3, seed=0)


def test_latent_distribution_validation():
    with pytest.raises(ValueError):
        sg.LatentDistribution("independent", 2, 1, np.array([[1.0, 0.2],
                                                             [0.0, 1.0]]))
    with pytest.raises(ValueError):
        sg.LatentDistribution("independent", 2, 1, -np.eye(2))
    with pytest.raises(ValueError):
        sg.LatentDistribution("weird", 2, 1, np.eye(2))


def test_sample_latents_unit_variance():
    dist = sg.independent_latents(2, 2)
    batch = sg.sample_latents(100_000, dist, seed=3)
    var = batch.data.var(axis=0)
    assert np.all(var > 0.97) and np.all(var < 1.03)


def test_sample_latents_seed_determinism():
    dist = sg.independent_latents(2, 3)
    a = sg.sample_latents(100, dist, seed=42)
    b = sg.sample_latents(100, dist, seed=42)
    assert np.array_equal(a.data, b.data)


def test_sample_latents_observed_correlation():
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    dist = sg.LatentDistribution("correlated", 2, 1, cov)
    batch = sg.sample_latents(100_000, dist, seed=8)
    corr = np.corrcoef(batch.data.T)[0, 1]
    assert abs(corr - 0.5) < 0.02


def test_build_generator_output_dimension():
    gen = sg.build_generator(2, 3, 20, seed=0)
    assert gen.N == 40
    assert gen.in_dim == 6


def test_build_generator_weight_range():
    gen = sg.build_generator(2, 3, 20, seed=1, weight_range=10.0)
    for arr in gen.mlp.weights + gen.mlp.biases:
        assert np.all(arr >= -10.0) and np.all(arr <= 10.0)


def test_build_generator_seed_determinism():
    g1 = sg.build_generator(3, 3, 20, seed=7)
    g2 = sg.build_generator(3, 3, 20, seed=7)
    for a, b in zip(g1.mlp.weights, g2.mlp.weights):
        assert np.array_equal(a, b)


def test_build_generator_rejects_small_slot_out():
    with pytest.raises(ValueError):
        sg.build_generator(2, 3, 3, seed=0)
    with pytest.raises(ValueError):
        sg.build_generator(2, 3, 2, seed=0)


def _identity_generator(K=2, M=2):
    # square identity layers, zero bias: the per-slot map is the identity
    # on positive inputs
    w = [np.eye(M), np.vstack([np.eye(M), np.zeros((1, M))])]
    b = [np.zeros(M), np.zeros(M + 1)]
    return sg.GeneratorSpec(K, M, M + 1, Mlp(w, b, slope=0.2))


def test_render_identity_construction():
    gen = _identity_generator()
    z = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = sg.render(gen, z)
    assert np.array_equal(out.data, [[1.0, 2.0, 0.0, 3.0, 4.0, 0.0]])


def test_render_row_permutation_equivariance():
    gen = sg.build_generator(2, 3, 20, seed=5)
    dist = sg.independent_latents(2, 3)
    z = sg.sample_latents(16, dist, seed=1)
    perm = np.random.default_rng(0).permutation(16)
    out = sg.render(gen, z).data
    out_perm = sg.render(gen, z.data[perm]).data
    assert np.array_equal(out[perm], out_perm)


def test_render_slot_locality():
    gen = sg.build_generator(3, 2, 8, seed=2)
    rng = np.random.default_rng(4)
    z = rng.standard_normal((5, 6))
    z_mod = z.copy()
    z_mod[:, 2:4] = rng.standard_normal((5, 2))  # perturb slot 1 only
    a = sg.render(gen, z).data
    b = sg.render(gen, z_mod).data
    assert np.array_equal(a[:, :8], b[:, :8])
    assert np.array_equal(a[:, 16:], b[:, 16:])
    assert not np.array_equal(a[:, 8:16], b[:, 8:16])


def test_render_dimension_mismatch():
    gen = sg.build_generator(2, 3, 20, seed=0)
    with pytest.raises(ValueError):
        sg.render(gen, np.zeros((4, 5)))


def test_generator_jacobian_is_block_diagonal():
    gen = sg.build_generator(2, 3, 10, seed=3)
    z = np.random.default_rng(0).standard_normal(6)
    jac = gen.jacobian(z)
    assert jac.shape == (20, 6)
    assert np.all(jac[:10, 3:] == 0.0)
    assert np.all(jac[10:, :3] == 0.0)


def test_validate_generator_reference_dimensions():
    gen = sg.build_generator(2, 3, 20, seed=11)
    report = sg.validate_generator(gen, probe_count=20, seed=1,
                                   partition_budget=24)
    assert report.passed
    assert not report.mechanism_rank_violations
    assert report.max_contrast == 0.0


def test_validate_generator_contrast_is_exact_zero():
    gen = sg.build_generator(3, 3, 20, seed=13)
    report = sg.validate_generator(gen, probe_count=10, seed=2,
                                   partition_budget=8)
    assert report.max_contrast <= 1e-12


def test_square_slot_map_is_reducible():
    # with slot_out == M and an invertible square map, every bipartition of
    # the slot's pixels splits into independent full-row-rank parts
    rng = np.random.default_rng(21)
    w = rng.uniform(-1, 1, size=(3, 3)) + 3 * np.eye(3)

    class SquareMap:
        K = 1

        def jacobian(self, z):
            return w

    report = ja.check_irreducibility(SquareMap(), np.zeros(3), 0,
                                     partition_budget=10, seed=0)
    assert not report.irreducible_so_far
    assert report.counterexamples


def test_find_valid_generator_returns_passing_spec():
    gen = sg.find_valid_generator(2, 3, 12, seed=9, probe_count=5)
    assert sg.validate_generator(gen, 5, seed=0, partition_budget=8).passed


def test_generator_serialization_round_trip(tmp_path):
    gen = sg.build_generator(2, 3, 20, seed=17)
    path = tmp_path / "gen.bin"
    sg.save_generator(gen, path)
    loaded = sg.load_generator(path)
    assert loaded.K == gen.K and loaded.M == gen.M
    assert loaded.slot_out == gen.slot_out and loaded.slope == gen.slope
    for a, b in zip(gen.mlp.weights, loaded.mlp.weights):
        assert np.array_equal(a, b)
    for a, b in zip(gen.mlp.biases, loaded.mlp.biases):
        assert np.array_equal(a, b)


def test_generator_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        sg.load_generator(path)


def test_generator_load_rejects_truncation(tmp_path):
    gen = sg.build_generator(2, 3, 20, seed=17)
    path = tmp_path / "gen.bin"
    sg.save_generator(gen, path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(ValueError, match="truncated"):
        sg.load_generator(path)


def test_generator_text_export_mirrors_fields():
    gen = sg.build_generator(2, 3, 8, seed=17)
    text = sg.export_generator_text(gen)
    assert "K = 2" in text and "M = 3" in text and "slot_out = 8" in text
    loaded_first = float(text.splitlines()[7].split()[0])
    assert loaded_first == gen.mlp.weights[0][0, 0]
