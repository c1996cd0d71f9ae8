"""Dense network forward/backward/Jacobian against the recording engine."""

import numpy as np

from slotprov import autodiff as ad
from slotprov.nnet import (Mlp, bind_params, flatten_params, init_mlp,
                           param_count)


def test_forward_matches_node_application():
    mlp = init_mlp([3, 4, 2], seed=0)
    x = np.random.default_rng(1).standard_normal(3)
    out = mlp.forward(x)[0]
    g = ad.DiffGraph()
    nodes = mlp.apply_nodes(g.constants(x))
    assert np.allclose(out, [n.value for n in nodes], atol=1e-12)


def test_backprop_matches_finite_differences():
    mlp = init_mlp([3, 5, 5, 2], seed=2)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3))
    target = rng.standard_normal((4, 2))

    def loss_of(flat_vals):
        probe = init_mlp([3, 5, 5, 2], seed=2)
        buf = np.zeros(param_count([probe]))
        bind_params([probe], buf)
        buf[:] = flat_vals
        return [float(((probe.forward(x) - target) ** 2).sum())]

    acts, pre = mlp.forward_cache(x)
    gw, gb, _ = mlp.backprop(acts, pre, 2.0 * (acts[-1] - target))
    grad = flatten_params([Mlp(gw, gb)])
    fd = ad.finite_difference_jacobian(loss_of, flatten_params([mlp]),
                                       step=1e-6)[0]
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-6


def test_jacobian_batch_matches_finite_differences():
    mlp = init_mlp([4, 6, 6, 5], seed=5)
    rng = np.random.default_rng(6)
    z = rng.standard_normal((3, 4))
    jac = mlp.jacobian_batch(z)
    for i in range(3):
        fd = ad.finite_difference_jacobian(
            lambda v: mlp.forward(np.array(v))[0], z[i], step=1e-6)
        assert np.abs(jac[i] - fd).max() < 1e-6


def test_jacobian_weight_grads_match_graph_engine():
    # scalar = sum of squared Jacobian entries; pullback vs full recording
    mlp = init_mlp([2, 3, 3, 2], seed=8)
    z = np.array([[0.3, -0.7], [1.1, 0.4]])
    _, pre = mlp.forward_cache(z)
    jac, cache = mlp.jacobian_from_pre(pre)
    grads = mlp.jacobian_weight_grads(cache, 2.0 * jac)

    g = ad.DiffGraph()
    w_nodes, b_nodes, flat_nodes = mlp.param_nodes(g)
    total = g.constant(0.0)
    for row in z:
        z_nodes = g.constants(row)
        node_jac = ad.jacobian(
            lambda v: mlp.apply_nodes(v, w_nodes, b_nodes), z_nodes)
        for jac_row in node_jac.entries:
            for e in jac_row:
                total = ad.add(total, ad.mul(e, e))
    ref = np.array(ad.backward(total, flat_nodes))

    got = flatten_params([Mlp(grads, [np.zeros_like(b)
                                      for b in mlp.biases])])
    # the recording includes bias leaves; they get zero gradient
    assert np.allclose(got, ref, atol=1e-10)


def test_bind_params_views_track_updates():
    mlp = init_mlp([2, 3, 1], seed=9)
    flat = np.zeros(param_count([mlp]))
    bind_params([mlp], flat)
    before = mlp.forward(np.ones(2)).copy()
    flat += 0.125
    after = mlp.forward(np.ones(2))
    assert not np.array_equal(before, after)
