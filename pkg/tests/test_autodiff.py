"""Recording engine: primitive rules, reverse accumulation, nesting."""

import math

import numpy as np
import pytest

from slotprov import autodiff as ad


def test_record_product_rule_partials():
    g = ad.DiffGraph()
    a, b = g.constants([2.0, 3.0])
    node = g.record("mul", [a, b], 6.0, [3.0, 2.0])
    assert node.value == 6.0
    assert node.partials == (3.0, 2.0)
    assert node.parents == (a, b)


def test_record_leaky_relu_negative_branch():
    g = ad.DiffGraph()
    a = g.constant(-1.0)
    out = ad.leaky_relu(a, slope=0.2)
    assert out.value == pytest.approx(-0.2)
    assert out.partials == (0.2,)


def test_record_rejects_non_finite():
    g = ad.DiffGraph()
    a, b = g.constants([1.0, 2.0])
    with pytest.raises(ValueError):
        g.record("add", [a, b], float("nan"), [1.0, 1.0])
    with pytest.raises(ValueError):
        g.record("add", [a, b], 1.0, [1.0, float("inf")])
    with pytest.raises(ValueError):
        g.constant(float("inf"))


def test_record_rejects_mismatched_partials():
    g = ad.DiffGraph()
    a, b = g.constants([1.0, 2.0])
    with pytest.raises(ValueError):
        g.record("add", [a, b], 3.0, [1.0])


def test_record_rejects_cross_graph_operands():
    g1, g2 = ad.DiffGraph(), ad.DiffGraph()
    a = g1.constant(1.0)
    b = g2.constant(2.0)
    with pytest.raises(ad.GraphMismatchError):
        g1.record("add", [a, b], 3.0, [1.0, 1.0])


def test_backward_square():
    g = ad.DiffGraph()
    x = g.variable(3.0)
    assert ad.backward(x * x, [x]) == [6.0]


def test_backward_linear():
    g = ad.DiffGraph()
    x, y = g.variable(1.0), g.variable(2.0)
    assert ad.backward(x + y, [x, y]) == [1.0, 1.0]


def test_backward_matches_finite_differences_composite():
    g = ad.DiffGraph()
    x = g.variable(0.7)
    out = ad.exp(ad.sin(x))
    (grad,) = ad.backward(out, [x])
    fd = ad.finite_difference_jacobian(
        lambda v: [math.exp(math.sin(v[0]))], [0.7], step=1e-5)[0, 0]
    assert abs(grad - fd) / abs(fd) < 1e-6


def test_backward_unreachable_gets_zero():
    g = ad.DiffGraph()
    x = g.variable(1.0)
    y = g.variable(2.0)
    out = x * x
    later = g.variable(5.0)
    assert ad.backward(out, [y, later]) == [0.0, 0.0]


def test_backward_cross_graph_error():
    g1, g2 = ad.DiffGraph(), ad.DiffGraph()
    x = g1.variable(1.0)
    w = g2.variable(1.0)
    with pytest.raises(ad.GraphMismatchError):
        ad.backward(x * x, [w])


@pytest.mark.parametrize("name,fn,node_fn,low,high", [
    ("add", lambda a, b: a + b, lambda a, b: ad.add(a, b), -2, 2),
    ("sub", lambda a, b: a - b, lambda a, b: ad.sub(a, b), -2, 2),
    ("mul", lambda a, b: a * b, lambda a, b: ad.mul(a, b), -2, 2),
    ("div", lambda a, b: a / b, lambda a, b: ad.div(a, b), 0.5, 2),
    ("exp", lambda a, b: math.exp(a), lambda a, b: ad.exp(a), -2, 2),
    ("log", lambda a, b: math.log(a), lambda a, b: ad.log(a), 0.1, 2),
    ("sin", lambda a, b: math.sin(a), lambda a, b: ad.sin(a), -2, 2),
    ("cos", lambda a, b: math.cos(a), lambda a, b: ad.cos(a), -2, 2),
    ("sqrt", lambda a, b: math.sqrt(a), lambda a, b: ad.sqrt(a), 0.1, 2),
    ("pow3", lambda a, b: a ** 3, lambda a, b: a ** 3, -2, 2),
    ("leaky", lambda a, b: a if a > 0 else 0.2 * a,
     lambda a, b: ad.leaky_relu(a), 0.05, 2),
    ("leaky_neg", lambda a, b: a if a > 0 else 0.2 * a,
     lambda a, b: ad.leaky_relu(a), -2, -0.05),
])
def test_primitive_gradients_match_finite_differences(name, fn, node_fn,
                                                      low, high):
    rng = np.random.default_rng(hash(name) % (2 ** 32))
    for _ in range(20):
        av, bv = rng.uniform(low, high, size=2)
        g = ad.DiffGraph()
        a, b = g.variable(av), g.variable(bv)
        out = node_fn(a, b)
        grads = ad.backward(out, [a, b])
        fd = ad.finite_difference_jacobian(
            lambda v: [fn(v[0], v[1])], [av, bv], step=1e-6)[0]
        for got, want in zip(grads, fd):
            assert abs(got - want) <= 1e-5 * max(1.0, abs(want))


def test_backward_is_linear():
    g = ad.DiffGraph()
    x = g.variable(0.8)
    u = ad.exp(x)
    v = ad.sin(x)
    a_coef, b_coef = 2.5, -1.25
    combined = a_coef * u + b_coef * v
    (grad_comb,) = ad.backward(combined, [x])
    (grad_u,) = ad.backward(u, [x])
    (grad_v,) = ad.backward(v, [x])
    assert grad_comb == a_coef * grad_u + b_coef * grad_v


def test_identical_recordings_give_bit_identical_gradients():
    def build():
        g = ad.DiffGraph()
        xs = g.constants([0.3, -1.2, 0.9])
        out = ad.exp(xs[0]) * ad.sin(xs[1]) + ad.leaky_relu(xs[2]) / xs[0]
        return ad.backward(out, xs)

    assert build() == build()


def test_jacobian_linear_map():
    g = ad.DiffGraph()
    z = g.constants([0.4, -1.1])
    jac = ad.jacobian(lambda v: [2.0 * v[0], 3.0 * v[1]], z)
    assert np.array_equal(jac.values(), [[2.0, 0.0], [0.0, 3.0]])


def test_jacobian_product_partials():
    g = ad.DiffGraph()
    z = g.constants([2.0, 3.0])
    jac = ad.jacobian(lambda v: [v[0] * v[1]], z)
    assert np.array_equal(jac.values(), [[3.0, 2.0]])


def test_jacobian_entries_support_second_order():
    g = ad.DiffGraph()
    z = g.constants([3.0])
    jac = ad.jacobian(lambda v: [v[0] * v[0]], z)
    assert jac.values()[0, 0] == 6.0
    assert ad.backward(jac.entries[0][0], z) == [2.0]


def test_jacobian_slot_block_view():
    g = ad.DiffGraph()
    z = g.constants([1.0, 2.0, 3.0, 4.0])
    jac = ad.jacobian(lambda v: [v[0] + v[1], v[2] * v[3]], z)
    block = jac.slot_block(1, 2)
    vals = [[e.value for e in row] for row in block]
    assert vals == [[0.0, 0.0], [4.0, 3.0]]
    with pytest.raises(IndexError):
        jac.slot_block(2, 2)


def test_nested_jacobian_norm_gradients_match_finite_differences():
    # scalar built from squared Jacobian entries of a small 2-layer net
    rng = np.random.default_rng(7)
    w1 = rng.uniform(-1, 1, size=(3, 2))
    w2 = rng.uniform(-1, 1, size=(2, 3))

    def net(v):
        hidden = [ad.leaky_relu(w1[r, 0] * v[0] + w1[r, 1] * v[1])
                  for r in range(3)]
        return [w2[r, 0] * hidden[0] + w2[r, 1] * hidden[1]
                + w2[r, 2] * hidden[2] for r in range(2)]

    def scalar_of(zv):
        g = ad.DiffGraph()
        z = g.constants(zv)
        jac = ad.jacobian(net, z)
        total = g.constant(0.0)
        for row in jac.entries:
            for e in row:
                total = total + e * e
        return total, z

    z0 = [0.35, -0.6]
    out, z_nodes = scalar_of(z0)
    grads = ad.backward(out, z_nodes)

    def plain(v):
        out, _ = scalar_of(list(v))
        return [out.value]

    fd = ad.finite_difference_jacobian(plain, z0, step=1e-6)[0]
    err = np.linalg.norm(np.array(grads) - fd) / max(np.linalg.norm(fd), 1e-12)
    assert err < 1e-4


def test_jacobian_rejects_non_finite_output():
    g = ad.DiffGraph()
    z = g.constants([2.0])
    with pytest.raises(ValueError):
        ad.jacobian(lambda v: [float("inf")], z)


def test_finite_difference_jacobian_examples():
    lin = ad.finite_difference_jacobian(lambda v: [2.0 * v[0]], [1.0], 1e-5)
    assert abs(lin[0, 0] - 2.0) < 1e-8
    sq = ad.finite_difference_jacobian(lambda v: [v[0] ** 2], [3.0], 1e-5)
    assert abs(sq[0, 0] - 6.0) < 1e-6
    sn = ad.finite_difference_jacobian(lambda v: [math.sin(v[0])], [0.0], 1e-5)
    assert abs(sn[0, 0] - 1.0) < 1e-8


def test_finite_difference_rejects_bad_step_and_values():
    with pytest.raises(ValueError):
        ad.finite_difference_jacobian(lambda v: [v[0]], [1.0], step=0.0)
    with pytest.raises(ValueError):
        ad.finite_difference_jacobian(lambda v: [math.sqrt(v[0])], [0.0],
                                      step=1e-5)


def test_sqrt_rejects_zero():
    g = ad.DiffGraph()
    with pytest.raises(ValueError):
        ad.sqrt(g.constant(0.0))


def test_topological_order_invariant():
    g = ad.DiffGraph()
    x = g.variable(1.5)
    y = ad.exp(x) * ad.sin(x) + x
    for node in g.nodes:
        for parent in node.parents:
            assert parent.index < node.index
    assert y.index == len(g.nodes) - 1
