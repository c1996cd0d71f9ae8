"""Dense LeakyReLU networks over float64 numpy arrays.

One implementation serves the ground-truth generator (applied per slot),
the inference encoder/decoder, and their analytic Jacobians. For the
Jacobian of a piecewise-linear network the activation slopes are locally
constant, so weight gradients of any function of the Jacobian can be pulled
back through the product of layer matrices with the slope diagonals held
fixed; ``jacobian_weight_grads`` does exactly that.

The same forward computation can also be re-recorded on a ``DiffGraph``
(``apply_nodes``) for derivative cross-checks against the scalar engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


def leaky(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def dleaky(x, slope=0.2):
    """Slope of leaky at x; the negative branch is used at exactly 0."""
    return np.where(x > 0, 1.0, slope)


@dataclass
class Mlp:
    """Fully connected layers with LeakyReLU after all but the last.

    ``weights[i]`` has shape (fan_out, fan_in); inputs are row batches.
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    slope: float = 0.2

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def sizes(self):
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = leaky(h, self.slope)
        return h

    def forward_cache(self, x):
        """Forward pass keeping layer inputs and preactivations for backprop.

        Returns (acts, pre): acts[i] is the input to layer i (acts[-1] is
        the output), pre[i] the preactivation of layer i.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        acts = [x]
        pre = []
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w.T + b
            pre.append(a)
            h = leaky(a, self.slope) if i < last else a
            acts.append(h)
        return acts, pre

    def backprop(self, acts, pre, gout):
        """Gradients of a scalar with output-gradient ``gout`` (B, out).

        Returns (weight grads, bias grads, input gradient).
        """
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        g = gout
        for i in reversed(range(self.n_layers)):
            gw[i] = g.T @ acts[i]
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i]
            if i > 0:
                g = g * dleaky(pre[i - 1], self.slope)
        return gw, gb, g

    def jacobian(self, z):
        """Jacobian at a single input, shape (out_dim, in_dim)."""
        return self.jacobian_batch(np.atleast_2d(z))[0]

    def jacobian_batch(self, z):
        """Per-sample Jacobians, shape (B, out, in)."""
        _, pre = self.forward_cache(z)
        return self.jacobian_from_pre(pre)[0]

    def jacobian_from_pre(self, pre):
        """Jacobians from cached preactivations.

        The product W_L D_{L-1} ... D_1 W_1 is accumulated front to back;
        the per-layer slope-scaled factors are kept for
        ``jacobian_weight_grads``. Returns (J, cache) with J of shape
        (B, out, in); layout inside the cache is (width, B, in).
        """
        b_sz = pre[0].shape[0]
        w1 = self.weights[0]
        t = np.broadcast_to(w1[:, None, :], (w1.shape[0], b_sz, w1.shape[1]))
        scaled = []  # D_i ... W_1 products, one per hidden layer
        for i in range(self.n_layers - 1):
            d = dleaky(pre[i], self.slope).T[:, :, None]  # (H_i, B, 1)
            s = d * t
            scaled.append(s)
            w_next = self.weights[i + 1]
            h, in_dim = s.shape[0], s.shape[2]
            t = (w_next @ s.reshape(h, b_sz * in_dim)).reshape(
                w_next.shape[0], b_sz, in_dim)
        jac = np.ascontiguousarray(t.transpose(1, 0, 2))
        return jac, (scaled, pre, b_sz)

    def jacobian_weight_grads(self, cache, gjac):
        """Pull a Jacobian cotangent back to weight gradients.

        ``gjac`` has shape (B, out, in). Activation slopes are piecewise
        constant, so biases and the input get zero gradient almost
        everywhere and only weight matrices receive contributions.
        """
        scaled, pre, b_sz = cache
        in_dim = gjac.shape[2]
        g = np.ascontiguousarray(gjac.transpose(1, 0, 2)).reshape(
            gjac.shape[1], b_sz * in_dim)
        grads = [None] * self.n_layers
        for i in reversed(range(self.n_layers)):
            if i == 0:
                # slope diagonals below layer 0 were already applied while
                # pulling g back, so only the batch sum remains
                grads[0] = g.reshape(g.shape[0], b_sz, in_dim).sum(axis=1)
                break
            s_prev = scaled[i - 1].reshape(-1, b_sz * in_dim)
            grads[i] = g @ s_prev.T
            g = self.weights[i].T @ g
            d = dleaky(pre[i - 1], self.slope).T[:, :, None]
            g = (d * g.reshape(g.shape[0], b_sz, in_dim)).reshape(
                g.shape[0], b_sz * in_dim)
        return grads

    def apply_nodes(self, x_nodes, weight_nodes=None, bias_nodes=None):
        """Re-record the forward pass on a graph, one sample.

        With explicit parameter nodes the result is differentiable with
        respect to the parameters as well as the input.
        """
        h = list(x_nodes)
        last = self.n_layers - 1
        for i in range(self.n_layers):
            w = weight_nodes[i] if weight_nodes is not None else self.weights[i]
            b = bias_nodes[i] if bias_nodes is not None else self.biases[i]
            out = []
            for r in range(self.weights[i].shape[0]):
                acc = b[r] if bias_nodes is not None else float(b[r])
                for c, hc in enumerate(h):
                    wrc = w[r][c] if weight_nodes is not None else float(w[r, c])
                    acc = acc + wrc * hc
                out.append(acc)
            if i < last:
                out = [ad.leaky_relu(a, self.slope) for a in out]
            h = out
        return h

    def param_nodes(self, graph):
        """Leaf nodes mirroring the parameters, plus a flat list in the
        same order as ``flatten_params``."""
        w_nodes, b_nodes, flat = [], [], []
        for w, b in zip(self.weights, self.biases):
            rows = [[graph.constant(v) for v in row] for row in w]
            bs = [graph.constant(v) for v in b]
            w_nodes.append(rows)
            b_nodes.append(bs)
            for row in rows:
                flat.extend(row)
            flat.extend(bs)
        return w_nodes, b_nodes, flat

    def copy(self):
        return Mlp([w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.slope)


def init_mlp(sizes, seed, scale=None, slope=0.2):
    """Uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)] (or +-scale)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = scale if scale is not None else 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-s, s, size=fan_out))
    return Mlp(weights, biases, slope)


def flatten_params(mlps):
    """Concatenate parameters of one or more networks into a flat vector."""
    parts = []
    for m in mlps:
        for w, b in zip(m.weights, m.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
    return np.concatenate(parts)


def bind_params(mlps, flat):
    """Point the networks' parameters at views into ``flat``.

    After binding, in-place updates of ``flat`` (e.g. an optimizer step)
    are immediately visible to the networks. Returns ``flat``.
    """
    offset = 0
    for m in mlps:
        for i, (w, b) in enumerate(zip(m.weights, m.biases)):
            n = w.size
            view = flat[offset:offset + n].reshape(w.shape)
            view[...] = w
            m.weights[i] = view
            offset += n
            n = b.size
            view = flat[offset:offset + n]
            view[...] = b
            m.biases[i] = view
            offset += n
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, need {offset}")
    return flat


def param_count(mlps):
    return sum(w.size + b.size
               for m in mlps for w, b in zip(m.weights, m.biases))
