"""Autoencoder training with a contrast penalty on the decoder Jacobian.

The optimized objective per batch is

    mean_b ||dec(enc(x_b)) - x_b||^2  +  lambda * mean_b C(dec, enc(x_b))

where C is the raw compositional contrast of the decoder at the inferred
latent. Observations are standardized per pixel (an affine, invertible
reparameterization estimated on the training split and stored with the
model); this leaves the generative assumptions and the zero set of both
terms untouched but makes the optimization scale-free, which matters
because raw observations from wide-weight generators have per-pixel
standard deviations in the hundreds. Reconstruction is reported in
original units and, normalized, relative to the data's per-pixel variance.

Gradients come from a closed-form pullback: for LeakyReLU networks the
activation slopes are piecewise constant, so the decoder Jacobian is
locally multilinear in the weight matrices and the contrast gradient
reaches only those matrices (not biases nor, through the latent, the
encoder). The scalar recording engine provides an independent route to
the same gradient for verification on small models.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import jacobian as ja
from . import metrics as me
from .generator import render, sample_latents
from .nnet import Mlp, bind_params, init_mlp, param_count

CHECKPOINT_MAGIC = b"SLOTAE01"


@dataclass
class AutoEncoderSpec:
    """Mirrored 3-layer LeakyReLU encoder/decoder around a K*M bottleneck.

    ``input_mean``/``input_scale`` hold the per-pixel standardization; both
    are identity until calibrated. The decoder's latent-to-pixel map in
    standardized units is what the contrast penalty sees.
    """

    encoder: Mlp
    decoder: Mlp
    K: int
    M: int
    input_mean: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        latent = self.K * self.M
        if self.encoder.out_dim != latent or self.decoder.in_dim != latent:
            raise ValueError(
                f"bottleneck must be K*M={latent}; encoder gives "
                f"{self.encoder.out_dim}, decoder takes {self.decoder.in_dim}")
        if self.encoder.in_dim != self.decoder.out_dim:
            raise ValueError("encoder input and decoder output disagree")
        if self.input_mean is None:
            self.input_mean = np.zeros(self.N)
        if self.input_scale is None:
            self.input_scale = np.ones(self.N)

    @property
    def N(self):
        return self.encoder.in_dim

    @property
    def latent_dim(self):
        return self.K * self.M

    def standardize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.input_mean) / self.input_scale

    def destandardize(self, x_std):
        return x_std * self.input_scale + self.input_mean

    def calibrate(self, x):
        """Fit the per-pixel affine map on a reference split."""
        x = np.asarray(x, dtype=np.float64)
        self.input_mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale == 0.0] = 1.0
        self.input_scale = scale

    def encode(self, x):
        return self.encoder.forward(self.standardize(x))

    def decode(self, z):
        return self.destandardize(self.decoder.forward(z))

    def reconstruct(self, x):
        return self.decode(self.encode(x))


def build_autoencoder(gen_or_n, K=None, M=None, hidden=80, seed=0, slope=0.2):
    """Fresh model for an observation width; accepts a generator for its
    dimensions. Weights start uniform on +-1/sqrt(fan_in)."""
    if K is None:
        n, K, M = gen_or_n.N, gen_or_n.K, gen_or_n.M
    else:
        n = gen_or_n
    latent = K * M
    enc = init_mlp([n, hidden, hidden, latent], [seed, 1], slope=slope)
    dec = init_mlp([latent, hidden, hidden, n], [seed, 2], slope=slope)
    return AutoEncoderSpec(enc, dec, K, M)


@dataclass(frozen=True)
class ObjectiveValue:
    """Loss with its two terms, each a batch mean."""

    loss: float
    reconstruction: float
    contrast: float
    lam: float


def _contrast_weight(lam, variant, K):
    if variant == "raw":
        return lam
    if variant == "slot_normalized":
        return lam / (K * K - K)
    raise ValueError(f"unknown contrast variant {variant!r}")


def objective(model, batch, lam, contrast_variant="raw"):
    """Objective value with per-term breakdown (no gradients).

    ``batch`` is raw observations; the terms are computed in the model's
    standardized units, reconstruction as mean summed squared error and
    contrast as the mean per-sample raw contrast of the decoder at the
    inferred latents.
    """
    x = _batch_data(batch)
    x_std = model.standardize(x)
    z_hat = model.encoder.forward(x_std)
    x_rec = model.decoder.forward(z_hat)
    if not np.all(np.isfinite(x_rec)):
        raise FloatingPointError("non-finite activations in reconstruction")
    rec = float(((x_rec - x_std) ** 2).sum(axis=1).mean())
    jac = model.decoder.jacobian_batch(z_hat)
    contrast = float(ja.contrast_batch(jac, model.K).mean())
    weight = _contrast_weight(lam, contrast_variant, model.K)
    return ObjectiveValue(rec + weight * contrast, rec, contrast, lam)


def objective_grad(model, batch, lam, contrast_variant="raw"):
    """Objective value and its gradient in flat [encoder, decoder] order.

    The contrast term's gradient is pulled back through the decoder
    Jacobian with activation slopes held fixed, which is exact almost
    everywhere for piecewise-linear networks; biases and the encoder get
    contrast gradient 0.
    """
    x = _batch_data(batch)
    x_std = model.standardize(x)
    b_sz = x_std.shape[0]
    enc, dec = model.encoder, model.decoder
    e_acts, e_pre = enc.forward_cache(x_std)
    z_hat = e_acts[-1]
    d_acts, d_pre = dec.forward_cache(z_hat)
    x_rec = d_acts[-1]
    if not np.all(np.isfinite(x_rec)):
        raise FloatingPointError("non-finite activations in reconstruction")
    err = x_rec - x_std
    rec = float((err ** 2).sum(axis=1).mean())
    g_rec = 2.0 * err / b_sz
    d_gw, d_gb, g_z = dec.backprop(d_acts, d_pre, g_rec)
    e_gw, e_gb, _ = enc.backprop(e_acts, e_pre, g_z)

    jac, cache = dec.jacobian_from_pre(d_pre)
    values, g_jac = ja.contrast_batch_with_grad(jac, model.K)
    contrast = float(values.mean())
    weight = _contrast_weight(lam, contrast_variant, model.K)
    if weight != 0.0:
        c_gw = dec.jacobian_weight_grads(cache, g_jac * (weight / b_sz))
        for i in range(dec.n_layers):
            d_gw[i] = d_gw[i] + c_gw[i]
    flat = np.concatenate(
        [np.concatenate([w.ravel(), b.ravel()])
         for w, b in zip(e_gw, e_gb)]
        + [np.concatenate([w.ravel(), b.ravel()])
           for w, b in zip(d_gw, d_gb)])
    return ObjectiveValue(rec + weight * contrast, rec, contrast, lam), flat


def objective_graph(model, batch, lam, contrast_variant="raw"):
    """Same objective assembled on a fresh recording graph.

    Returns (loss node, parameter leaf nodes in flat order, graph). Meant
    for small models: the whole batch is recorded scalar by scalar. The
    gradient from ``backward(loss, params)`` is the reference for
    ``objective_grad``.
    """
    x_std = model.standardize(_batch_data(batch))
    graph = ad.DiffGraph()
    enc, dec = model.encoder, model.decoder
    e_wn, e_bn, e_flat = enc.param_nodes(graph)
    d_wn, d_bn, d_flat = dec.param_nodes(graph)
    weight = _contrast_weight(lam, contrast_variant, model.K)
    total = graph.constant(0.0)
    for row in x_std:
        x_nodes = graph.constants(row)
        z_nodes = enc.apply_nodes(x_nodes, e_wn, e_bn)
        out_nodes = dec.apply_nodes(z_nodes, d_wn, d_bn)
        rec = graph.constant(0.0)
        for o, t in zip(out_nodes, x_nodes):
            diff = ad.sub(o, t)
            rec = ad.add(rec, ad.mul(diff, diff))
        sample = rec
        if weight != 0.0:
            jac = ad.jacobian(
                lambda zz: dec.apply_nodes(zz, d_wn, d_bn), z_nodes)
            sample = ad.add(
                sample, ad.mul(weight, ja.contrast_node(jac, model.K)))
        total = ad.add(total, sample)
    loss = ad.div(total, float(x_std.shape[0]))
    return loss, e_flat + d_flat, graph


def _batch_data(batch):
    data = getattr(batch, "data", batch)
    return np.atleast_2d(np.asarray(data, dtype=np.float64))


@dataclass
class TrainConfig:
    """Run hyperparameters. Defaults follow the reference protocol; the
    desk preset in the experiments layer shrinks sizes and epochs."""

    lam: float = 0.0
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 1e-3
    decay_epoch: int = 50
    decay_factor: float = 10.0
    eval_period: int = 4
    seed: int = 0
    n_train: int = 75_000
    n_val: int = 6_000
    n_test: int = 5_000
    hidden: int = 80
    contrast_variant: str = "raw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    divergence_limit: float = 1e12
    readout: me.ReadoutConfig = field(default_factory=me.ReadoutConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.eval_period < 1:
            raise ValueError("eval_period must be at least 1")


@dataclass
class TrainState:
    """Flat parameters with Adam moments and schedule position."""

    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    epoch: int = 0
    seed: int = 0

    @classmethod
    def fresh(cls, n_params, seed=0):
        return cls(np.zeros(n_params), np.zeros(n_params), np.zeros(n_params),
                   seed=seed)


def adam_step(state, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place on the state. Deterministic."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    state.params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def lr_schedule(epoch, base_lr, decay_epoch=50, factor=10.0):
    """base_lr for epoch indices below decay_epoch, base_lr/factor after."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return base_lr if epoch < decay_epoch else base_lr / factor


@dataclass
class MetricRow:
    epoch: int
    lr: float
    rec_raw: float
    rec_normalized: float
    contrast_raw: float
    contrast_normalized: float
    sis: float
    s1: float
    s2: float
    wall_time_s: float

    CSV_FIELDS = ("epoch", "lr", "rec_raw", "rec_normalized", "contrast_raw",
                  "contrast_normalized", "sis", "s1", "s2", "wall_time_s")

    def as_csv(self, fields=None):
        return ",".join(_csv_num(getattr(self, f))
                        for f in (fields or self.CSV_FIELDS))


def _csv_num(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class TrainResult:
    state: TrainState
    model: AutoEncoderSpec
    history: list
    status: str  # 'completed', 'diverged', or 'empty'
    config: TrainConfig


def normalized_reconstruction(x_rec, x_ref):
    """Mean summed squared error per pixel, relative to the reference
    split's mean per-pixel variance (scale-free in data units and in K)."""
    x_rec = np.asarray(x_rec, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    mse = float(((x_rec - x_ref) ** 2).sum(axis=1).mean())
    denom = x_ref.shape[1] * max(float(x_ref.var(axis=0).mean()),
                                 np.finfo(float).tiny)
    return mse, mse / denom


def evaluate_model(model, x_val, z_val, x_test, z_test, readout=None,
                   decoder_for_contrast=None):
    """Held-out metrics: reconstruction on the validation split, contrast
    of the decoder at validation latents, identifiability fit on the first
    half of validation, matched on the second half, scored on test."""
    z_hat_val = model.encode(x_val)
    rec_raw, rec_norm = normalized_reconstruction(
        model.decode(z_hat_val), x_val)
    dec = decoder_for_contrast or model.decoder
    jac = dec.jacobian_batch(z_hat_val)
    contrast_raw = float(ja.contrast_batch(jac, model.K).mean())
    contrast_norm = ja.contrast_slot_normalized(contrast_raw, model.K).value

    z_hat_test = model.encode(x_test)
    n_val = x_val.shape[0]
    z_true = np.concatenate([z_val, z_test])
    z_hat = np.concatenate([z_hat_val, z_hat_test])
    split = me.EvalSplit(np.arange(n_val // 2),
                         np.arange(n_val // 2, n_val),
                         np.arange(n_val, n_val + x_test.shape[0]))
    report = me.sis(z_true, z_hat, split, config=readout,
                    K=model.K, M=model.M)
    return (rec_raw, rec_norm, contrast_raw, contrast_norm, report)


def train(gen, dist, config, eval_hook=None):
    """Full optimization loop over freshly sampled data.

    Draws train/val/test splits from the latent distribution, standardizes
    observations on the train split, and runs shuffled minibatch epochs.
    Every ``eval_period`` epochs the held-out metrics are appended to the
    history (and passed to ``eval_hook`` if given). Divergence aborts the
    run with the history preserved rather than raising.
    """
    t0 = time.monotonic()
    n_total = config.n_train + config.n_val + config.n_test
    latents = sample_latents(n_total, dist, seed=[config.seed, 0])
    obs = render(gen, latents).data
    z = latents.data
    x_train = obs[:config.n_train]
    sl_val = slice(config.n_train, config.n_train + config.n_val)
    sl_test = slice(config.n_train + config.n_val, n_total)
    x_val, z_val = obs[sl_val], z[sl_val]
    x_test, z_test = obs[sl_test], z[sl_test]

    model = build_autoencoder(gen, hidden=config.hidden, seed=config.seed)
    model.calibrate(x_train)
    x_train_std = model.standardize(x_train)

    n_params = param_count([model.encoder, model.decoder])
    state = TrainState.fresh(n_params, seed=config.seed)
    flat = np.concatenate(
        [np.concatenate([w.ravel(), b.ravel()])
         for mlp in (model.encoder, model.decoder)
         for w, b in zip(mlp.weights, mlp.biases)])
    state.params = bind_params([model.encoder, model.decoder], flat)

    history = []
    if config.epochs == 0:
        return TrainResult(state, model, history, "empty", config)

    status = "completed"
    for epoch_idx in range(config.epochs):
        lr = lr_schedule(epoch_idx, config.base_lr, config.decay_epoch,
                         config.decay_factor)
        order = np.random.default_rng(
            [config.seed, 3, epoch_idx]).permutation(config.n_train)
        diverged = False
        for lo in range(0, config.n_train, config.batch_size):
            xb = x_train_std[order[lo:lo + config.batch_size]]
            try:
                value, grad = _objective_grad_standardized(
                    model, xb, config.lam, config.contrast_variant)
            except FloatingPointError:
                diverged = True
                break
            if not np.isfinite(value.loss) or value.loss > config.divergence_limit:
                diverged = True
                break
            adam_step(state, grad, lr, config.beta1, config.beta2, config.eps)
        state.epoch = epoch_idx + 1
        if diverged:
            status = "diverged"
            break
        if (epoch_idx + 1) % config.eval_period == 0:
            rec_raw, rec_norm, c_raw, c_norm, report = evaluate_model(
                model, x_val, z_val, x_test, z_test, readout=config.readout)
            row = MetricRow(epoch=epoch_idx + 1, lr=lr, rec_raw=rec_raw,
                            rec_normalized=rec_norm, contrast_raw=c_raw,
                            contrast_normalized=c_norm, sis=report.sis,
                            s1=report.s1, s2=report.s2,
                            wall_time_s=time.monotonic() - t0)
            history.append(row)
            if eval_hook is not None:
                eval_hook(row)
    return TrainResult(state, model, history, status, config)


def _objective_grad_standardized(model, x_std, lam, variant):
    """objective_grad for inputs already in standardized units."""
    ident = _IdentityView(model)
    return objective_grad(ident, x_std, lam, variant)


class _IdentityView:
    """Model view that skips standardization (inputs already transformed)."""

    def __init__(self, model):
        self.encoder = model.encoder
        self.decoder = model.decoder
        self.K = model.K
        self.M = model.M

    def standardize(self, x):
        return x


def save_checkpoint(state, model, path):
    """Binary checkpoint: magic, architecture header, standardization,
    parameter vector, Adam moments, step/epoch counters."""
    enc_sizes = model.encoder.sizes
    dec_sizes = model.decoder.sizes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<4I d", model.K, model.M, model.N,
                             len(enc_sizes), model.encoder.slope))
        fh.write(np.asarray(enc_sizes, dtype="<u4").tobytes())
        fh.write(struct.pack("<I", len(dec_sizes)))
        fh.write(np.asarray(dec_sizes, dtype="<u4").tobytes())
        for arr in (model.input_mean, model.input_scale,
                    state.params, state.m, state.v):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(struct.pack("<QQq", state.step, state.epoch, state.seed))


def load_checkpoint(path):
    """Rebuild (state, model) from a checkpoint; round-trip is bit-exact."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(
                f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        head = fh.read(struct.calcsize("<4I d"))
        if len(head) != struct.calcsize("<4I d"):
            raise ValueError(f"{path}: truncated header")
        k, m, n, n_enc, slope = struct.unpack("<4I d", head)
        enc_sizes = np.frombuffer(fh.read(4 * n_enc), dtype="<u4")
        (n_dec,) = struct.unpack("<I", fh.read(4))
        dec_sizes = np.frombuffer(fh.read(4 * n_dec), dtype="<u4")
        if len(enc_sizes) != n_enc or len(dec_sizes) != n_dec:
            raise ValueError(f"{path}: truncated architecture header")

        def read_f8(count):
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated array data")
            return np.frombuffer(raw, dtype="<f8").copy()

        mean = read_f8(n)
        scale = read_f8(n)
        enc = init_mlp([int(s) for s in enc_sizes], 0, slope=slope)
        dec = init_mlp([int(s) for s in dec_sizes], 0, slope=slope)
        model = AutoEncoderSpec(enc, dec, k, m, mean, scale)
        if model.N != n:
            raise ValueError(f"{path}: header width {n} != encoder input")
        count = param_count([enc, dec])
        params = read_f8(count)
        m_vec = read_f8(count)
        v_vec = read_f8(count)
        tail = fh.read(struct.calcsize("<QQq"))
        if len(tail) != struct.calcsize("<QQq"):
            raise ValueError(f"{path}: truncated counters")
        step, epoch, seed = struct.unpack("<QQq", tail)
    state = TrainState(params, m_vec, v_vec, step=step, epoch=epoch, seed=seed)
    state.params = bind_params([model.encoder, model.decoder], params)
    return state, model


def history_csv_lines(history, header=True, fields=None):
    fields = fields or MetricRow.CSV_FIELDS
    if header:
        yield ",".join(fields)
    for row in history:
        yield row.as_csv(fields)
