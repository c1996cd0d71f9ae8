"""Seeded experiment grids with resumable, byte-reproducible outputs.

A grid is the cross product (slot count K) x (penalty weight lambda) x
(run seed). Each run trains one model and leaves a self-contained
directory: metric history CSV, checkpoint, and a status marker written
last so interrupted runs are simply redone on resume. The combined CSV is
assembled from completed runs in sorted order with round-trip float
formatting, so two executions of the same config produce identical bytes
(wall-clock timing stays in the per-run files only).

Configs are plain INI text; ``parse_config`` and ``write_config`` round
trip. Two presets ship: the full reference protocol and a desk-scale grid
sized for minutes, not hours.
"""

from __future__ import annotations

import concurrent.futures
import configparser
import hashlib
import io
import os
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import jacobian as ja
from . import metrics as me
from .generator import (correlated_latents, find_valid_generator,
                        independent_latents, load_generator, render,
                        sample_latents, save_generator, validate_generator)
from .training import (MetricRow, TrainConfig, evaluate_model,
                       load_checkpoint, normalized_reconstruction,
                       save_checkpoint, train)

COMBINED_FIELDS = ("run_id", "K", "M", "lambda", "seed", "epoch", "lr",
                   "rec_raw", "rec_normalized", "contrast_raw",
                   "contrast_normalized", "sis", "s1", "s2")
PLOTDATA_FIELDS = ("rec_normalized", "contrast_normalized", "sis", "K",
                   "lambda", "seed", "epoch")


@dataclass
class ExperimentConfig:
    # generator / process
    k_values: tuple = (2,)
    slot_dim: int = 3
    slot_out: int = 20
    weight_range: float = 10.0
    gen_hidden: int = 20
    leaky_slope: float = 0.2
    process_seed: int = 1234
    # data
    distribution: str = "independent"  # or 'correlated'
    n_train: int = 75_000
    n_val: int = 6_000
    n_test: int = 5_000
    # training grid
    lambdas: tuple = (0.0,)
    seeds: tuple = (0,)
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    decay_epoch: int = 50
    decay_factor: float = 10.0
    eval_period: int = 4
    ae_hidden: int = 80
    # metrics
    ridge: float = 1e-3
    max_fit_points: int = 2000
    # output
    directory: str = "runs"
    workers: int = 1

    def __post_init__(self):
        self.k_values = tuple(int(k) for k in self.k_values)
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not (self.k_values and self.lambdas and self.seeds):
            raise ValueError("k_values, lambdas and seeds must be nonempty")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ValueError("dataset sizes must be positive")
        if self.distribution not in ("independent", "correlated"):
            raise ValueError(f"unknown distribution {self.distribution!r}")

    def train_config(self, lam, seed):
        return TrainConfig(
            lam=lam, epochs=self.epochs, batch_size=self.batch_size,
            base_lr=self.learning_rate, decay_epoch=self.decay_epoch,
            decay_factor=self.decay_factor, eval_period=self.eval_period,
            seed=seed, n_train=self.n_train, n_val=self.n_val,
            n_test=self.n_test, hidden=self.ae_hidden,
            readout=me.ReadoutConfig(ridge=self.ridge,
                                     max_fit_points=self.max_fit_points))


def paper_config(**overrides):
    """The full reference grid: K in {2,3,5}, six penalty weights, ten
    seeds; hours of compute."""
    base = ExperimentConfig(
        k_values=(2, 3, 5),
        lambdas=(1e-7, 1e-5, 1e-2, 0.0, 1.0, 10.0),
        seeds=tuple(range(10)),
    )
    return replace(base, **overrides)


def desk_config(**overrides):
    """CI-sized grid: K=2, lambda in {0,1}, five seeds, 10k/1k/1k samples,
    40 epochs. Minutes on a desktop CPU."""
    base = ExperimentConfig(
        k_values=(2,),
        lambdas=(0.0, 1.0),
        seeds=tuple(range(5)),
        n_train=10_000, n_val=1_000, n_test=1_000,
        epochs=40, decay_epoch=50,
    )
    return replace(base, **overrides)


PRESETS = {"paper": paper_config, "desk": desk_config}

_SECTIONS = {
    "generator": ("k_values", "slot_dim", "slot_out", "weight_range",
                  "gen_hidden", "leaky_slope", "process_seed"),
    "data": ("distribution", "n_train", "n_val", "n_test"),
    "training": ("lambdas", "seeds", "epochs", "batch_size", "learning_rate",
                 "decay_epoch", "decay_factor", "eval_period", "ae_hidden"),
    "metrics": ("ridge", "max_fit_points"),
    "output": ("directory", "workers"),
}
_TUPLE_FIELDS = {"k_values", "lambdas", "seeds"}
_INT_FIELDS = {"slot_dim", "slot_out", "gen_hidden", "process_seed",
               "n_train", "n_val", "n_test", "epochs", "batch_size",
               "decay_epoch", "eval_period", "ae_hidden", "max_fit_points",
               "workers"}
_FLOAT_FIELDS = {"weight_range", "leaky_slope", "learning_rate",
                 "decay_factor", "ridge"}


def _format_value(name, value):
    if name in _TUPLE_FIELDS:
        return ", ".join(repr(v) if isinstance(v, float) else str(v)
                         for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(config, path=None):
    """Serialize to INI; parsing the output reproduces the config."""
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser[section] = {n: _format_value(n, getattr(config, n))
                           for n in names}
    buf = io.StringIO()
    parser.write(buf)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_config(path_or_text):
    """Read an INI config; unknown keys or sections are an error."""
    parser = configparser.ConfigParser()
    text = path_or_text
    if "\n" not in str(path_or_text):
        p = Path(path_or_text)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        text = p.read_text()
    parser.read_string(text)
    kwargs = {}
    known = {n: s for s, names in _SECTIONS.items() for n in names}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for name, raw in parser[section].items():
            if name not in known or known[name] != section:
                raise ValueError(f"unknown key {name!r} in [{section}]")
            kwargs[name] = _parse_value(name, raw)
    return ExperimentConfig(**kwargs)


def _parse_value(name, raw):
    raw = raw.strip()
    if name in _TUPLE_FIELDS:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if name == "lambdas":
            return tuple(float(p) for p in parts)
        return tuple(int(p) for p in parts)
    if name in _INT_FIELDS:
        return int(raw)
    if name in _FLOAT_FIELDS:
        return float(raw)
    return raw


def run_id(config, k, lam, seed):
    """Stable short hash of everything that determines one run's output."""
    relevant = {n: getattr(config, n)
                for names in (_SECTIONS["generator"], _SECTIONS["data"],
                              _SECTIONS["training"])
                for n in names if n not in ("k_values", "lambdas", "seeds")}
    blob = ";".join(f"{n}={relevant[n]!r}" for n in sorted(relevant))
    blob += f";K={k};lambda={float(lam)!r};seed={seed}"
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    run_id: str
    K: int
    lam: float
    seed: int
    status: str
    run_dir: Path

    @property
    def metrics_path(self):
        return self.run_dir / "metrics.csv"

    @property
    def checkpoint_path(self):
        return self.run_dir / "checkpoint.bin"


def _generator_for(config, k):
    return find_valid_generator(
        k, config.slot_dim, config.slot_out, seed=[config.process_seed, k],
        weight_range=config.weight_range, hidden=config.gen_hidden,
        slope=config.leaky_slope)


def _distribution_for(config, k, seed):
    if config.distribution == "independent":
        return independent_latents(k, config.slot_dim)
    # one dependence structure per run seed: each seed is an independent
    # draw of the whole generative process
    return correlated_latents(k, config.slot_dim,
                              seed=[config.process_seed, k, seed, 11])


def _execute_run(config, k, lam, seed, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    gen = _generator_for(config, k)
    dist = _distribution_for(config, k, seed)
    result = train(gen, dist, config.train_config(lam, seed))
    lines = [",".join(MetricRow.CSV_FIELDS)]
    lines += [row.as_csv() for row in result.history]
    (run_dir / "metrics.csv").write_text("\n".join(lines) + "\n")
    save_checkpoint(result.state, result.model, run_dir / "checkpoint.bin")
    (run_dir / "run.txt").write_text(
        f"K={k}\nlambda={float(lam)!r}\nseed={seed}\nstatus={result.status}\n")
    # the status file is the completion marker; written last so a killed
    # run is re-executed from scratch on resume
    (run_dir / "status").write_text(result.status + "\n")
    return result.status


def _run_task(args):
    config_kwargs, k, lam, seed, run_dir = args
    config = ExperimentConfig(**config_kwargs)
    try:
        return _execute_run(config, k, lam, seed, run_dir)
    except Exception as exc:  # failure isolation: record, never abort grid
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "run.txt").write_text(
            f"K={k}\nlambda={float(lam)!r}\nseed={seed}\nstatus=failed\n"
            f"error={exc!r}\n")
        (run_dir / "status").write_text("failed\n")
        return "failed"


def default_workers():
    env = os.environ.get("SLOTPROV_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def run_grid(config, out_dir=None, workers=None, seed_offset=0,
             max_runs=None, log=None):
    """Execute (or resume) the grid; returns the RunRecords in grid order.

    Completed runs (any terminal status) are skipped, so a partial
    execution followed by a rerun yields the same outputs as one
    uninterrupted pass. ``max_runs`` caps how many pending runs are
    executed, which is also how the resume behavior is exercised in tests.
    """
    out_dir = Path(out_dir if out_dir is not None else config.directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(config, out_dir / "config.ini")
    gen_dir = out_dir / "generators"
    gen_dir.mkdir(exist_ok=True)
    for k in config.k_values:
        path = gen_dir / f"generator_K{k}.bin"
        if not path.exists():
            save_generator(_generator_for(config, k), path)
    if workers is None:
        workers = config.workers or default_workers()
    records = []
    pending = []
    for k in config.k_values:
        for lam in config.lambdas:
            for seed in config.seeds:
                seed = seed + seed_offset
                rid = run_id(config, k, lam, seed)
                run_dir = out_dir / "runs" / rid
                status_file = run_dir / "status"
                if status_file.exists():
                    status = status_file.read_text().strip()
                else:
                    status = "pending"
                rec = RunRecord(rid, k, lam, seed, status, run_dir)
                records.append(rec)
                if status == "pending":
                    pending.append(rec)
    if max_runs is not None:
        pending = pending[:max_runs]
    tasks = [(asdict(config), r.K, r.lam, r.seed, str(r.run_dir))
             for r in pending]
    if workers <= 1:
        for rec, task in zip(pending, tasks):
            rec.status = _run_task(task)
            if log:
                log(f"run {rec.run_id} K={rec.K} lambda={rec.lam} "
                    f"seed={rec.seed}: {rec.status}")
    else:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            for rec, status in zip(pending, pool.map(_run_task, tasks)):
                rec.status = status
                if log:
                    log(f"run {rec.run_id} K={rec.K} lambda={rec.lam} "
                        f"seed={rec.seed}: {rec.status}")
    combine_results(config, out_dir, records)
    return records


def combine_results(config, out_dir, records=None):
    """Assemble the per-run histories into one deterministic CSV."""
    out_dir = Path(out_dir)
    if records is None:
        records = run_grid_records(config, out_dir)
    rows = []
    for rec in sorted(records, key=lambda r: (r.K, r.lam, r.seed)):
        if rec.status not in ("completed", "diverged"):
            continue
        metrics = rec.metrics_path
        if not metrics.exists():
            continue
        lines = metrics.read_text().splitlines()
        header = lines[0].split(",")
        for line in lines[1:]:
            vals = dict(zip(header, line.split(",")))
            rows.append((rec, vals))
    out_lines = [",".join(COMBINED_FIELDS)]
    for rec, vals in rows:
        out_lines.append(",".join([
            rec.run_id, str(rec.K), str(config.slot_dim),
            repr(float(rec.lam)), str(rec.seed), vals["epoch"], vals["lr"],
            vals["rec_raw"], vals["rec_normalized"], vals["contrast_raw"],
            vals["contrast_normalized"], vals["sis"], vals["s1"], vals["s2"],
        ]))
    path = out_dir / "combined.csv"
    path.write_text("\n".join(out_lines) + "\n")
    return path


def run_grid_records(config, out_dir, seed_offset=0):
    """RunRecords reflecting on-disk status, without executing anything."""
    out_dir = Path(out_dir)
    records = []
    for k in config.k_values:
        for lam in config.lambdas:
            for seed in config.seeds:
                seed = seed + seed_offset
                rid = run_id(config, k, lam, seed)
                run_dir = out_dir / "runs" / rid
                status_file = run_dir / "status"
                status = (status_file.read_text().strip()
                          if status_file.exists() else "pending")
                records.append(RunRecord(rid, k, lam, seed, status, run_dir))
    return records


def read_combined(path):
    """Combined CSV rows as a list of dicts with numeric fields parsed."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        return []
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        raw = dict(zip(header, line.split(",")))
        row = {}
        for key, val in raw.items():
            if key == "run_id":
                row[key] = val
            elif key in ("K", "seed", "epoch"):
                row[key] = int(val)
            else:
                row[key] = float(val)
        rows.append(row)
    return rows


def plotdata(combined_csv, out_path, log=None):
    """Scatter-ready tuples, one line per evaluation point, sorted by
    (K, lambda, seed, epoch). No rendering happens here."""
    rows = read_combined(combined_csv)
    if not rows and log:
        log("warning: combined results file is empty")
    rows.sort(key=lambda r: (r["K"], r["lambda"], r["seed"], r["epoch"]))
    lines = [",".join(PLOTDATA_FIELDS)]
    for r in rows:
        lines.append(",".join([
            repr(r["rec_normalized"]), repr(r["contrast_normalized"]),
            repr(r["sis"]), str(r["K"]), repr(r["lambda"]), str(r["seed"]),
            str(r["epoch"])]))
    Path(out_path).write_text("\n".join(lines) + "\n")
    return out_path


def validate_generator_report(config, probe_count=100, partition_budget=200):
    """Build and probe one generator per configured K."""
    reports = {}
    for k in config.k_values:
        gen = _generator_for(config, k)
        reports[k] = validate_generator(
            gen, probe_count, seed=[config.process_seed, k, 3],
            partition_budget=partition_budget)
    return reports


def analyze_checkpoint(checkpoint_path, generator_path, n_samples=2000,
                       seed=0, correlated=False):
    """Structure report for a trained model against its generator.

    Reports reconstruction, the contrast variants, index-set overlap of
    the learned decoder, learned mechanism ranks, and identifiability
    against freshly sampled data.
    """
    state, model = load_checkpoint(checkpoint_path)
    gen = load_generator(generator_path)
    if gen.N != model.N or gen.K != model.K or gen.M != model.M:
        raise ValueError(
            f"checkpoint ({model.K},{model.M},{model.N}) does not match "
            f"generator ({gen.K},{gen.M},{gen.N})")
    dist = (correlated_latents(gen.K, gen.M, seed=[seed, 11]) if correlated
            else independent_latents(gen.K, gen.M))
    latents = sample_latents(3 * n_samples, dist, seed=[seed, 0])
    obs = render(gen, latents).data
    z = latents.data
    third = n_samples
    x_val, z_val = obs[:2 * third], z[:2 * third]
    x_test, z_test = obs[2 * third:], z[2 * third:]
    rec_raw, rec_norm, c_raw, c_norm, report = evaluate_model(
        model, x_val, z_val, x_test, z_test)

    z_hat = model.encode(x_val[:256])
    jacs = model.decoder.jacobian_batch(z_hat)
    overlaps = []
    ranks = []
    grad_norm = []
    for i in range(min(32, jacs.shape[0])):
        blocks = ja.slot_jacobian_blocks_from_matrix(jacs[i], model.K)
        sets = ja.pixel_index_sets(blocks)
        overlaps.append(sum(c for _, _, c in sets.overlap_pairs()))
        for k in range(model.K):
            rows = sets.per_slot[k]
            if rows.size:
                ranks.append(ja.numerical_rank(
                    jacs[i][rows], ja.TRAINED_RANK_TOLERANCE).rank)
        grad_norm.append(ja.contrast_gradient_normalized(
            _SingleJacobian(jacs[i]), z_hat[i], model.K).value)

    lines = [
        f"checkpoint step={state.step} epoch={state.epoch}",
        f"rec_raw={rec_raw!r} rec_normalized={rec_norm!r}",
        f"contrast_raw={c_raw!r} contrast_slot_normalized={c_norm!r}",
        f"contrast_gradient_normalized_mean={float(np.mean(grad_norm))!r}",
        f"index_set_overlap_mean_pixels={float(np.mean(overlaps))!r}",
        f"learned_mechanism_ranks={sorted(set(ranks))}",
        f"sis={report.sis!r} s1={report.s1!r} s2={report.s2!r}",
        f"matching={'-'.join(str(p) for p in report.permutation)}",
    ]
    return lines


class _SingleJacobian:
    """Adapter exposing a fixed matrix through the decoder protocol."""

    def __init__(self, jac):
        self._jac = jac

    def jacobian(self, z):
        return self._jac


def analyze_oracle(generator_path, n_samples=2000, seed=0):
    """Ground-truth generator as decoder with the exact inverse encoder:
    the reference point every trained model is compared against."""
    gen = load_generator(generator_path)
    dist = independent_latents(gen.K, gen.M)
    latents = sample_latents(3 * n_samples, dist, seed=[seed, 0])
    z = latents.data
    obs = render(gen, latents).data
    contrast = ja.compositional_contrast(gen, z[0], gen.K)
    rec_raw, rec_norm = normalized_reconstruction(obs, obs)
    n = len(z)
    split = me.EvalSplit(np.arange(n // 3), np.arange(n // 3, 2 * n // 3),
                         np.arange(2 * n // 3, n))
    report = me.sis(z, z, split, K=gen.K, M=gen.M)
    return [
        f"oracle generator K={gen.K} M={gen.M} slot_out={gen.slot_out}",
        f"rec_raw={rec_raw!r} rec_normalized={rec_norm!r}",
        f"contrast_raw={contrast.value!r}",
        f"sis={report.sis!r} s1={report.s1!r} s2={report.s2!r}",
    ]
