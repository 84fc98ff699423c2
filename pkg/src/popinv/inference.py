"""Joint recovery of input and noise distributions by sliced-Wasserstein descent.

The loss compares the observed population against samples pushed through the
forward map with noise added, under a whitening weighting built from the
current noise covariance. In the default ``cut`` mode the weighting is built
from a detached copy of the covariance, so noise parameters receive gradients
only through the sampled noise itself; ``standard`` mode lets gradients flow
through the weighting as well.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .distances import EmpiricalMeasure, SliceSet, sliced_w2
from .errors import ConfigError, ContractViolation, IntegrityError, RunAborted
from .experiments import (
    ExperimentConfig,
    build_forward_model,
    build_input_measure,
    build_noise_measure,
    get_preset,
)
from .forward import GaussianInitMeasure, TimeAveragedObservable
from .optim import LrSchedule, OptimizerState
from .surrogate import Algorithm2Config, MlpSurrogate, ReplayBuffer, run_algorithm2_schedule

# Extreme eigenvalues closer than this (relative to the largest) make the
# condition-number gradient unreliable; the term is then left out of the step.
EIGEN_GAP_RATIO = 1e-10
MAX_CONSECUTIVE_REJECTIONS = 50
TRACE_COLUMN_CAP = 500


@dataclass(frozen=True)
class QuadraticPenalty:
    """Additive term weight * ||param - anchor||^2 on one named parameter."""

    param: str
    anchor: object
    weight: float

    def term(self, params):
        if self.param not in params:
            raise ConfigError(f"penalty references unknown parameter {self.param!r}")
        anchor = np.asarray(self.anchor, dtype=np.float64)
        diff = ad.sub(params[self.param], anchor)
        return ad.mul(ad.vsum(ad.power(diff, 2.0)), float(self.weight))


@dataclass
class LossConfig:
    n_samples: int
    n_slices: int = 100
    prefactor: float = 1.0
    gradient_mode: str = "cut"
    penalties: tuple = ()
    epsilon_kappa: float = 0.0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ConfigError(f"need at least 2 comparison samples, got {self.n_samples}")
        if self.n_slices < 1:
            raise ConfigError(f"need at least 1 slice, got {self.n_slices}")
        if self.gradient_mode not in ("cut", "standard"):
            raise ConfigError(f"gradient_mode must be 'cut' or 'standard', got {self.gradient_mode!r}")
        if self.epsilon_kappa < 0:
            raise ConfigError("condition regularizer weight must be nonnegative")
        if self.prefactor <= 0:
            raise ConfigError("loss prefactor must be positive")
        self.penalties = tuple(
            p if isinstance(p, QuadraticPenalty) else QuadraticPenalty(**p) for p in self.penalties
        )


def condition_regularizer(noise_measure, epsilon):
    """epsilon times the covariance condition number, with a reliability flag.

    Repeated or nonpositive extreme eigenvalues make the eigenvector adjoint
    meaningless, so those cases report ``reliable = False`` and the caller
    keeps the term out of the differentiated loss. The returned value is still
    the numeric ratio when it exists.
    """
    gamma = noise_measure.gamma_matrix()
    extremes = ad.eig_extremes(gamma)
    lam_min = float(extremes.value[0])
    lam_max = float(extremes.value[1])
    reliable = lam_min > 0.0 and (lam_max - lam_min) >= EIGEN_GAP_RATIO * abs(lam_max)
    if not reliable:
        value = math.inf if lam_min <= 0.0 else epsilon * lam_max / lam_min
        return Variable(np.asarray(value)), False
    ratio = ad.div(ad.select(extremes, 1), ad.select(extremes, 0))
    return ad.mul(ratio, float(epsilon)), True


def loss_L(input_measure, noise_measure, data, forward, cfg, rng):
    """One Monte Carlo evaluation of the full objective.

    Consumes `rng` in a fixed order (input samples, noise samples, data
    subsample, slice directions) so two calls with identically seeded
    generators compare identical sample sets.
    """
    weight_source = noise_measure.detach() if cfg.gradient_mode == "cut" else noise_measure
    z = input_measure.sample(cfg.n_samples, rng)
    eps = noise_measure.sample(cfg.n_samples, rng)
    y_model = ad.add(forward(z), eps)
    y_data = data.subsample(cfg.n_samples, rng)
    slices = SliceSet.draw(cfg.n_slices, data.dim, rng)
    sw = sliced_w2(y_data, y_model, weight_source.weighting(), slices)
    total = ad.mul(sw, float(cfg.prefactor))
    info = {"sw": float(sw.value)}
    if cfg.penalties:
        params = {**input_measure.parameters(), **noise_measure.parameters()}
        h = None
        for pen in cfg.penalties:
            t = pen.term(params)
            h = t if h is None else ad.add(h, t)
        total = ad.add(total, h)
        info["h"] = float(h.value)
    if cfg.epsilon_kappa > 0.0:
        r, reliable = condition_regularizer(noise_measure, cfg.epsilon_kappa)
        if reliable:
            total = ad.add(total, r)
        info["r"] = float(r.value)
        info["r_reliable"] = reliable
    return total, info


def step(input_measure, noise_measure, data, forward, cfg, opt, iteration, rng):
    """One descent step; returns the step record with a rejection flag.

    A step whose loss or gradients contain a non-finite value is rejected:
    parameters and optimizer state stay untouched.
    """
    lr = opt.lr_for(iteration)
    with Tape() as tape:
        loss, info = loss_L(input_measure, noise_measure, data, forward, cfg, rng)
    grads = tape.backward(loss)
    named = {}
    for name, p in opt.params.items():
        g = grads.get(p)
        named[name] = np.zeros_like(p.value) if g is None else g
    ok = bool(np.isfinite(loss.value)) and all(np.isfinite(g).all() for g in named.values())
    if ok:
        opt.apply(named, lr)
    info["loss"] = float(loss.value)
    info["lr"] = lr
    info["rejected"] = not ok
    return info


def trace_layout(trainable):
    """Ordered (column, parameter, flat index) triples for the trace CSV.

    Above TRACE_COLUMN_CAP total scalars only the input-side parameters and
    the covariance log-diagonal get columns; everything still lands in the
    final summary.
    """
    total = sum(p.value.size for p in trainable.values())
    keep = trainable
    if total > TRACE_COLUMN_CAP:
        keep = {
            n: p for n, p in trainable.items() if n.startswith("alpha.") or n == "gamma.log_diag"
        }
    layout = []
    for name, p in keep.items():
        base = name.replace(".", "_")
        if p.value.ndim == 0:
            layout.append((base, name, None))
        else:
            layout.extend((f"{base}_{i}", name, i) for i in range(p.value.size))
    return layout


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_trace(path, layout, rows):
    columns = ["iter", "loss", "lr"] + [col for col, _, _ in layout] + ["wall_ms"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


@dataclass
class InferenceResult:
    config: ExperimentConfig
    trace: list
    layout: list
    summary: dict
    input_measure: object
    noise_measure: object
    surrogate: object = None
    surrogate_log: dict = None


def _report_errors(config, rows, fallback):
    window = int(config.learn.get("window", 100))
    out = []
    for entry in config.report:
        col = entry["column"]
        tail = [row[col] for row in rows[-window:]] if rows else []
        if tail:
            series = np.asarray(tail, dtype=np.float64)
        else:
            if col not in fallback:
                raise ConfigError(f"report entry references unknown trace column {col!r}")
            series = np.asarray([fallback[col]])
        if entry["transform"] == "exp":
            series = np.exp(series)
        elif entry["transform"] != "identity":
            raise ConfigError(f"unknown report transform {entry['transform']!r}")
        estimate = float(series.mean())
        truth = float(entry["truth"])
        out.append(
            {
                "label": entry["label"],
                "estimate": estimate,
                "truth": truth,
                "rel_err": abs(estimate - truth) / abs(truth),
            }
        )
    return out


def _build_surrogate_parts(config, model, input_measure, threads, rng_acq, rng_init, rng_net):
    spec = config.surrogate
    probe = input_measure.sample(1, np.random.default_rng(0)).value
    in_dim = probe.shape[1]
    d_y = config.d_y
    net = MlpSurrogate(
        in_dim,
        d_y,
        width=spec["width"],
        depth=spec["depth"],
        lipschitz_bound=spec["lipschitz_bound"],
        rng=rng_net,
    )
    buffer = ReplayBuffer(in_dim, d_y)
    alg2 = Algorithm2Config(
        outer_steps=config.learn["iterations"],
        pretrain_steps=spec["pretrain_steps"],
        inner_steps=spec["inner_steps"],
        acquire_until=spec["acquire_until"],
        pretrain_pairs=spec["pretrain_pairs"],
        batch_size=spec["batch_size"],
        lr=spec["lr"],
        lr_halvings=spec["lr_halvings"],
        acquisition_batch=spec["acquisition_batch"],
    )

    def sample_inputs_now(n):
        return input_measure.sample(n, rng_acq).value

    if config.model["kind"] == "darcy":
        def oracle_batch(z_block):
            u = model.forward_oracle(z_block)
            return u, np.full(len(z_block), -1, dtype=np.int64)
    else:
        obs = TimeAveragedObservable(model)
        init_infer = GaussianInitMeasure(config.learn["infer_init_std"], model.state_dim)

        def oracle_batch(z_block):
            s0 = init_infer.sample(len(z_block), rng_init)
            return obs.evaluate_batch(z_block, s0, threads=threads)

    return net, buffer, alg2, sample_inputs_now, oracle_batch


def run_inference(config, samples, *, seed=None, out_dir=None, threads=1, progress=None):
    """Full descent loop for one experiment; returns the run artifacts.

    `samples` is the observed population, one row per member. With a
    surrogate section in the config the forward map is a concurrently
    trained network; otherwise the model's differentiable forward is used
    directly (time-averaged chaotic observables have no such path and
    require the surrogate).

    With `out_dir` set, writes trace.csv, summary.json and, for surrogate
    runs, the network checkpoint. On an aborted run the partial artifacts
    are written before RunAborted propagates.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != config.d_y:
        raise IntegrityError(
            f"dataset shape {samples.shape} does not match the experiment's "
            f"observation dimension {config.d_y}"
        )
    learn = config.learn
    if config.model["kind"] != "darcy" and not config.uses_surrogate:
        raise ConfigError(
            "time-averaged observables have no differentiable forward; "
            "this experiment needs a surrogate section"
        )
    seed = config.seed if seed is None else int(seed)
    streams = np.random.SeedSequence(seed).spawn(5)
    rng_loss = np.random.default_rng(streams[0])
    rng_acq = np.random.default_rng(streams[1])
    rng_phi = np.random.default_rng(streams[2])
    rng_init = np.random.default_rng(streams[3])
    rng_net = np.random.default_rng(streams[4])

    input_measure = build_input_measure(config)
    noise_measure = build_noise_measure(config)
    model = build_forward_model(config)
    data = EmpiricalMeasure(samples)
    iterations = int(learn["iterations"])
    cfg = LossConfig(
        n_samples=min(int(learn["n_samples"]), data.n),
        n_slices=int(learn["n_slices"]),
        prefactor=config.d_y / 2.0,
        gradient_mode=learn["gradient_mode"],
        penalties=tuple(learn.get("penalties", ())),
        epsilon_kappa=float(learn.get("epsilon_kappa", 0.0)),
    )
    trainable = {
        name: p
        for name, p in {**input_measure.parameters(), **noise_measure.parameters()}.items()
        if p.requires_grad
    }
    if not trainable:
        raise ConfigError("experiment has no learnable parameters")
    schedule = LrSchedule(learn["lr"], learn.get("lr_halvings", 0), max(iterations, 1))
    opt = OptimizerState(trainable, schedule)
    layout = trace_layout(trainable)

    rows = []
    rejected_total = 0
    streak = 0
    timing = threads != 1
    t_start = time.perf_counter()

    def record(iteration, rec, wall_ms):
        nonlocal rejected_total, streak
        row = {"iter": iteration, "loss": rec["loss"], "lr": rec["lr"]}
        for col, name, idx in layout:
            v = trainable[name].value
            row[col] = float(v) if idx is None else float(v.flat[idx])
        row["wall_ms"] = wall_ms if timing else 0.0
        rows.append(row)
        if rec["rejected"]:
            rejected_total += 1
            streak += 1
            if streak > MAX_CONSECUTIVE_REJECTIONS:
                raise RunAborted(
                    f"{streak} consecutive rejected steps (non-finite loss or "
                    f"gradients) at iteration {iteration}; last loss {rec['loss']:.6g}"
                )
        else:
            streak = 0
        if progress is not None and (iteration % 100 == 0 or iteration == iterations - 1):
            progress(f"iter {iteration} loss {rec['loss']:.6g} lr {rec['lr']:.3g}")

    surrogate_net = None
    surrogate_log = None
    aborted_reason = None
    try:
        if config.uses_surrogate:
            surrogate_net, buffer, alg2, sample_now, oracle = _build_surrogate_parts(
                config, model, input_measure, threads, rng_acq, rng_init, rng_net
            )

            def alpha_step(t):
                t0 = time.perf_counter()
                rec = step(
                    input_measure, noise_measure, data, surrogate_net.forward, cfg, opt, t - 1, rng_loss
                )
                record(t - 1, rec, (time.perf_counter() - t0) * 1e3)

            surrogate_log = run_algorithm2_schedule(
                surrogate_net, buffer, alg2, sample_now, oracle, alpha_step, rng_phi
            )
        else:
            for t in range(iterations):
                t0 = time.perf_counter()
                rec = step(input_measure, noise_measure, data, model.forward, cfg, opt, t, rng_loss)
                record(t, rec, (time.perf_counter() - t0) * 1e3)
    except RunAborted as exc:
        aborted_reason = str(exc)

    fallback = {}
    for col, name, idx in layout:
        v = trainable[name].value
        fallback[col] = float(v) if idx is None else float(v.flat[idx])
    summary = {
        "experiment": config.name,
        "config_hash": config.config_hash(),
        "seed": seed,
        "threads": threads,
        "iterations_run": len(rows),
        "rejected_steps": rejected_total,
        "aborted": aborted_reason is not None,
        "final": {name: p.value.tolist() for name, p in trainable.items()},
        "natural": {
            "input": input_measure.natural_values(),
            "noise": noise_measure.natural_values(),
        },
        "report": _report_errors(config, rows, fallback),
        "config": config.to_dict(),
    }
    if aborted_reason is not None:
        summary["abort_reason"] = aborted_reason
    if timing:
        summary["elapsed_ms"] = (time.perf_counter() - t_start) * 1e3
    if surrogate_log is not None:
        tail = surrogate_log["surrogate_losses"][-50:]
        summary["surrogate"] = {
            "pairs_acquired": len(surrogate_log["acquired_steps"]),
            "dropped_pairs": surrogate_log["dropped_pairs"],
            "final_loss": float(np.mean(tail)) if len(tail) else None,
        }

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_trace(os.path.join(out_dir, "trace.csv"), layout, rows)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        if surrogate_net is not None:
            surrogate_net.save(os.path.join(out_dir, "surrogate.npz"))

    result = InferenceResult(
        config=config,
        trace=rows,
        layout=layout,
        summary=summary,
        input_measure=input_measure,
        noise_measure=noise_measure,
        surrogate=surrogate_net,
        surrogate_log=surrogate_log,
    )
    if aborted_reason is not None:
        raise RunAborted(aborted_reason, result=result)
    return result


def _study_cell_seed(base_seed, mode, n, gamma, rep):
    mode_code = 0 if mode == "cut" else 1
    return np.random.SeedSequence(
        [int(base_seed), mode_code, int(n), int(round(gamma * 1e9)), int(rep)]
    )


def convergence_study(
    n_values,
    gamma_values,
    modes=("cut", "standard"),
    repeats=20,
    *,
    base_seed=0,
    iterations=400,
    lr=0.1,
    lr_halvings=4,
    n_samples=None,
    n_slices=None,
    out_csv=None,
    progress=None,
):
    """Grid of short runs measuring noise-scale recovery error.

    Each (mode, N, gamma) cell runs `repeats` independent repetitions with
    fresh data and randomized initialization; aborted runs are skipped and
    the surviving count lands in the `runs` column. `n_samples` defaults to
    min(500, N) per run; `n_slices` defaults to the preset's slice count.
    """
    from .datagen import generate_population

    base = get_preset("darcy_uncorrelated")
    out = []
    for mode in modes:
        for n in n_values:
            for gamma in gamma_values:
                errs = []
                for rep in range(repeats):
                    ss = _study_cell_seed(base_seed, mode, n, gamma, rep)
                    data_ss, init_ss, run_ss = ss.spawn(3)
                    rng_init = np.random.default_rng(init_ss)
                    m0 = rng_init.uniform(0.0, 1.0)
                    sigma0 = rng_init.uniform(0.2, 0.8)
                    gamma0 = math.exp(rng_init.uniform(math.log(0.02), math.log(0.5)))
                    per_run = min(500, n) if n_samples is None else min(n_samples, n)
                    overrides = {
                        "name": f"study_{mode}_n{n}",
                        "data.n": int(n),
                        "noise_truth.gamma": float(gamma),
                        "init_values.m": m0,
                        "init_values.log_sigma": math.log(sigma0),
                        "init_values.log_gamma": math.log(gamma0),
                        "learn.iterations": int(iterations),
                        "learn.lr": float(lr),
                        "learn.lr_halvings": int(lr_halvings),
                        "learn.n_samples": int(per_run),
                        "learn.gradient_mode": mode,
                        "learn.window": 100,
                    }
                    if n_slices is not None:
                        overrides["learn.n_slices"] = int(n_slices)
                    cfg = base.override(**overrides)
                    dataset = generate_population(cfg, seed=int(data_ss.generate_state(1)[0]))
                    try:
                        result = run_inference(
                            cfg, dataset.samples, seed=int(run_ss.generate_state(1)[0])
                        )
                    except RunAborted:
                        continue
                    entry = next(e for e in result.summary["report"] if e["label"] == "gamma")
                    errs.append(entry["rel_err"])
                    if progress is not None:
                        progress(
                            f"{mode} N={n} gamma={gamma:g} rep {rep + 1}/{repeats} "
                            f"rel_err {entry['rel_err']:.4f}"
                        )
                arr = np.asarray(errs, dtype=np.float64)
                out.append(
                    {
                        "mode": mode,
                        "N": int(n),
                        "gamma_dagger": float(gamma),
                        "mean_rel_err": float(arr.mean()) if errs else math.nan,
                        "std_rel_err": float(arr.std(ddof=1)) if len(errs) > 1 else 0.0,
                        "runs": len(errs),
                    }
                )
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mode", "N", "gamma_dagger", "mean_rel_err", "std_rel_err", "runs"])
            for row in out:
                writer.writerow(
                    [
                        row["mode"],
                        row["N"],
                        _fmt(row["gamma_dagger"]),
                        _fmt(row["mean_rel_err"]),
                        _fmt(row["std_rel_err"]),
                        row["runs"],
                    ]
                )
    return out
