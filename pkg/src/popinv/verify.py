"""Fast built-in self-checks behind the `verify` command.

Each check is independent, takes at most a few seconds, and carries its own
reference computation (brute force, finite differences, closed forms) so a
regression in the package cannot hide inside the thing it broke.
"""

from __future__ import annotations

import itertools
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .distances import EmpiricalMeasure, SliceSet, WeightingOperator, sliced_w2, wasserstein2_1d
from .experiments import get_preset
from .forward import Darcy1DModel, Lorenz96SingleScale, kernel_backend
from .inference import LossConfig, loss_L
from .measures import LogNormalScalarParams, ScaledIdentityCov
from .optim import LrSchedule
from .surrogate import MlpSurrogate

CHECKS = []


def check(name):
    def deco(fn):
        CHECKS.append((name, fn))
        return fn

    return deco


@check("ot-bruteforce")
def _check_ot():
    rng = np.random.default_rng(0)
    worst = 0.0
    for n in (2, 3, 5, 6):
        a = rng.standard_normal(n)
        b = rng.standard_normal(n)
        got = float(wasserstein2_1d(a, b).value)
        best = min(
            float(np.mean((a - b[list(p)]) ** 2)) for p in itertools.permutations(range(n))
        )
        worst = max(worst, abs(got - best))
    ok = worst <= 1e-10
    return ok, f"worst |sorted - enumerated| = {worst:.2e}"


@check("sliced-scaling")
def _check_scaling():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((40, 6))
    b = rng.standard_normal((40, 6))
    w = WeightingOperator.identity()
    slices = SliceSet.draw(25, 6, 3)
    base = float(sliced_w2(a, b, w, slices).value)
    worst = 0.0
    for c in (0.5, 2.0, 10.0):
        scaled = float(sliced_w2(c * a, Variable(c * b), w, slices).value)
        worst = max(worst, abs(scaled - c * c * base) / (c * c * base))
    ok = worst <= 1e-12
    return ok, f"worst relative defect over c in (0.5, 2, 10): {worst:.2e}"


def _fd_worst(build, arrays, h=1e-6):
    vars_ = {k: Variable(np.asarray(v, dtype=float), requires_grad=True) for k, v in arrays.items()}
    with Tape() as tape:
        loss = build(vars_)
    grads = tape.backward(loss)
    worst = 0.0
    for name, base in arrays.items():
        base = np.asarray(base, dtype=float)
        tape_g = grads.get(vars_[name])
        if tape_g is None:
            tape_g = np.zeros_like(base)
        flat = base.ravel()
        for i in range(flat.size):
            up = dict(arrays)
            dn = dict(arrays)
            bu = base.copy()
            bd = base.copy()
            bu.ravel()[i] += h
            bd.ravel()[i] -= h
            up[name] = bu
            dn[name] = bd
            fd = (
                float(build({k: Variable(np.asarray(v, dtype=float)) for k, v in up.items()}).value)
                - float(build({k: Variable(np.asarray(v, dtype=float)) for k, v in dn.items()}).value)
            ) / (2 * h)
            if abs(fd) > 1e-6:
                worst = max(worst, abs(np.asarray(tape_g).ravel()[i] - fd) / abs(fd))
    return worst


@check("gradients-sliced")
def _check_sliced_grads():
    rng = np.random.default_rng(2)
    nu = rng.standard_normal((15, 4))
    slices = SliceSet.draw(10, 4, 5)
    w = WeightingOperator.identity()

    def build(vars_):
        return sliced_w2(nu, vars_["mu"], w, slices)

    worst = _fd_worst(build, {"mu": rng.standard_normal((15, 4))})
    ok = worst < 1e-4
    return ok, f"worst tape-vs-FD relative error {worst:.2e}"


@check("gradients-loss")
def _check_loss_grads():
    model = Darcy1DModel(d_y=12)
    inputs = LogNormalScalarParams(0.4, np.log(0.3))
    data = EmpiricalMeasure(
        model.forward_oracle(np.exp(0.5 + 0.2 * np.random.default_rng(3).standard_normal(30)))
    )
    cfg = LossConfig(n_samples=25, n_slices=8, prefactor=6.0, gradient_mode="standard")
    seed = 17

    def value(lg):
        noise = ScaledIdentityCov(lg, 12, learnable=False)
        with Tape():
            loss, _ = loss_L(inputs, noise, data, model.forward, cfg, np.random.default_rng(seed))
        return float(loss.value)

    noise = ScaledIdentityCov(np.log(0.2), 12)
    with Tape() as tape:
        loss, _ = loss_L(inputs, noise, data, model.forward, cfg, np.random.default_rng(seed))
    g = float(tape.backward(loss)[noise.log_gamma])
    h = 1e-6
    fd = (value(np.log(0.2) + h) - value(np.log(0.2) - h)) / (2 * h)
    rel = abs(g - fd) / max(abs(fd), 1e-12)
    ok = rel < 1e-3
    return ok, f"noise-scale gradient vs FD relative error {rel:.2e}"


@check("darcy-solver")
def _check_darcy():
    # independent second-order FD solve of -(z u')' = f0 on (0, 1)
    model = Darcy1DModel()
    worst = 0.0
    for z in (0.3, 1.0, 2.5):
        n = 2000
        hgrid = 1.0 / n
        xs = np.linspace(hgrid, 1.0 - hgrid, n - 1)
        main = np.full(n - 1, 2.0 * z / hgrid**2)
        off = np.full(n - 2, -z / hgrid**2)
        tri = np.diag(main) + np.diag(off, 1) + np.diag(off, -1)
        u = np.linalg.solve(tri, np.full(n - 1, model.f0))
        interp = np.interp(model.grid, xs, u)
        worst = max(worst, float(np.max(np.abs(interp - model.solve(z)))))
    ok = worst < 1e-6
    return ok, f"worst |closed form - FD solve| = {worst:.2e}"


@check("lr-schedule")
def _check_schedule():
    sched = LrSchedule(0.1, 10, 2000)
    worst = 0.0
    for t in range(2000):
        k = min(10, (t * 11) // 2000)
        worst = max(worst, abs(sched.at(t) - 0.1 * 0.5**k))
    ok = worst == 0.0
    return ok, f"worst schedule deviation {worst:.2e}"


@check("kernel-backends")
def _check_kernels():
    if kernel_backend() != "cython":
        return True, "compiled backend not present; fallback is the reference"
    from popinv.forward import _lorenz_np

    model = Lorenz96SingleScale(K=6)
    rng = np.random.default_rng(4)
    z = 8.0 + rng.standard_normal(5)
    s0 = rng.standard_normal((5, 6))
    fast, dfast = model.integrate_batch(z, s0, 50, 100)
    slow, dslow = _lorenz_np.integrate_features_single(z, s0, model.dt, 50, 100)
    worst = float(np.max(np.abs(fast - slow)))
    ok = worst <= 1e-12 and np.array_equal(dfast, dslow)
    return ok, f"compiled vs fallback worst difference {worst:.2e}"


@check("surrogate-bound")
def _check_surrogate():
    net = MlpSurrogate(2, 3, width=16, depth=3, lipschitz_bound=4.0, rng=np.random.default_rng(5))
    for w in net.parameters().values():
        w.value *= 10.0
    net.project()
    worst = max(net.layer_norms())
    ok = worst <= 4.0 + 1e-12
    return ok, f"largest layer norm after projection {worst:.6f} (bound 4)"


@check("rng-replay")
def _check_rng():
    model = Darcy1DModel(d_y=10)
    inputs = LogNormalScalarParams(0.2, np.log(0.4))
    noise = ScaledIdentityCov(np.log(0.1), 10)
    data = EmpiricalMeasure(np.random.default_rng(6).normal(size=(40, 10)))
    cfg = LossConfig(n_samples=30, n_slices=5, prefactor=5.0)
    vals = []
    for _ in range(2):
        with Tape():
            loss, _ = loss_L(inputs, noise, data, model.forward, cfg, np.random.default_rng(123))
        vals.append(float(loss.value))
    ok = vals[0] == vals[1]
    return ok, f"replayed losses {vals[0]!r} and {vals[1]!r}"


@check("datagen-repeat")
def _check_datagen():
    from .datagen import generate_population

    cfg = get_preset("darcy_uncorrelated").override(**{"data.n": 400})
    a = generate_population(cfg, seed=9)
    b = generate_population(cfg, seed=9)
    if a.samples.tobytes() != b.samples.tobytes():
        return False, "regeneration is not bit-exact"
    deg = generate_population(cfg.override(**{"alpha_truth.sigma": 0.0, "data.n": 1000}), seed=9)
    pooled = float((deg.samples - deg.samples.mean(axis=0)).std())
    ok = abs(pooled - 0.05) < 0.005
    return ok, f"bit-exact; degenerate-input noise std {pooled:.4f} (target 0.05)"


@check("trace-determinism")
def _check_trace():
    import io
    import json
    import tempfile
    import os

    from .datagen import generate_population
    from .inference import run_inference

    cfg = get_preset("darcy_uncorrelated").override(
        **{"data.n": 150, "learn.iterations": 5, "learn.n_samples": 60, "learn.n_slices": 10}
    )
    ds = generate_population(cfg, seed=1)
    blobs = []
    with tempfile.TemporaryDirectory() as tmp:
        for tag in ("a", "b"):
            out = os.path.join(tmp, tag)
            run_inference(cfg, ds.samples, seed=7, out_dir=out)
            with open(os.path.join(out, "trace.csv"), "rb") as fh:
                blobs.append(fh.read())
    ok = blobs[0] == blobs[1]
    return ok, "two seeded runs wrote identical traces" if ok else "traces differ"


def run_verify(pattern=None, echo=print):
    """Run the (optionally filtered) checks; True when everything passed."""
    selected = [(n, f) for n, f in CHECKS if pattern is None or pattern in n]
    if not selected:
        echo(f"no checks match filter {pattern!r}")
        return False
    all_ok = True
    for name, fn in selected:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"crashed: {type(exc).__name__}: {exc}"
        dt = time.perf_counter() - t0
        mark = "ok  " if ok else "FAIL"
        echo(f"{mark} {name:20s} ({dt:5.2f}s)  {detail}")
        all_ok = all_ok and ok
    return all_ok
