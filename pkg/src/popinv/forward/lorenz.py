"""Lorenz-96 models, RK4 integration, and time-averaged feature observables.

The trajectory maps are treated as non-differentiable black boxes: they
produce data and surrogate training pairs, and gradients reach the inputs
only through a trained surrogate. The batched integrate-and-average loops
are the hot kernels; a compiled Cython core is used when available, with a
vectorized numpy fallback selected at import (override with POPINV_KERNEL
in {auto, cython, numpy}).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..errors import ContractViolation, IntegrationDiverged
from . import _lorenz_np

_cy = None
if os.environ.get("POPINV_KERNEL", "auto").lower() not in ("numpy", "py", "python"):
    try:
        from . import _lorenz_cy as _cy  # type: ignore[no-redef]
    except ImportError:
        _cy = None
        if os.environ.get("POPINV_KERNEL", "auto").lower() in ("cython", "cy"):
            raise


def kernel_backend():
    """Name of the active integration backend, 'cython' or 'numpy'."""
    return "cython" if _cy is not None else "numpy"


def _kernels():
    return _cy if _cy is not None else _lorenz_np


def feature_dim(state_dim):
    """Means plus lower-triangle second moments of a state of this size."""
    return state_dim + state_dim * (state_dim + 1) // 2


def pack_features(mean, second_moment):
    d = mean.shape[0]
    rows, cols = np.tril_indices(d)
    return np.concatenate([mean, np.asarray(second_moment)[rows, cols]])


def unpack_features(feat, d):
    """Inverse of pack_features; returns (mean, full symmetric second moment)."""
    mean = np.asarray(feat[:d])
    tri = np.asarray(feat[d:])
    rows, cols = np.tril_indices(d)
    m = np.zeros((d, d))
    m[rows, cols] = tri
    m[cols, rows] = tri
    return mean, m


class Lorenz96SingleScale:
    """Single-scale cyclic Lorenz-96 with scalar forcing as the sampled input."""

    name = "l96-single"
    input_dim = 1

    def __init__(self, K=6, dt=1e-2, tau=100.0, burn_in=20.0):
        if K < 4:
            raise ContractViolation(f"single-scale model needs K >= 4, got {K}")
        self.K = int(K)
        self.dt = float(dt)
        self.tau = float(tau)
        self.burn_in = float(burn_in)

    @property
    def state_dim(self):
        return self.K

    @property
    def obs_dim(self):
        return self.K

    @property
    def d_y(self):
        return feature_dim(self.K)

    def rhs(self, u, forcing):
        """Reference right-hand side for a single state vector."""
        u = np.asarray(u, dtype=np.float64)
        return np.roll(u, 1) * (np.roll(u, -1) - np.roll(u, 2)) - u + forcing

    def rhs_for(self, z):
        forcing = float(np.asarray(z).reshape(-1)[0])
        return lambda u: self.rhs(u, forcing)

    def observe(self, state):
        return np.asarray(state, dtype=np.float64)

    def integrate_batch(self, z, s0, n_burn, n_avg):
        return _kernels().integrate_features_single(
            np.asarray(z, dtype=np.float64).reshape(-1),
            np.asarray(s0, dtype=np.float64),
            self.dt,
            int(n_burn),
            int(n_avg),
        )


class Lorenz96MultiScale:
    """Two-scale cyclic Lorenz-96; the sampled input is z = (F, h, b).

    Fast variables form one global cyclic chain of length K*L. The observed
    vector is w = (u_1, ..., u_K, global fast mean), dimension K + 1.
    """

    name = "l96-multi"
    input_dim = 3

    def __init__(self, K=9, L=10, c=10.0, dt=1e-3, tau=100.0, burn_in=20.0):
        if K < 4 or L < 4:
            raise ContractViolation(f"multi-scale model needs K, L >= 4, got K={K}, L={L}")
        self.K = int(K)
        self.L = int(L)
        self.c = float(c)
        self.dt = float(dt)
        self.tau = float(tau)
        self.burn_in = float(burn_in)

    @property
    def state_dim(self):
        return self.K + self.K * self.L

    @property
    def obs_dim(self):
        return self.K + 1

    @property
    def d_y(self):
        return feature_dim(self.K + 1)

    def rhs(self, state, z):
        """Reference right-hand side for a single packed state (slow, fast)."""
        state = np.asarray(state, dtype=np.float64)
        forcing, h, b = (float(c) for c in np.asarray(z).reshape(-1))
        u = state[: self.K]
        v = state[self.K :]
        vbar = v.reshape(self.K, self.L).mean(axis=1)
        du = np.roll(u, 1) * (np.roll(u, -1) - np.roll(u, 2)) - u + forcing - h * vbar
        dv = self.c * (
            -np.roll(v, -1) * (np.roll(v, -2) - np.roll(v, 1)) - v + b * np.repeat(u, self.L)
        )
        return np.concatenate([du, dv])

    def rhs_for(self, z):
        return lambda s: self.rhs(s, z)

    def observe(self, state):
        state = np.asarray(state, dtype=np.float64)
        u = state[: self.K]
        v = state[self.K :]
        return np.concatenate([u, [v.mean()]])

    def integrate_batch(self, z, s0, n_burn, n_avg):
        return _kernels().integrate_features_multi(
            np.asarray(z, dtype=np.float64).reshape(-1, 3),
            np.asarray(s0, dtype=np.float64),
            self.K,
            self.L,
            self.c,
            self.dt,
            int(n_burn),
            int(n_avg),
        )


def rk4_trajectory(rhs, s0, t_end, dt):
    """Classical RK4 from s0; returns states at every step, initial included.

    Raises IntegrationDiverged (carrying the failure time) when the state
    turns non-finite or leaves the blow-up guard.
    """
    if dt <= 0 or t_end < dt:
        raise ContractViolation(f"rk4_trajectory needs dt > 0 and t_end >= dt, got dt={dt}, t_end={t_end}")
    s = np.atleast_1d(np.asarray(s0, dtype=np.float64))
    n_steps = int(round(t_end / dt))
    out = np.empty((n_steps + 1, s.shape[0]))
    out[0] = s
    for i in range(n_steps):
        k1 = rhs(s)
        k2 = rhs(s + 0.5 * dt * k1)
        k3 = rhs(s + 0.5 * dt * k2)
        k4 = rhs(s + dt * k3)
        s = s + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        if not np.all(np.isfinite(s)) or np.abs(s).max() > _lorenz_np.BLOW_LIMIT:
            t_fail = (i + 1) * dt
            raise IntegrationDiverged(f"state diverged at t = {t_fail:.6g}", time=t_fail)
        out[i + 1] = s
    return out


class TimeAveragedObservable:
    """Left-Riemann time average of the feature map after a burn-in window.

    The feature map stacks the observed vector's per-dimension means with
    the lower triangle of its second-moment matrix.
    """

    def __init__(self, model, tau=None, burn_in=None):
        self.model = model
        self.tau = model.tau if tau is None else float(tau)
        self.burn_in = model.burn_in if burn_in is None else float(burn_in)
        self.n_burn = int(round(self.burn_in / model.dt))
        self.n_avg = int(round(self.tau / model.dt))
        if self.n_avg < 1:
            raise ContractViolation("averaging window shorter than one step")

    @property
    def d_y(self):
        return self.model.d_y

    def evaluate_batch(self, z, s0, threads=1):
        """Feature vectors for n (z, s0) pairs; returns (features, diverged_step).

        diverged_step is -1 for clean rows; diverged rows carry NaN features.
        Rows are independent, so the batch may be split across threads
        without changing any row's result.
        """
        z = np.asarray(z, dtype=np.float64)
        s0 = np.asarray(s0, dtype=np.float64)
        n = s0.shape[0]
        if threads <= 1 or n < 2 * threads:
            return self.model.integrate_batch(z, s0, self.n_burn, self.n_avg)
        feats = np.empty((n, self.model.d_y))
        diverged = np.empty(n, dtype=np.int64)
        bounds = np.linspace(0, n, threads + 1).astype(int)

        def work(lo, hi):
            f, d = self.model.integrate_batch(z[lo:hi], s0[lo:hi], self.n_burn, self.n_avg)
            feats[lo:hi] = f
            diverged[lo:hi] = d

        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(work, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
            for fut in futures:
                fut.result()
        return feats, diverged

    def evaluate(self, z, s0):
        """Single-pair evaluation; raises IntegrationDiverged on blow-up."""
        feats, diverged = self.evaluate_batch(np.atleast_2d(np.asarray(z, dtype=np.float64).reshape(1, -1)), np.atleast_2d(s0))
        if diverged[0] >= 0:
            t_fail = (diverged[0] + 1) * self.model.dt
            raise IntegrationDiverged(f"state diverged at t = {t_fail:.6g}", time=t_fail)
        return feats[0]


def g_tau(model, z, s0, tau=None, burn_in=None):
    """Time-averaged feature vector for one (z, s0) pair."""
    return TimeAveragedObservable(model, tau=tau, burn_in=burn_in).evaluate(z, s0)


class GaussianInitMeasure:
    """Isotropic Gaussian over initial states."""

    def __init__(self, std, dim, mean=0.0):
        self.std = float(std)
        self.dim = int(dim)
        self.mean = float(mean)

    def sample(self, n, rng):
        return self.mean + self.std * rng.standard_normal((n, self.dim))

    def to_meta(self):
        return {"kind": "gaussian-iso", "std": self.std, "dim": self.dim, "mean": self.mean}


def clt_empirical_cov(model, z, n_init, init_measure, rng, tau=None, burn_in=None, threads=1):
    """Sample covariance of sqrt(tau) * (G_tau - mean) over random initial states.

    Serves as the ground-truth comparator for a learned noise covariance.
    Diverged initializations are resampled (fresh s0, same z), with a guard
    against a persistently exploding configuration.
    """
    if n_init < 2:
        raise ContractViolation(f"clt_empirical_cov needs n_init >= 2, got {n_init}")
    obs = TimeAveragedObservable(model, tau=tau, burn_in=burn_in)
    z_row = np.asarray(z, dtype=np.float64).reshape(1, -1)
    z_batch = np.repeat(z_row, n_init, axis=0)
    feats = np.empty((n_init, model.d_y))
    pending = np.arange(n_init)
    attempts = 0
    while pending.size:
        s0 = init_measure.sample(pending.size, rng)
        f, diverged = obs.evaluate_batch(z_batch[: pending.size], s0, threads=threads)
        ok = diverged < 0
        feats[pending[ok]] = f[ok]
        pending = pending[~ok]
        attempts += 1
        if pending.size and attempts > 50:
            raise IntegrationDiverged(
                f"{pending.size} initializations kept diverging after {attempts} rounds", time=None
            )
    return obs.tau * np.cov(feats, rowvar=False, ddof=1)
