"""Vectorized numpy fallback kernels for batched Lorenz-96 integration.

Each function advances a whole batch of trajectories with classical RK4 and
accumulates time-averaged features (per-dimension means stacked with the
lower triangle of the second-moment matrix) by a left Riemann sum after the
burn-in window. Rows are independent: all arithmetic is elementwise or
per-row, so a row's result does not depend on how the batch was split.

Rows whose state leaves [-BLOW_LIMIT, BLOW_LIMIT] or turns non-finite are
flagged with the step index at which that happened and excluded from
further work; their feature rows are NaN.
"""

import numpy as np

BLOW_LIMIT = 1e8

BACKEND_NAME = "numpy"


def _rhs_single(u, forcing):
    # u_dot_k = u_{k-1} (u_{k+1} - u_{k-2}) - u_k + F, indices cyclic
    return np.roll(u, 1, axis=1) * (np.roll(u, -1, axis=1) - np.roll(u, 2, axis=1)) - u + forcing


def _rhs_multi(u, v, forcing, h, b, c, big_l):
    n, big_k = u.shape
    vbar = v.reshape(n, big_k, big_l).mean(axis=2)
    du = np.roll(u, 1, axis=1) * (np.roll(u, -1, axis=1) - np.roll(u, 2, axis=1)) - u + forcing - h * vbar
    coupling = b * np.repeat(u, big_l, axis=1)
    dv = c * (
        -np.roll(v, -1, axis=1) * (np.roll(v, -2, axis=1) - np.roll(v, 1, axis=1)) - v + coupling
    )
    return du, dv


def _check_alive(state, alive, diverged, step):
    bad = alive & (~np.isfinite(state).all(axis=1) | (np.abs(state).max(axis=1) > BLOW_LIMIT))
    if bad.any():
        diverged[bad] = step
        alive[bad] = False
        state[bad] = 0.0
    return alive


def integrate_features_single(z, s0, dt, n_burn, n_avg):
    """Batched single-scale run; returns (features, diverged_step).

    z: (n,) forcing values; s0: (n, K). diverged_step is -1 for clean rows.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    u = np.array(s0, dtype=np.float64)
    n, big_k = u.shape
    forcing = z[:, None]
    alive = np.ones(n, dtype=bool)
    diverged = np.full(n, -1, dtype=np.int64)
    rows, cols = np.tril_indices(big_k)
    sum_w = np.zeros((n, big_k))
    sum_ww = np.zeros((n, big_k, big_k))
    half = 0.5 * dt
    sixth = dt / 6.0
    for step in range(n_burn + n_avg):
        if step >= n_burn:
            sum_w += u
            sum_ww += u[:, :, None] * u[:, None, :]
        k1 = _rhs_single(u, forcing)
        k2 = _rhs_single(u + half * k1, forcing)
        k3 = _rhs_single(u + half * k2, forcing)
        k4 = _rhs_single(u + dt * k3, forcing)
        u = u + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        alive = _check_alive(u, alive, diverged, step)
    feats = np.concatenate([sum_w / n_avg, (sum_ww / n_avg)[:, rows, cols]], axis=1)
    feats[~alive] = np.nan
    return feats, diverged


def integrate_features_multi(z, s0, big_k, big_l, c, dt, n_burn, n_avg):
    """Batched multi-scale run; returns (features, diverged_step).

    z: (n, 3) rows (F, h, b); s0: (n, K + K*L) packed (slow, fast).
    The observed vector is w = (u_1..u_K, global fast mean).
    """
    z = np.asarray(z, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)
    n = s0.shape[0]
    u = np.array(s0[:, :big_k])
    v = np.array(s0[:, big_k:])
    forcing = z[:, 0][:, None]
    h = z[:, 1][:, None]
    b = z[:, 2][:, None]
    alive = np.ones(n, dtype=bool)
    diverged = np.full(n, -1, dtype=np.int64)
    d_w = big_k + 1
    rows, cols = np.tril_indices(d_w)
    sum_w = np.zeros((n, d_w))
    sum_ww = np.zeros((n, d_w, d_w))
    w = np.empty((n, d_w))
    half = 0.5 * dt
    sixth = dt / 6.0
    for step in range(n_burn + n_avg):
        if step >= n_burn:
            w[:, :big_k] = u
            w[:, big_k] = v.mean(axis=1)
            sum_w += w
            sum_ww += w[:, :, None] * w[:, None, :]
        du1, dv1 = _rhs_multi(u, v, forcing, h, b, c, big_l)
        du2, dv2 = _rhs_multi(u + half * du1, v + half * dv1, forcing, h, b, c, big_l)
        du3, dv3 = _rhs_multi(u + half * du2, v + half * dv2, forcing, h, b, c, big_l)
        du4, dv4 = _rhs_multi(u + dt * du3, v + dt * dv3, forcing, h, b, c, big_l)
        u = u + sixth * (du1 + 2.0 * (du2 + du3) + du4)
        v = v + sixth * (dv1 + 2.0 * (dv2 + dv3) + dv4)
        state_ok_probe = np.concatenate([u, v], axis=1)
        alive = _check_alive(state_ok_probe, alive, diverged, step)
        if not alive.all():
            u[~alive] = 0.0
            v[~alive] = 0.0
    feats = np.concatenate([sum_w / n_avg, (sum_ww / n_avg)[:, rows, cols]], axis=1)
    feats[~alive] = np.nan
    return feats, diverged
