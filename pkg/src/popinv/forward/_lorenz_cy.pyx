# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled batched Lorenz-96 RK4 kernels; behavioral twin of the numpy fallback.

Row semantics, feature layout, and divergence flagging match
``_lorenz_np``; per-row arithmetic is sequential C loops, so results agree
with the vectorized fallback to rounding (not bitwise). The batch loops run
without the GIL so callers may split work across threads.
"""

import numpy as np

from libc.math cimport fabs

BACKEND_NAME = "cython"
BLOW_LIMIT = 1e8

cdef double _BLOW = 1e8


cdef inline void _rhs_single(double[:] u, double forcing, double[:] du, int K) noexcept nogil:
    cdef int k, km1, km2, kp1
    for k in range(K):
        km1 = k - 1
        if km1 < 0:
            km1 += K
        km2 = k - 2
        if km2 < 0:
            km2 += K
        kp1 = k + 1
        if kp1 >= K:
            kp1 -= K
        du[k] = u[km1] * (u[kp1] - u[km2]) - u[k] + forcing


cdef inline bint _dead(double[:] x, int n) noexcept nogil:
    cdef int k
    for k in range(n):
        if x[k] != x[k] or fabs(x[k]) > _BLOW:
            return True
    return False


def integrate_features_single(double[:] z, double[:, :] s0, double dt, int n_burn, int n_avg):
    cdef int n = s0.shape[0]
    cdef int K = s0.shape[1]
    cdef int n_tri = K * (K + 1) // 2
    feats_np = np.full((n, K + n_tri), np.nan)
    div_np = np.full(n, -1, dtype=np.int64)
    cdef double[:, :] feats = feats_np
    cdef long long[:] diverged = div_np
    cdef double[:] u = np.empty(K)
    cdef double[:] us = np.empty(K)
    cdef double[:] k1 = np.empty(K)
    cdef double[:] k2 = np.empty(K)
    cdef double[:] k3 = np.empty(K)
    cdef double[:] k4 = np.empty(K)
    cdef double[:] sw = np.empty(K)
    cdef double[:] sww = np.empty(n_tri)
    cdef double forcing, half = 0.5 * dt, sixth = dt / 6.0
    cdef int i, k, a, b, idx, step, total = n_burn + n_avg
    cdef bint dead
    with nogil:
        for i in range(n):
            forcing = z[i]
            for k in range(K):
                u[k] = s0[i, k]
            for k in range(K):
                sw[k] = 0.0
            for k in range(n_tri):
                sww[k] = 0.0
            dead = False
            for step in range(total):
                if step >= n_burn:
                    idx = 0
                    for a in range(K):
                        sw[a] += u[a]
                        for b in range(a + 1):
                            sww[idx] += u[a] * u[b]
                            idx += 1
                _rhs_single(u, forcing, k1, K)
                for k in range(K):
                    us[k] = u[k] + half * k1[k]
                _rhs_single(us, forcing, k2, K)
                for k in range(K):
                    us[k] = u[k] + half * k2[k]
                _rhs_single(us, forcing, k3, K)
                for k in range(K):
                    us[k] = u[k] + dt * k3[k]
                _rhs_single(us, forcing, k4, K)
                for k in range(K):
                    u[k] = u[k] + sixth * (k1[k] + 2.0 * (k2[k] + k3[k]) + k4[k])
                if _dead(u, K):
                    diverged[i] = step
                    dead = True
                    break
            if not dead:
                for k in range(K):
                    feats[i, k] = sw[k] / n_avg
                for k in range(n_tri):
                    feats[i, K + k] = sww[k] / n_avg
    return feats_np, div_np


cdef inline void _rhs_multi(double[:] u, double[:] v, double forcing, double h, double b,
                            double c, int K, int L, double[:] du, double[:] dv,
                            double[:] vbar) noexcept nogil:
    cdef int k, l, j, jm1, jp1, jp2, km1, km2, kp1
    cdef int J = K * L
    cdef double acc
    for k in range(K):
        acc = 0.0
        for l in range(L):
            acc += v[k * L + l]
        vbar[k] = acc / L
    for k in range(K):
        km1 = k - 1
        if km1 < 0:
            km1 += K
        km2 = k - 2
        if km2 < 0:
            km2 += K
        kp1 = k + 1
        if kp1 >= K:
            kp1 -= K
        du[k] = u[km1] * (u[kp1] - u[km2]) - u[k] + forcing - h * vbar[k]
    for j in range(J):
        jm1 = j - 1
        if jm1 < 0:
            jm1 += J
        jp1 = j + 1
        if jp1 >= J:
            jp1 -= J
        jp2 = j + 2
        if jp2 >= J:
            jp2 -= J
        dv[j] = c * (-v[jp1] * (v[jp2] - v[jm1]) - v[j] + b * u[j / L])


def integrate_features_multi(double[:, :] z, double[:, :] s0, int big_k, int big_l,
                             double c, double dt, int n_burn, int n_avg):
    cdef int n = s0.shape[0]
    cdef int K = big_k
    cdef int L = big_l
    cdef int J = K * L
    cdef int dw = K + 1
    cdef int n_tri = dw * (dw + 1) // 2
    feats_np = np.full((n, dw + n_tri), np.nan)
    div_np = np.full(n, -1, dtype=np.int64)
    cdef double[:, :] feats = feats_np
    cdef long long[:] diverged = div_np
    cdef double[:] u = np.empty(K)
    cdef double[:] v = np.empty(J)
    cdef double[:] us = np.empty(K)
    cdef double[:] vs = np.empty(J)
    cdef double[:] du1 = np.empty(K)
    cdef double[:] du2 = np.empty(K)
    cdef double[:] du3 = np.empty(K)
    cdef double[:] du4 = np.empty(K)
    cdef double[:] dv1 = np.empty(J)
    cdef double[:] dv2 = np.empty(J)
    cdef double[:] dv3 = np.empty(J)
    cdef double[:] dv4 = np.empty(J)
    cdef double[:] vbar = np.empty(K)
    cdef double[:] w = np.empty(dw)
    cdef double[:] sw = np.empty(dw)
    cdef double[:] sww = np.empty(n_tri)
    cdef double forcing, h, b, acc, half = 0.5 * dt, sixth = dt / 6.0
    cdef int i, k, j, a, bb, idx, step, total = n_burn + n_avg
    cdef bint dead
    with nogil:
        for i in range(n):
            forcing = z[i, 0]
            h = z[i, 1]
            b = z[i, 2]
            for k in range(K):
                u[k] = s0[i, k]
            for j in range(J):
                v[j] = s0[i, K + j]
            for k in range(dw):
                sw[k] = 0.0
            for k in range(n_tri):
                sww[k] = 0.0
            dead = False
            for step in range(total):
                if step >= n_burn:
                    for k in range(K):
                        w[k] = u[k]
                    acc = 0.0
                    for j in range(J):
                        acc += v[j]
                    w[K] = acc / J
                    idx = 0
                    for a in range(dw):
                        sw[a] += w[a]
                        for bb in range(a + 1):
                            sww[idx] += w[a] * w[bb]
                            idx += 1
                _rhs_multi(u, v, forcing, h, b, c, K, L, du1, dv1, vbar)
                for k in range(K):
                    us[k] = u[k] + half * du1[k]
                for j in range(J):
                    vs[j] = v[j] + half * dv1[j]
                _rhs_multi(us, vs, forcing, h, b, c, K, L, du2, dv2, vbar)
                for k in range(K):
                    us[k] = u[k] + half * du2[k]
                for j in range(J):
                    vs[j] = v[j] + half * dv2[j]
                _rhs_multi(us, vs, forcing, h, b, c, K, L, du3, dv3, vbar)
                for k in range(K):
                    us[k] = u[k] + dt * du3[k]
                for j in range(J):
                    vs[j] = v[j] + dt * dv3[j]
                _rhs_multi(us, vs, forcing, h, b, c, K, L, du4, dv4, vbar)
                for k in range(K):
                    u[k] = u[k] + sixth * (du1[k] + 2.0 * (du2[k] + du3[k]) + du4[k])
                for j in range(J):
                    v[j] = v[j] + sixth * (dv1[j] + 2.0 * (dv2[j] + dv3[j]) + dv4[j])
                if _dead(u, K) or _dead(v, J):
                    diverged[i] = step
                    dead = True
                    break
            if not dead:
                for k in range(dw):
                    feats[i, k] = sw[k] / n_avg
                for k in range(n_tri):
                    feats[i, dw + k] = sww[k] / n_avg
    return feats_np, div_np
