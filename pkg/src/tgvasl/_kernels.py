"""Fused voxel loops for the primal-dual inner iteration.

Arrays are channel-last and C-contiguous: ``u (Ni,Nj,Nk,L)``,
``v, z0 (Ni,Nj,Nk,L,3)``, ``z1 (Ni,Nj,Nk,L,6)``, ``r, d (Ni,Nj,Nk,N)``,
``jac (Ni,Nj,Nk,N,L)``. The loops mirror :mod:`tgvasl.tgv_ops` term by term
and are checked against it in the test suite. No fastmath and no
parallel reductions, so results are reproducible bit for bit.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


def to_last(a, lead):
    """Move the ``lead`` leading axes of a channel-first array behind the grid."""
    nd = a.ndim
    order = tuple(range(lead, nd)) + tuple(range(lead))
    return np.ascontiguousarray(np.transpose(a, order))


def to_first(a, lead):
    nd = a.ndim
    order = tuple(range(nd - lead, nd)) + tuple(range(nd - lead))
    return np.ascontiguousarray(np.transpose(a, order))


@njit(cache=True)
def primal_update(u, v, ku, kv, tau, weight, uk, strength, lo, hi, use_box, u_out, v_out):
    ni, nj, nk, nl = u.shape
    for i in range(ni):
        for j in range(nj):
            for k in range(nk):
                for l in range(nl):
                    tdm = tau * strength * weight[i, j, k, l]
                    x = (tdm * uk[i, j, k, l] + u[i, j, k, l] - tau * ku[i, j, k, l]) / (1.0 + tdm)
                    if use_box:
                        if x < lo[l]:
                            x = lo[l]
                        elif x > hi[l]:
                            x = hi[l]
                    u_out[i, j, k, l] = x
                    for c in range(3):
                        v_out[i, j, k, l, c] = v[i, j, k, l, c] - tau * kv[i, j, k, l, c]


@njit(cache=True)
def forward(jac, u, v, ju, gv, ev):
    """``ju = J u``, ``gv = grad u - v``, ``ev = E v``."""
    ni, nj, nk, nl = u.shape
    nd = jac.shape[3]
    for i in range(ni):
        for j in range(nj):
            for k in range(nk):
                for n in range(nd):
                    s = 0.0
                    for l in range(nl):
                        s += jac[i, j, k, n, l] * u[i, j, k, l]
                    ju[i, j, k, n] = s
                for l in range(nl):
                    c = u[i, j, k, l]
                    gi = u[i + 1, j, k, l] - c if i < ni - 1 else 0.0
                    gj = u[i, j + 1, k, l] - c if j < nj - 1 else 0.0
                    gk = u[i, j, k + 1, l] - c if k < nk - 1 else 0.0
                    gv[i, j, k, l, 0] = gi - v[i, j, k, l, 0]
                    gv[i, j, k, l, 1] = gj - v[i, j, k, l, 1]
                    gv[i, j, k, l, 2] = gk - v[i, j, k, l, 2]
                    v0 = v[i, j, k, l, 0]
                    v1 = v[i, j, k, l, 1]
                    v2 = v[i, j, k, l, 2]
                    if i > 0:
                        bi0 = v0 - v[i - 1, j, k, l, 0]
                        bi1 = v1 - v[i - 1, j, k, l, 1]
                        bi2 = v2 - v[i - 1, j, k, l, 2]
                    else:
                        bi0 = bi1 = bi2 = 0.0
                    if j > 0:
                        bj0 = v0 - v[i, j - 1, k, l, 0]
                        bj1 = v1 - v[i, j - 1, k, l, 1]
                        bj2 = v2 - v[i, j - 1, k, l, 2]
                    else:
                        bj0 = bj1 = bj2 = 0.0
                    if k > 0:
                        bk0 = v0 - v[i, j, k - 1, l, 0]
                        bk1 = v1 - v[i, j, k - 1, l, 1]
                        bk2 = v2 - v[i, j, k - 1, l, 2]
                    else:
                        bk0 = bk1 = bk2 = 0.0
                    ev[i, j, k, l, 0] = bi0
                    ev[i, j, k, l, 1] = bj1
                    ev[i, j, k, l, 2] = bk2
                    ev[i, j, k, l, 3] = 0.5 * (bj0 + bi1)
                    ev[i, j, k, l, 4] = 0.5 * (bk0 + bi2)
                    ev[i, j, k, l, 5] = 0.5 * (bk1 + bj2)


@njit(cache=True)
def dual_update(ju, gv, ev, ju_old, gv_old, ev_old, theta, sigma, z0, z1, r, d_tilde,
                rad0, rad1, z0_out, z1_out, r_out):
    """Extrapolated dual step with projections; returns ``||y_new - y||^2``."""
    ni, nj, nk, nl = gv.shape[:4]
    nd = ju.shape[3]
    a = 1.0 + theta
    acc = 0.0
    for i in range(ni):
        for j in range(nj):
            for k in range(nk):
                m2 = 0.0
                for l in range(nl):
                    for c in range(3):
                        x = z0[i, j, k, l, c] + sigma * (a * gv[i, j, k, l, c] - theta * gv_old[i, j, k, l, c])
                        z0_out[i, j, k, l, c] = x
                        m2 += x * x
                s = max(1.0, math.sqrt(m2) / rad0)
                for l in range(nl):
                    for c in range(3):
                        x = z0_out[i, j, k, l, c] / s
                        z0_out[i, j, k, l, c] = x
                        dz = x - z0[i, j, k, l, c]
                        acc += dz * dz
                m2 = 0.0
                for l in range(nl):
                    for c in range(6):
                        x = z1[i, j, k, l, c] + sigma * (a * ev[i, j, k, l, c] - theta * ev_old[i, j, k, l, c])
                        z1_out[i, j, k, l, c] = x
                        m2 += x * x if c < 3 else 2.0 * x * x
                s = max(1.0, math.sqrt(m2) / rad1)
                for l in range(nl):
                    for c in range(6):
                        x = z1_out[i, j, k, l, c] / s
                        z1_out[i, j, k, l, c] = x
                        dz = x - z1[i, j, k, l, c]
                        acc += dz * dz if c < 3 else 2.0 * dz * dz
                for n in range(nd):
                    x = r[i, j, k, n] + sigma * (a * ju[i, j, k, n] - theta * ju_old[i, j, k, n])
                    x = (x - sigma * d_tilde[i, j, k, n]) / (1.0 + sigma)
                    r_out[i, j, k, n] = x
                    dr = x - r[i, j, k, n]
                    acc += dr * dr
    return acc


@njit(cache=True)
def adjoint(jac, z0, z1, r, ku_old, kv_old, ku, kv):
    """``ku = J^T r - div1 z0``, ``kv = -z0 - div2 z1``; returns squared change."""
    ni, nj, nk, nl = ku.shape
    nd = jac.shape[3]
    acc = 0.0
    for i in range(ni):
        for j in range(nj):
            for k in range(nk):
                for l in range(nl):
                    s = 0.0
                    for n in range(nd):
                        s += jac[i, j, k, n, l] * r[i, j, k, n]
                    # transpose of the forward differences
                    if i > 0:
                        s += z0[i - 1, j, k, l, 0]
                    if i < ni - 1:
                        s -= z0[i, j, k, l, 0]
                    if j > 0:
                        s += z0[i, j - 1, k, l, 1]
                    if j < nj - 1:
                        s -= z0[i, j, k, l, 1]
                    if k > 0:
                        s += z0[i, j, k - 1, l, 2]
                    if k < nk - 1:
                        s -= z0[i, j, k, l, 2]
                    du = s - ku_old[i, j, k, l]
                    acc += du * du
                    ku[i, j, k, l] = s
                    # transpose of the symmetrized backward differences
                    t0 = -z0[i, j, k, l, 0]
                    t1 = -z0[i, j, k, l, 1]
                    t2 = -z0[i, j, k, l, 2]
                    if i > 0:
                        t0 += z1[i, j, k, l, 0]
                        t1 += z1[i, j, k, l, 3]
                        t2 += z1[i, j, k, l, 4]
                    if i < ni - 1:
                        t0 -= z1[i + 1, j, k, l, 0]
                        t1 -= z1[i + 1, j, k, l, 3]
                        t2 -= z1[i + 1, j, k, l, 4]
                    if j > 0:
                        t0 += z1[i, j, k, l, 3]
                        t1 += z1[i, j, k, l, 1]
                        t2 += z1[i, j, k, l, 5]
                    if j < nj - 1:
                        t0 -= z1[i, j + 1, k, l, 3]
                        t1 -= z1[i, j + 1, k, l, 1]
                        t2 -= z1[i, j + 1, k, l, 5]
                    if k > 0:
                        t0 += z1[i, j, k, l, 4]
                        t1 += z1[i, j, k, l, 5]
                        t2 += z1[i, j, k, l, 2]
                    if k < nk - 1:
                        t0 -= z1[i, j, k + 1, l, 4]
                        t1 -= z1[i, j, k + 1, l, 5]
                        t2 -= z1[i, j, k + 1, l, 2]
                    for c, t in ((0, t0), (1, t1), (2, t2)):
                        dv = t - kv_old[i, j, k, l, c]
                        acc += dv * dv
                        kv[i, j, k, l, c] = t
    return acc


@njit(cache=True)
def linearized_value(ju, gv, ev, d_tilde, u, uk, weight, gamma, alpha0, alpha1, delta):
    ni, nj, nk, nl = u.shape
    nd = ju.shape[3]
    data = 0.0
    tv0 = 0.0
    tv1 = 0.0
    lev = 0.0
    for i in range(ni):
        for j in range(nj):
            for k in range(nk):
                for n in range(nd):
                    e = ju[i, j, k, n] - d_tilde[i, j, k, n]
                    data += e * e
                m0 = 0.0
                m1 = 0.0
                for l in range(nl):
                    for c in range(3):
                        m0 += gv[i, j, k, l, c] ** 2
                    for c in range(6):
                        w = 1.0 if c < 3 else 2.0
                        m1 += w * ev[i, j, k, l, c] ** 2
                    du = u[i, j, k, l] - uk[i, j, k, l]
                    lev += weight[i, j, k, l] * du * du
                tv0 += math.sqrt(m0)
                tv1 += math.sqrt(m1)
    return 0.5 * data + gamma * (alpha0 * tv0 + alpha1 * tv1) + 0.5 * delta * lev
