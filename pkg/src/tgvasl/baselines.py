"""Voxel-wise nonlinear least-squares fitting with box constraints.

Projected Levenberg-Marquardt on ``(f, delta)`` with the analytic Jacobian,
vectorized over voxels. CBF is iterated in ml/100g/min so both unknowns
are of order one.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .model import (CBF_TO_INTERNAL, AcquisitionProtocol, ParameterMaps,
                    asl_signal_series, jacobian)

# QA bits
ZERO_FLOW = 1
ACTIVE_BOUND = 2
NON_IDENTIFIABLE = 4

#: CBF below this (ml/100g/min) leaves the transit time unidentifiable
MIN_IDENTIFIABLE_CBF = 1e-3


@dataclass
class NllsConfig:
    bounds_cbf: tuple = (0.0, 300.0)   # ml/100g/min
    bounds_att: tuple = (0.0, 6.0)     # s
    max_iters: int = 200
    grad_tol: float = 1e-10
    init: tuple = (30.0, 1.0)
    multistart: int = 4
    seed: int = 0

    def __post_init__(self):
        self.bounds_cbf = tuple(float(b) for b in self.bounds_cbf)
        self.bounds_att = tuple(float(b) for b in self.bounds_att)
        self.init = tuple(float(i) for i in self.init)
        for b in (self.bounds_cbf, self.bounds_att):
            if len(b) != 2 or not b[0] < b[1]:
                raise ValueError("bounds must be ordered (lo, hi) pairs")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.multistart < 0 or self.grad_tol < 0:
            raise ValueError("multistart and grad_tol must be non-negative")

    @property
    def lower(self):
        return np.array([self.bounds_cbf[0], self.bounds_att[0]])

    @property
    def upper(self):
        return np.array([self.bounds_cbf[1], self.bounds_att[1]])

    def starts(self) -> np.ndarray:
        """Start points ``(n, 2)``: the configured init, then seeded uniform draws."""
        rng = np.random.Generator(np.random.Philox(self.seed))
        extra = rng.uniform(self.lower, self.upper, size=(self.multistart, 2))
        first = np.clip(np.array(self.init), self.lower, self.upper)
        return np.vstack([first[None], extra])

    @classmethod
    def from_dict(cls, d: dict) -> "NllsConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown baseline keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NllsResult:
    maps: ParameterMaps
    residual: np.ndarray
    qa: np.ndarray


def _flat_proto(proto: AcquisitionProtocol, idx=None):
    m0 = proto.m0.reshape(-1)
    t1 = np.broadcast_to(np.asarray(proto.t1, dtype=np.float64), proto.grid).reshape(-1)
    if idx is not None:
        m0, t1 = m0[idx], t1[idx]
    return AcquisitionProtocol(proto.t, proto.tau, m0, proto.alpha, proto.lam, t1, proto.t1b)


def _eval(p, proto, d, with_jac=True):
    """Residual and Jacobian in (ml/100g/min, s) for parameters ``p`` of shape (2, V)."""
    maps = ParameterMaps(p[0] * CBF_TO_INTERNAL, p[1])
    res = asl_signal_series(maps, proto) - d
    if not with_jac:
        return res, None
    jac = jacobian(maps, proto)
    jac[:, 0] *= CBF_TO_INTERNAL
    return res, jac


def _lm(d, proto, p0, cfg: NllsConfig):
    """Projected LM from one start point for every voxel column of ``d``."""
    lo = cfg.lower[:, None]
    hi = cfg.upper[:, None]
    nv = d.shape[1]
    p = np.clip(np.broadcast_to(p0[:, None], (2, nv)).copy(), lo, hi)
    lam = np.full(nv, 1e-3)
    res, jac = _eval(p, proto, d)
    cost = 0.5 * np.sum(res * res, axis=0)
    live = np.arange(nv)
    for _ in range(cfg.max_iters):
        if live.size == 0:
            break
        pl, jl, rl = p[:, live], jac[:, :, live], res[:, live]
        g = np.einsum("nlv,nv->lv", jl, rl)
        h = np.einsum("nlv,nmv->lmv", jl, jl)
        # variables held at a bound by the gradient drop out of the step
        free = ~(((pl <= lo) & (g > 0)) | ((pl >= hi) & (g < 0)))
        pg = np.where(free, g, 0.0)
        conv = np.max(np.abs(pg), axis=0) <= cfg.grad_tol * np.maximum(1.0, cost[live])
        hd = np.diagonal(h).T.copy()
        ridge = 1e-12 * np.maximum(hd.max(axis=0), 1e-300)
        a = np.where(free[0], h[0, 0] + lam[live] * hd[0] + ridge, 1.0)
        c = np.where(free[1], h[1, 1] + lam[live] * hd[1] + ridge, 1.0)
        b = np.where(free[0] & free[1], h[0, 1], 0.0)
        det = a * c - b * b
        good = det > 0
        det = np.where(good, det, 1.0)
        s0 = np.where(good, -(c * pg[0] - b * pg[1]) / det, 0.0)
        s1 = np.where(good, -(a * pg[1] - b * pg[0]) / det, 0.0)
        trial = np.clip(pl + np.stack([s0, s1]), lo, hi)
        r_t, _ = _eval(trial, _sub(proto, live), d[:, live], with_jac=False)
        c_t = 0.5 * np.sum(r_t * r_t, axis=0)
        ok = (c_t < cost[live]) & ~conv
        step = np.max(np.abs(trial - pl) / (np.abs(pl) + 1e-8), axis=0)

        acc = live[ok]
        if acc.size:
            p[:, acc] = trial[:, ok]
            r_a, j_a = _eval(p[:, acc], _sub(proto, acc), d[:, acc])
            res[:, acc], jac[:, :, acc], cost[acc] = r_a, j_a, c_t[ok]
        lam[live] = np.where(ok, np.maximum(lam[live] * 0.3, 1e-12), lam[live] * 10.0)
        stalled = conv | (ok & (step < 1e-12)) | (lam[live] > 1e16)
        live = live[~stalled]
    return p, cost


def _sub(proto, idx):
    return AcquisitionProtocol(proto.t, proto.tau, proto.m0[idx], proto.alpha, proto.lam,
                               proto.t1 if np.ndim(proto.t1) == 0 else proto.t1[idx], proto.t1b)


def _fit_columns(d, proto, cfg):
    """Best-of-starts fit for a (N_d, V) block; returns (p, cost, qa)."""
    nv = d.shape[1]
    p_best = np.zeros((2, nv))
    c_best = np.full(nv, np.inf)
    for start in cfg.starts():
        p, cost = _lm(d, proto, start, cfg)
        better = cost < c_best
        p_best[:, better], c_best[better] = p[:, better], cost[better]
    qa = np.zeros(nv, dtype=np.uint8)
    at_bound = np.any((p_best <= cfg.lower[:, None]) | (p_best >= cfg.upper[:, None]), axis=0)
    qa[at_bound] |= ACTIVE_BOUND
    qa[p_best[0] < MIN_IDENTIFIABLE_CBF] |= NON_IDENTIFIABLE
    return p_best, c_best, qa


def nlls_fit_voxel(series, proto: AcquisitionProtocol, config: NllsConfig | None = None,
                   m0=None, t1=None):
    """Fit one voxel's series.

    ``m0`` and ``t1`` default to the protocol's values, which must then be
    scalars. Returns ``(f, delta, residual_norm, qa)`` with ``f`` in ml/g/s.
    """
    cfg = config or NllsConfig()
    series = np.asarray(series, dtype=np.float64)
    if series.shape != (proto.n_frames,):
        raise ValueError(f"series length {series.shape} does not match {proto.n_frames} frames")
    m0 = proto.m0 if m0 is None else m0
    t1 = proto.t1 if t1 is None else t1
    if np.size(m0) != 1 or np.size(t1) != 1:
        raise ValueError("nlls_fit_voxel needs scalar m0 and t1")
    p1 = AcquisitionProtocol(proto.t, proto.tau, np.full(1, float(np.squeeze(m0))), proto.alpha,
                             proto.lam, np.full(1, float(np.squeeze(t1))), proto.t1b)
    if not np.any(series):
        return 0.0, cfg.init[1], 0.0, ZERO_FLOW | NON_IDENTIFIABLE
    p, cost, qa = _fit_columns(series[:, None], p1, cfg)
    return (float(p[0, 0] * CBF_TO_INTERNAL), float(p[1, 0]), float(np.sqrt(2.0 * cost[0])),
            int(qa[0]))


def nlls_fit_volume(d, proto: AcquisitionProtocol, config: NllsConfig | None = None,
                    mask=None, block=8192) -> NllsResult:
    """Independent per-voxel fits.

    Voxels outside ``mask``, with all-zero data or with zero m0 are reported
    as zero flow at the initial transit time.
    """
    cfg = config or NllsConfig()
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (proto.n_frames,) + proto.grid:
        raise ValueError(f"data shape {d.shape} does not match protocol")
    grid = proto.grid
    flat = d.reshape(proto.n_frames, -1)
    nv = flat.shape[1]
    fp = _flat_proto(proto)

    cbf = np.zeros(nv)
    att = np.full(nv, cfg.init[1])
    resid = np.zeros(nv)
    qa = np.full(nv, ZERO_FLOW | NON_IDENTIFIABLE, dtype=np.uint8)
    # no m0 means no model signal: nothing to fit
    sel = np.any(flat != 0, axis=0) & (fp.m0 > 0)
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool).reshape(-1)
    idx = np.flatnonzero(sel)
    for s in range(0, idx.size, block):
        part = idx[s:s + block]
        p, cost, q = _fit_columns(flat[:, part], _sub(fp, part), cfg)
        cbf[part], att[part] = p[0] * CBF_TO_INTERNAL, p[1]
        resid[part], qa[part] = np.sqrt(2.0 * cost), q
    maps = ParameterMaps(cbf.reshape(grid), att.reshape(grid))
    return NllsResult(maps, resid.reshape(grid), qa.reshape(grid))
