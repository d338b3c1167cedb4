"""Iteratively regularized Gauss-Newton fitting with a joint TGV² prior.

Each Gauss-Newton step linearizes the pCASL model around the current maps
and solves the convex subproblem

    min_{u,v} 1/2 sum_n ||J_n u - d~_n||^2 + gamma (alpha0 ||grad u - v||
              + alpha1 ||E v||) + delta/2 ||u - u_k||_M^2

with a primal-dual method whose step size is set by backtracking
(Malitsky-Pock). Unknowns are solved for in a rescaled space where data
have unit mean and every unknown's Jacobian has unit RMS over the voxels
that carry signal; maps are returned in internal physical units.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import _kernels as _k
from . import tgv_ops as ops
from .model import (CBF_TO_INTERNAL, AcquisitionProtocol, ParameterMaps,
                    asl_signal_series, jacobian)

log = logging.getLogger(__name__)

CBF_BOX = (0.0, 300.0)   # ml/100g/min
ATT_BOX = (0.0, 6.0)     # s


class SolverStateError(ValueError):
    """Raised when the current iterate cannot be linearized."""


class StepFailure(RuntimeError):
    """Raised when the line search does not accept a step."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class GnConfig:
    gamma_init: float = 1e-4
    gamma_final: float = 2e-6
    gamma_decay: float = 0.5
    delta_init: float = 1e-2
    delta_final: float = 1e-8
    delta_decay: float = 0.1
    gn_steps: int = 10
    inner_iters_schedule: tuple = (50, 100, 200, 400, 800, 1000, 1000, 1000, 1000, 1000)
    rel_tol: float = 1e-8
    alpha0_over_alpha1: float = 0.5
    alpha0: float = 1.0
    levenberg_mode: str = "jacobian-diagonal"
    snr_scaling: bool = True
    # SNR estimate of the 4-average reference data; regularization is scaled by
    # snr_reference / snr so that the factor is 1 on that data
    snr_reference: float = 1.0
    snr_max: float = 1e6
    # converts the published weight schedule into the normalized units used here
    gamma_unit: float = 1.0
    # strong-convexity constant of the step-ratio update; None uses delta_k
    ls_convexity: float | None = None
    ls_beta: float = 400.0
    ls_mu: float = 0.5
    ls_max_shrinks: int = 50
    objective_every: int = 10
    init_cbf: float = 30.0   # ml/100g/min
    init_att: float = 1.0    # s
    box_constraints: bool = True

    def __post_init__(self):
        self.inner_iters_schedule = tuple(int(i) for i in self.inner_iters_schedule)
        if not self.gamma_init >= self.gamma_final > 0:
            raise ValueError("need gamma_init >= gamma_final > 0")
        if not self.delta_init >= self.delta_final > 0:
            raise ValueError("need delta_init >= delta_final > 0")
        for name in ("gamma_decay", "delta_decay"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.gn_steps < 1:
            raise ValueError("gn_steps must be >= 1")
        sched = self.inner_iters_schedule
        if not sched or any(b < a for a, b in zip(sched, sched[1:])) or sched[0] < 1:
            raise ValueError("inner_iters_schedule must be positive and nondecreasing")
        if self.levenberg_mode not in ("identity", "jacobian-diagonal"):
            raise ValueError(f"unknown levenberg_mode {self.levenberg_mode!r}")
        if not 0 < self.ls_mu < 1 or self.ls_beta <= 0:
            raise ValueError("line search needs 0 < mu < 1 and beta > 0")
        if self.alpha0_over_alpha1 <= 0 or self.alpha0 <= 0:
            raise ValueError("TGV weights must be positive")

    @property
    def alpha1(self) -> float:
        return self.alpha0 / self.alpha0_over_alpha1

    def inner_iters(self, step: int) -> int:
        sched = self.inner_iters_schedule
        return sched[min(step, len(sched) - 1)]

    def gamma(self, step: int, snr_factor: float = 1.0) -> float:
        return max(self.gamma_init * self.gamma_decay ** step * snr_factor, self.gamma_final)

    def delta(self, step: int) -> float:
        return max(self.delta_init * self.delta_decay ** step, self.delta_final)

    @classmethod
    def from_dict(cls, d: dict) -> "GnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DualVars:
    z0: np.ndarray
    z1: np.ndarray
    r: np.ndarray


@dataclass
class PdState:
    u: np.ndarray
    v: np.ndarray
    duals: DualVars
    tau: float
    beta: float = 400.0
    theta: float = 1.0
    mu: float = 0.5

    def __post_init__(self):
        if not (self.tau > 0 and self.beta > 0 and 0 < self.mu < 1 and self.theta >= 0):
            raise ValueError("invalid primal-dual step parameters")

    @classmethod
    def cold(cls, u, n_frames, tau, beta=400.0, mu=0.5) -> "PdState":
        """``v = grad u`` and all duals zero."""
        u = np.array(u, dtype=np.float64)
        v = ops.grad(u)
        duals = DualVars(np.zeros_like(v), np.zeros(v.shape[:1] + (6,) + v.shape[2:]),
                         np.zeros((n_frames,) + u.shape[1:]))
        return cls(u, v, duals, tau, beta, 1.0, mu)


def linearize(u_k: ParameterMaps, proto: AcquisitionProtocol, d: np.ndarray):
    """Jacobian at ``u_k`` and the data with linearization constants fused in."""
    if not (np.all(np.isfinite(u_k.cbf)) and np.all(np.isfinite(u_k.att))):
        raise SolverStateError("non-finite values in the current iterate")
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (proto.n_frames,) + proto.grid:
        raise ValueError(f"data shape {d.shape} does not match protocol")
    jac = jacobian(u_k, proto)
    d_tilde = d - asl_signal_series(u_k, proto) + apply_jacobian(jac, u_k.stack())
    return jac, d_tilde


def apply_jacobian(jac, u):
    """``(J u)_n = sum_l dA_n/du_l u_l``."""
    return jac[:, 0] * u[0] + jac[:, 1] * u[1]


def apply_jacobian_adjoint(jac, r):
    return np.einsum("nl...,n...->l...", jac, r)


def levenberg_weight(jac: np.ndarray, mode: str = "jacobian-diagonal") -> np.ndarray:
    """Diagonal of the Levenberg weight, one volume per unknown."""
    if mode == "identity":
        return np.ones(jac.shape[1:])
    if mode == "jacobian-diagonal":
        return np.sum(jac * jac, axis=0)
    raise ValueError(f"unknown levenberg mode {mode!r}")


def _odd_extent(n, frac):
    k = max(1, math.ceil(frac * n))
    return k if k % 2 else k + 1


def _kspace_regions(grid, fraction):
    central = []
    outer = np.zeros(grid, dtype=bool)
    for ax, n in enumerate(grid):
        c = n // 2
        w = _odd_extent(n, fraction)
        central.append(slice(c - w // 2, c - w // 2 + w))
        edge = max(1, math.ceil(fraction * n / 2))
        idx = np.zeros(n, dtype=bool)
        idx[:edge] = True
        idx[n - edge:] = True
        shape = [1] * len(grid)
        shape[ax] = n
        outer |= idx.reshape(shape)
    return tuple(central), outer


def snr_scale(d: np.ndarray, fraction: float = 0.05, snr_max: float = 1e6) -> float:
    """Crude k-space SNR of a perfusion-weighted series.

    For every frame, the largest magnitude in a centered box holding
    ``fraction`` of the samples per axis is divided by the standard deviation
    of the magnitudes in the outermost ``fraction`` of every axis; the
    estimate is the mean over frames with signal. Frames whose outer shell
    is flat count as ``snr_max``, and the result is capped there.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 4 or d.shape[0] < 1:
        raise ValueError("expected a (n_frames, Ni, Nj, Nk) series")
    grid = d.shape[1:]
    if min(grid) < 4:
        raise ValueError(f"grid {grid} too small for a k-space SNR estimate")
    central, outer = _kspace_regions(grid, fraction)
    ratios = []
    for frame in d:
        mag = np.abs(np.fft.fftshift(np.fft.fftn(frame)))
        peak = mag[central].max()
        if peak == 0:
            continue
        spread = mag[outer].std()
        ratios.append(snr_max if spread <= 0 else min(peak / spread, snr_max))
    if not ratios:
        return float(snr_max)
    return float(np.mean(ratios))


def objective(u, v, d, proto, gamma, alpha0, alpha1, scale=None) -> float:
    """Nonlinear TGV²-regularized objective.

    ``u`` is a :class:`ParameterMaps`; the TGV² term acts on ``u / scale``
    (per-unknown scale, default 1) and ``v`` lives in that scaled space.
    """
    res = asl_signal_series(u, proto) - d
    stack = u.stack()
    if scale is not None:
        stack = stack / np.reshape(scale, (-1, 1, 1, 1))
    return 0.5 * float(np.sum(res * res)) + gamma * ops.tgv2_value(stack, v, alpha0, alpha1)


# ---------------------------------------------------------------------------
# primal-dual inner solver


class LinearizedOperator:
    """``K x = (J u, grad u - v, E v)`` in plain numpy; reference for the fused kernels."""

    def __init__(self, jac):
        self.jac = jac

    def forward(self, u, v):
        return apply_jacobian(self.jac, u), ops.grad(u) - v, ops.sym_grad(v)

    def adjoint(self, z0, z1, r):
        ku = apply_jacobian_adjoint(self.jac, r) - ops.div1(z0)
        kv = -z0 - ops.div2(z1)
        return ku, kv


def pd_solve(jac, d_tilde, gamma, delta, weight, u_k, state: PdState, max_iters,
             rel_tol=1e-8, alpha0=1.0, alpha1=2.0, ls_convexity=None, box=None,
             ls_max_shrinks=50, objective_every=10, callback=None, ls_log=None):
    """Solve one linearized TGV² subproblem.

    ``jac`` has shape ``(n_frames, 2, *grid)`` and acts on the unknown stack
    ``u``. ``box`` is an optional pair of ``(2,)`` arrays bounding ``u``;
    because the Levenberg term is diagonal, clipping its resolvent gives the
    exact resolvent of the box-constrained term.

    Returns the updated :class:`PdState` (usable as the next warm start) and
    an info dict with iteration count, objective trace and final steps.
    """
    ls_convexity = delta if ls_convexity is None else ls_convexity
    r0, r1 = alpha0 * gamma, alpha1 * gamma
    if not (r0 > 0 and r1 > 0):
        raise ValueError("regularization weights must be positive")
    nl = state.u.shape[0]
    if box is not None:
        lo = np.ascontiguousarray(box[0], dtype=np.float64).reshape(nl)
        hi = np.ascontiguousarray(box[1], dtype=np.float64).reshape(nl)
    else:
        lo = hi = np.zeros(nl)

    # channel-last working copies
    J = _k.to_last(jac, 2)
    dt = _k.to_last(d_tilde, 1)
    w = _k.to_last(np.broadcast_to(weight, state.u.shape), 1)
    uk = _k.to_last(u_k, 1)
    u = _k.to_last(state.u, 1)
    v = _k.to_last(state.v, 2)
    z0 = _k.to_last(state.duals.z0, 2)
    z1 = _k.to_last(state.duals.z1, 2)
    r = _k.to_last(state.duals.r, 1)
    tau, beta, theta, mu = state.tau, state.beta, state.theta, state.mu

    def empty_like_all(*arrs):
        return [np.empty_like(a) for a in arrs]

    ju, gv, ev = np.empty_like(r), np.empty_like(v), np.empty_like(z1)
    _k.forward(J, u, v, ju, gv, ev)
    ku, kv = np.zeros_like(u), np.zeros_like(v)
    _k.adjoint(J, z0, z1, r, ku, kv, ku, kv)
    ju_n, gv_n, ev_n, u_n, v_n = empty_like_all(ju, gv, ev, u, v)
    z0_n, z1_n, r_n, ku_n, kv_n = empty_like_all(z0, z1, r, ku, kv)

    def value():
        return _k.linearized_value(ju, gv, ev, dt, u, uk, w, gamma, alpha0, alpha1, delta)

    trace = [value()]
    shrinks_total = 0
    it = 0
    for it in range(1, max_iters + 1):
        _k.primal_update(u, v, ku, kv, tau, w, uk, delta, lo, hi, box is not None, u_n, v_n)
        _k.forward(J, u_n, v_n, ju_n, gv_n, ev_n)

        beta_new = beta * (1.0 + ls_convexity * tau)
        tau_new = tau * math.sqrt(beta / beta_new * (1.0 + theta))
        for shrink in range(ls_max_shrinks + 1):
            theta = tau_new / tau
            sigma = beta_new * tau_new
            dy2 = _k.dual_update(ju_n, gv_n, ev_n, ju, gv, ev, theta, sigma, z0, z1, r, dt,
                                 r0, r1, z0_n, z1_n, r_n)
            dk2 = _k.adjoint(J, z0_n, z1_n, r_n, ku, kv, ku_n, kv_n)
            lhs = math.sqrt(beta_new) * tau_new * math.sqrt(dk2)
            rhs = math.sqrt(dy2)
            if lhs <= rhs:
                break
            tau_new *= mu
        else:
            raise StepFailure("line search did not accept a step", iteration=it,
                              tau=tau_new, beta=beta_new, lhs=lhs, rhs=rhs)
        shrinks_total += shrink
        if ls_log is not None:
            ls_log.append((lhs, rhs))

        u, u_n, v, v_n = u_n, u, v_n, v
        ju, ju_n, gv, gv_n, ev, ev_n = ju_n, ju, gv_n, gv, ev_n, ev
        z0, z0_n, z1, z1_n, r, r_n = z0_n, z0, z1_n, z1, r_n, r
        ku, ku_n, kv, kv_n = ku_n, ku, kv_n, kv
        tau, beta = tau_new, beta_new

        if it % objective_every == 0 or it == max_iters:
            trace.append(value())
            if callback is not None:
                callback(it, trace[-1], tau, beta)
            prev = trace[-2]
            if abs(prev - trace[-1]) <= rel_tol * max(abs(prev), np.finfo(float).tiny):
                break

    duals = DualVars(_k.to_first(z0, 2), _k.to_first(z1, 2), _k.to_first(r, 1))
    out = PdState(_k.to_first(u, 1), _k.to_first(v, 2), duals, tau, beta, theta, mu)
    return out, {"iterations": it, "objective": trace, "tau": tau, "beta": beta,
                 "shrinks": shrinks_total}


# ---------------------------------------------------------------------------
# Gauss-Newton outer loop


@dataclass
class Scaling:
    """Normalization between physical and solver units.

    ``u_solver = u_physical / unknown_scale`` and ``d_solver = d / data_scale``.
    """

    data_scale: float
    unknown_scale: np.ndarray = field(default_factory=lambda: np.ones(2))

    @classmethod
    def from_data(cls, d, jac) -> "Scaling":
        ds = abs(float(np.mean(d)))
        if not np.isfinite(ds) or ds == 0:
            ds = float(np.sqrt(np.mean(d * d))) or 1.0
        scale = np.ones(2)
        for l in range(2):
            col = np.sum(jac[:, l] ** 2, axis=0)
            active = col > 0
            if np.any(active):
                rms = math.sqrt(float(np.mean(col[active])) / jac.shape[0]) / ds
                scale[l] = 1.0 / rms
        return cls(ds, scale)

    def to_solver(self, u):
        return u / self.unknown_scale.reshape(-1, 1, 1, 1)

    def to_physical(self, u):
        return u * self.unknown_scale.reshape(-1, 1, 1, 1)

    def jacobian(self, jac):
        return jac * (self.unknown_scale.reshape(1, -1, 1, 1, 1) / self.data_scale)


def physical_box():
    lo = np.array([CBF_BOX[0] * CBF_TO_INTERNAL, ATT_BOX[0]])
    hi = np.array([CBF_BOX[1] * CBF_TO_INTERNAL, ATT_BOX[1]])
    return lo, hi


def clamp_maps(u: ParameterMaps) -> ParameterMaps:
    lo, hi = physical_box()
    return ParameterMaps(np.clip(u.cbf, lo[0], hi[0]), np.clip(u.att, lo[1], hi[1]))


def irgn_fit(d, proto: AcquisitionProtocol, config: GnConfig | None = None,
             init: ParameterMaps | None = None, history: list | None = None,
             callback=None) -> ParameterMaps:
    """Fit CBF and ATT maps to a perfusion-weighted series.

    ``history``, when given, receives one dict per Gauss-Newton step (plus an
    entry for the initial point) with the weights used, inner iteration
    count, and the nonlinear objective in solver units. ``callback`` is
    forwarded to :func:`pd_solve` with the GN step index prepended.
    """
    config = config or GnConfig()
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (proto.n_frames,) + proto.grid:
        raise ValueError(f"data shape {d.shape} does not match protocol")
    if init is None:
        init = ParameterMaps.uniform(proto.grid, config.init_cbf, config.init_att)
    u_phys = init.stack()

    jac0, _ = linearize(init, proto, d)
    scaling = Scaling.from_data(d, jac0)
    d_n = d / scaling.data_scale
    snr_factor = 1.0
    if config.snr_scaling:
        snr_factor = config.snr_reference / snr_scale(d, snr_max=config.snr_max)
    lo, hi = physical_box()
    box = (lo / scaling.unknown_scale, hi / scaling.unknown_scale) if config.box_constraints else None
    alpha0, alpha1 = config.alpha0, config.alpha1

    u = scaling.to_solver(u_phys)
    jt = scaling.jacobian(jac0)
    l2 = float(np.max(np.sum(jt * jt, axis=(0, 1)))) + 12.0 + 8.0
    state = PdState.cold(u, proto.n_frames, tau=1.0 / math.sqrt(config.ls_beta * l2),
                         beta=config.ls_beta, mu=config.ls_mu)

    def nonlinear_value(u_s, v, gamma):
        maps = ParameterMaps.from_stack(scaling.to_physical(u_s))
        return objective(maps, v, d_n, _scaled_proto(proto, scaling.data_scale), gamma,
                         alpha0, alpha1, scale=scaling.unknown_scale)

    if history is not None:
        g0 = config.gamma(0, snr_factor) * config.gamma_unit
        history.append({"step": -1, "objective": nonlinear_value(u, state.v, g0),
                        "gamma": g0, "scaling": scaling, "snr_factor": snr_factor})

    for k in range(config.gn_steps):
        gamma = config.gamma(k, snr_factor) * config.gamma_unit
        delta = config.delta(k)
        maps_k = ParameterMaps.from_stack(scaling.to_physical(u))
        try:
            jac, d_tilde = linearize(maps_k, proto, d)
        except SolverStateError as exc:
            raise SolverStateError(f"Gauss-Newton step {k}: {exc}") from exc
        jt = scaling.jacobian(jac)
        d_tilde = d_tilde / scaling.data_scale
        weight = levenberg_weight(jt, config.levenberg_mode)
        state = replace(state, beta=config.ls_beta, theta=1.0)
        inner_cb = None if callback is None else (lambda *a, _k=k: callback(_k, *a))
        try:
            state, info = pd_solve(jt, d_tilde, gamma, delta, weight, u, state,
                                   config.inner_iters(k), config.rel_tol, alpha0, alpha1,
                                   ls_convexity=config.ls_convexity, box=box,
                                   ls_max_shrinks=config.ls_max_shrinks,
                                   objective_every=config.objective_every,
                                   callback=inner_cb)
        except StepFailure as exc:
            exc.diagnostics["gn_step"] = k
            raise
        u = state.u
        if not np.all(np.isfinite(u)):
            raise SolverStateError(f"Gauss-Newton step {k} produced non-finite maps")
        if history is not None:
            history.append({"step": k, "gamma": gamma, "delta": delta,
                            "iterations": info["iterations"], "tau": info["tau"],
                            "linearized_objective": info["objective"][-1],
                            "objective": nonlinear_value(u, state.v, gamma)})
        log.info("GN step %d: gamma=%.3g delta=%.3g iters=%d", k, gamma, delta,
                 info["iterations"])

    return clamp_maps(ParameterMaps.from_stack(scaling.to_physical(u)))


def _scaled_proto(proto, data_scale):
    return proto.with_m0(proto.m0 / data_scale)
