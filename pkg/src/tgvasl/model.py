"""pCASL kinetic signal model, its analytic Jacobian, and unit handling.

Internal arithmetic uses seconds and CBF in ml/g/s. Files and user-facing
values carry CBF in ml/100g/min; :data:`CBF_TO_INTERNAL` converts.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: ml/100g/min -> ml/g/s
CBF_TO_INTERNAL = 1.0 / 6000.0
#: ml/g/s -> ml/100g/min
CBF_TO_EXTERNAL = 6000.0


def cbf_to_internal(cbf):
    return np.asarray(cbf, dtype=np.float64) * CBF_TO_INTERNAL


def cbf_to_external(cbf):
    return np.asarray(cbf, dtype=np.float64) * CBF_TO_EXTERNAL


@dataclass
class AcquisitionProtocol:
    """Fixed acquisition and tissue parameters of a multi-delay pCASL series.

    ``t`` are acquisition times (post-labeling delay plus labeling duration)
    and ``tau`` the labeling durations, both in seconds, one entry per frame.
    ``t1`` may be a scalar or a volume broadcastable to the grid of ``m0``.
    """

    t: np.ndarray
    tau: np.ndarray
    m0: np.ndarray
    alpha: float = 0.85
    lam: float = 0.9
    t1: float | np.ndarray = 1.33
    t1b: float = 1.65

    def __post_init__(self):
        self.t = np.atleast_1d(np.asarray(self.t, dtype=np.float64))
        self.tau = np.atleast_1d(np.asarray(self.tau, dtype=np.float64))
        self.m0 = np.asarray(self.m0, dtype=np.float64)
        if self.t.shape != self.tau.shape or self.t.ndim != 1:
            raise ValueError("t and tau must be 1-D arrays of equal length")
        for name in ("t", "tau", "m0", "t1"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.t <= 0) or np.any(self.tau <= 0):
            raise ValueError("acquisition times and labeling durations must be > 0")
        if np.any(self.t < self.tau):
            raise ValueError("acquisition time must be >= labeling duration (PLD >= 0)")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.lam <= 0 or self.t1b <= 0 or np.any(np.asarray(self.t1) <= 0):
            raise ValueError("lambda, t1 and t1b must be positive")
        if np.any(self.m0 < 0):
            raise ValueError("m0 must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.t.size

    @property
    def grid(self) -> tuple:
        return self.m0.shape

    @property
    def m0_alpha(self) -> np.ndarray:
        return self.alpha * self.m0 / self.lam

    def with_m0(self, m0) -> "AcquisitionProtocol":
        return AcquisitionProtocol(self.t, self.tau, m0, self.alpha, self.lam,
                                   self.t1, self.t1b)

    def repeated(self, n: int) -> "AcquisitionProtocol":
        """Protocol for ``n`` consecutive repetitions of this frame list."""
        return AcquisitionProtocol(np.tile(self.t, n), np.tile(self.tau, n), self.m0,
                                   self.alpha, self.lam, self.t1, self.t1b)


@dataclass
class ParameterMaps:
    """CBF (internal units, ml/g/s) and ATT (s) volumes on one grid."""

    cbf: np.ndarray
    att: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cbf = np.asarray(self.cbf, dtype=np.float64)
        self.att = np.asarray(self.att, dtype=np.float64)
        if self.cbf.shape != self.att.shape:
            raise ValueError(f"cbf {self.cbf.shape} and att {self.att.shape} grids differ")

    @property
    def grid(self) -> tuple:
        return self.cbf.shape

    @property
    def cbf_external(self) -> np.ndarray:
        return cbf_to_external(self.cbf)

    @classmethod
    def from_external(cls, cbf, att) -> "ParameterMaps":
        return cls(cbf_to_internal(cbf), np.asarray(att, dtype=np.float64))

    @classmethod
    def uniform(cls, grid, cbf_external=30.0, att=1.0) -> "ParameterMaps":
        return cls(np.full(grid, cbf_external * CBF_TO_INTERNAL), np.full(grid, float(att)))

    def stack(self) -> np.ndarray:
        """Unknowns as a ``(2, *grid)`` array, CBF first."""
        return np.stack([self.cbf, self.att])

    @classmethod
    def from_stack(cls, u) -> "ParameterMaps":
        return cls(u[0].copy(), u[1].copy())


def t1_app(f, t1, lam):
    """Apparent tissue relaxation time, ``1 / (1/t1 + f/lam)``."""
    f = np.asarray(f, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(t1)) and np.isfinite(lam)):
        raise ValueError("t1_app arguments must be finite")
    return 1.0 / (1.0 / t1 + f / lam)


def _branches(t, tau, delta):
    """Boolean masks for the transit, inflow and post-bolus branches."""
    inflow = (delta <= t) & (t < delta + tau)
    post = t >= delta + tau
    return inflow, post


def _signal(f, delta, t, tau, m0a, t1, t1b, lam):
    tapp = t1_app(f, t1, lam)
    inflow, post = _branches(t, tau, delta)
    amp = 2.0 * m0a * f * tapp * np.exp(-delta / t1b)
    # exponents are clipped at zero so unused branches never overflow
    s_in = amp * -np.expm1(np.minimum(delta - t, 0.0) / tapp)
    s_post = amp * np.exp(np.minimum(delta + tau - t, 0.0) / tapp) * -np.expm1(-tau / tapp)
    return np.where(post, s_post, np.where(inflow, s_in, 0.0))


def asl_signal(f, delta, proto: AcquisitionProtocol, frame_index: int, m0=None):
    """Model signal of one frame for flow ``f`` (ml/g/s) and transit time ``delta`` (s).

    ``m0`` defaults to the protocol's m0 volume; pass ``1.0`` for the signal
    per unit m0.
    """
    if not 0 <= frame_index < proto.n_frames:
        raise IndexError(f"frame_index {frame_index} out of range")
    m0 = proto.m0 if m0 is None else np.asarray(m0, dtype=np.float64)
    m0a = proto.alpha * m0 / proto.lam
    return _signal(np.asarray(f, dtype=np.float64), np.asarray(delta, dtype=np.float64),
                   proto.t[frame_index], proto.tau[frame_index], m0a, proto.t1,
                   proto.t1b, proto.lam)


def _check_grid(u: ParameterMaps, proto: AcquisitionProtocol):
    if u.grid != proto.grid:
        raise ValueError(f"parameter grid {u.grid} does not match m0 grid {proto.grid}")


def _frame_axes(proto, ndim):
    """Per-frame timing reshaped to broadcast against ``ndim`` voxel axes."""
    shape = (-1,) + (1,) * ndim
    return proto.t.reshape(shape), proto.tau.reshape(shape)


def asl_signal_series(u: ParameterMaps, proto: AcquisitionProtocol) -> np.ndarray:
    """Forward model for all frames, shape ``(n_frames, *grid)``."""
    _check_grid(u, proto)
    t, tau = _frame_axes(proto, u.cbf.ndim)
    return _signal(u.cbf, u.att, t, tau, proto.m0_alpha, proto.t1, proto.t1b, proto.lam)


def jacobian(u: ParameterMaps, proto: AcquisitionProtocol) -> np.ndarray:
    """Partial derivatives of every frame, shape ``(n_frames, 2, *grid)``.

    Index 0 of the second axis is d/d(cbf) in signal per ml/g/s, index 1 is
    d/d(att) in signal per second. At the branch boundaries the branch that
    contains the acquisition time (per the model's inequalities) is
    differentiated.
    """
    _check_grid(u, proto)
    f, delta = u.cbf, u.att
    t, tau = _frame_axes(proto, f.ndim)
    lam, t1b = proto.lam, proto.t1b
    tapp = t1_app(f, proto.t1, lam)
    dtapp = -tapp ** 2 / lam
    a = 2.0 * proto.m0_alpha
    e = np.exp(-delta / t1b)
    inflow, post = _branches(t, tau, delta)

    # inflow branch: A = a f g(T), g(T) = T e (1 - q), q = exp(-(t - delta)/T)
    dt_in = np.maximum(t - delta, 0.0)
    q = np.exp(-dt_in / tapp)
    g_in = tapp * e * (1.0 - q)
    dg_in = e * ((1.0 - q) - q * dt_in / tapp)
    df_in = a * (g_in + f * dg_in * dtapp)
    dd_in = a * f * tapp * e * (-(1.0 - q) / t1b - q / tapp)

    # post-bolus branch: g(T) = T e p (1 - s), p = exp(-(t - tau - delta)/T), s = exp(-tau/T)
    dt_post = np.maximum(t - tau - delta, 0.0)
    p = np.exp(-dt_post / tapp)
    s = np.exp(-tau / tapp)
    g_post = tapp * e * p * (1.0 - s)
    dg_post = e * p * ((1.0 - s) + dt_post * (1.0 - s) / tapp - s * tau / tapp)
    df_post = a * (g_post + f * dg_post * dtapp)
    dd_post = a * f * g_post * (1.0 / tapp - 1.0 / t1b)

    df = np.where(post, df_post, np.where(inflow, df_in, 0.0))
    dd = np.where(post, dd_post, np.where(inflow, dd_in, 0.0))
    return np.stack([df, dd], axis=1)
