"""Finite-difference operators, joint Frobenius semi-norms and proximal maps for TGV².

Array conventions, for ``N_u`` unknowns on an ``(Ni, Nj, Nk)`` grid:

* unknown stack ``u``: ``(N_u, Ni, Nj, Nk)``
* gradient field ``v``: ``(N_u, 3, Ni, Nj, Nk)``, components (i, j, k)
* symmetrized gradient ``chi``: ``(N_u, 6, Ni, Nj, Nk)``, components
  (ii, jj, kk, ij, ik, jk)

Symmetric fields are paired with the Frobenius inner product of symmetric
matrices, which counts each off-diagonal entry twice (:func:`sym_inner`).
``div2`` is the negative adjoint of :func:`sym_grad` in that pairing, and the
norm and the dual-ball projection use the same factor-2 weights.

Grid spacing is 1 in every direction.
"""
from __future__ import annotations

import numpy as np

SYM_WEIGHTS = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


def _fwd(u, axis):
    """Forward difference, zero across the last index (symmetric extension)."""
    out = np.zeros_like(u)
    n = u.shape[axis]
    hi = [slice(None)] * u.ndim
    lo = [slice(None)] * u.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    out[tuple(lo)] = u[tuple(hi)] - u[tuple(lo)]
    return out


def _bwd(u, axis):
    """Backward difference, zero across the first index (symmetric extension)."""
    out = np.zeros_like(u)
    n = u.shape[axis]
    hi = [slice(None)] * u.ndim
    lo = [slice(None)] * u.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    out[tuple(hi)] = u[tuple(hi)] - u[tuple(lo)]
    return out


def _fwd_adj(z, axis):
    """Euclidean adjoint of :func:`_fwd`."""
    out = np.zeros_like(z)
    n = z.shape[axis]
    hi = [slice(None)] * z.ndim
    lo = [slice(None)] * z.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    out[tuple(hi)] += z[tuple(lo)]
    out[tuple(lo)] -= z[tuple(lo)]
    return out


def _bwd_adj(z, axis):
    """Euclidean adjoint of :func:`_bwd`."""
    out = np.zeros_like(z)
    n = z.shape[axis]
    hi = [slice(None)] * z.ndim
    lo = [slice(None)] * z.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    out[tuple(hi)] += z[tuple(hi)]
    out[tuple(lo)] -= z[tuple(hi)]
    return out


# spatial axes of a (N_u, Ni, Nj, Nk) stack
_AXES = (1, 2, 3)


def grad(u: np.ndarray) -> np.ndarray:
    """Forward-difference gradient of every unknown, ``(N_u, 3, *grid)``."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 4 or min(u.shape[1:]) < 1:
        raise ValueError(f"expected a (N_u, Ni, Nj, Nk) stack, got {u.shape}")
    return np.stack([_fwd(u, ax) for ax in _AXES], axis=1)


def sym_grad(v: np.ndarray) -> np.ndarray:
    """Symmetrized backward-difference gradient of a gradient field."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 5 or v.shape[1] != 3:
        raise ValueError(f"expected a (N_u, 3, Ni, Nj, Nk) field, got {v.shape}")
    v1, v2, v3 = v[:, 0], v[:, 1], v[:, 2]
    return np.stack([
        _bwd(v1, 1),
        _bwd(v2, 2),
        _bwd(v3, 3),
        0.5 * (_bwd(v1, 2) + _bwd(v2, 1)),
        0.5 * (_bwd(v1, 3) + _bwd(v3, 1)),
        0.5 * (_bwd(v2, 3) + _bwd(v3, 2)),
    ], axis=1)


def div1(z0: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`grad`."""
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 5 or z0.shape[1] != 3:
        raise ValueError(f"expected a (N_u, 3, Ni, Nj, Nk) field, got {z0.shape}")
    return -(_fwd_adj(z0[:, 0], 1) + _fwd_adj(z0[:, 1], 2) + _fwd_adj(z0[:, 2], 3))


def div2(z1: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`sym_grad` under :func:`sym_inner`."""
    z1 = np.asarray(z1, dtype=np.float64)
    if z1.ndim != 5 or z1.shape[1] != 6:
        raise ValueError(f"expected a (N_u, 6, Ni, Nj, Nk) field, got {z1.shape}")
    # the 1/2 in the cross terms cancels against the weight 2 of the pairing
    d1 = _bwd_adj(z1[:, 0], 1) + _bwd_adj(z1[:, 3], 2) + _bwd_adj(z1[:, 4], 3)
    d2 = _bwd_adj(z1[:, 1], 2) + _bwd_adj(z1[:, 3], 1) + _bwd_adj(z1[:, 5], 3)
    d3 = _bwd_adj(z1[:, 2], 3) + _bwd_adj(z1[:, 4], 1) + _bwd_adj(z1[:, 5], 2)
    return -np.stack([d1, d2, d3], axis=1)


def _weights(ncomp):
    if ncomp == 3:
        return np.ones(3)
    if ncomp == 6:
        return SYM_WEIGHTS
    raise ValueError(f"fields have 3 or 6 components, got {ncomp}")


def sym_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product of two fields; off-diagonal symmetric components count twice."""
    w = _weights(a.shape[1]).reshape((1, -1) + (1,) * (a.ndim - 2))
    return float(np.sum(w * a * b))


def pointwise_magnitude(z: np.ndarray) -> np.ndarray:
    """Joint Frobenius magnitude per voxel across unknowns and components."""
    w = _weights(z.shape[1]).reshape((1, -1) + (1,) * (z.ndim - 2))
    return np.sqrt(np.sum(w * z * z, axis=(0, 1)))


def frob_seminorm_v(v: np.ndarray) -> float:
    """``||v||_{1,2,F}`` of a gradient field."""
    if v.shape[1] != 3:
        raise ValueError("expected a 3-component gradient field")
    return float(np.sum(pointwise_magnitude(v)))


def frob_seminorm_chi(chi: np.ndarray) -> float:
    """``||chi||_{1,2,F}`` of a symmetrized-gradient field (cross terms weighted 2)."""
    if chi.shape[1] != 6:
        raise ValueError("expected a 6-component symmetric field")
    return float(np.sum(pointwise_magnitude(chi)))


def tgv2_value(u: np.ndarray, v: np.ndarray, alpha0: float, alpha1: float) -> float:
    """TGV² functional evaluated at a given auxiliary field ``v``."""
    return alpha0 * frob_seminorm_v(grad(u) - v) + alpha1 * frob_seminorm_chi(sym_grad(v))


def prox_dual_ball(z: np.ndarray, radius: float) -> np.ndarray:
    """Project every voxel's joint vector onto the ball of the given radius."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    mag = pointwise_magnitude(z)
    return z / np.maximum(1.0, mag / radius)


def prox_r(r: np.ndarray, sigma: float, d_tilde: np.ndarray) -> np.ndarray:
    """Resolvent of the conjugate data term, ``(r - sigma*d) / (1 + sigma)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return (r - sigma * d_tilde) / (1.0 + sigma)


def prox_g(xi: np.ndarray, tau: float, weight: np.ndarray, anchor: np.ndarray,
           strength: float) -> np.ndarray:
    """Resolvent of the weighted Levenberg term ``strength/2 ||u - anchor||_M^2``."""
    weight = np.asarray(weight, dtype=np.float64)
    if np.any(weight < 0):
        raise ValueError("Levenberg weights must be non-negative")
    tdm = tau * strength * weight
    return (tdm * anchor + xi) / (1.0 + tdm)
