"""Numerical structure checks: Jacobian symmetry, mass conservation, memorization.

A velocity field is a spatial gradient exactly when its Jacobian is symmetric,
so the central quantity here is the finite-difference Jacobian and the norm of
its skew part.  For empirical fields the skew part has a second, independent
estimator built from conditional velocities and weight gradients; the two are
cross-checked rather than trusted individually.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .velocity import EmpiricalField


def default_fd_step(z: np.ndarray) -> float:
    """Central-difference step balancing truncation against cancellation."""
    return 1e-5 * (1.0 + float(np.linalg.norm(z)))


def _velocity_fn(field):
    return field.velocity if hasattr(field, "velocity") else field


def jacobian_fd(field, t: float, z: np.ndarray, h: float | None = None) -> np.ndarray:
    """Central-difference Jacobian J[j, k] = dv_j/dz_k at (t, z)."""
    z = np.asarray(z, dtype=np.float64)
    d = z.size
    if h is None:
        h = default_fd_step(z)
    if h <= 0:
        raise ValueError("h must be positive")
    eye = np.eye(d)
    probes = np.concatenate([z + h * eye, z - h * eye], axis=0)
    vals = _velocity_fn(field)(t, probes)
    # columns come from perturbing one coordinate at a time
    return (vals[:d] - vals[d:]).T / (2.0 * h)


def asymmetry_norm(jac: np.ndarray) -> float:
    """Frobenius norm of the skew part (J - J^T)/2; zero iff J is symmetric."""
    return float(np.linalg.norm(0.5 * (jac - jac.T)))


def skew_condition_sum(
    field: EmpiricalField,
    t: float,
    z: np.ndarray,
    h: float | None = None,
    analytic_gradients: bool = False,
) -> np.ndarray:
    """sum_i (v_i grad w_i^T - grad w_i v_i^T) at (t, z); antisymmetric d x d.

    The weighted field is a gradient field at (t, z) exactly when this matrix
    vanishes.  Conditional velocities v_i are analytic; weight gradients use
    central differences by default, or the closed-form gradient when
    ``analytic_gradients`` is set.
    """
    z = np.asarray(z, dtype=np.float64)
    d = z.size
    if analytic_gradients:
        grads = field.weight_gradients(t, z)
    else:
        if h is None:
            h = default_fd_step(z)
        eye = np.eye(d)
        probes = np.concatenate([z + h * eye, z - h * eye], axis=0)
        w = field.weights(t, probes)
        grads = (w[:d] - w[d:]).T / (2.0 * h)  # (N, d)
    v = field.conditional_velocities(t, z)
    s = np.einsum("ni,nj->ij", v, grads)
    return s - s.T


@dataclass(frozen=True)
class AsymmetryReport:
    """Jacobian symmetry diagnostics at one probe point."""

    t: float
    z: np.ndarray
    jacobian: np.ndarray
    asym_norm: float
    skew_sum_norm: float | None
    fd_step: float

    def to_json_dict(self) -> dict:
        return {
            "t": self.t,
            "z": list(map(float, self.z)),
            "asym_norm": self.asym_norm,
            "skew_sum_norm": self.skew_sum_norm,
            "fd_step": self.fd_step,
        }


def asymmetry_report(field, t: float, z: np.ndarray, h: float | None = None) -> AsymmetryReport:
    """Build the full symmetry diagnostic at (t, z).

    ``skew_sum_norm`` is only defined for empirical fields; other fields get
    None there.
    """
    z = np.asarray(z, dtype=np.float64)
    if h is None:
        h = default_fd_step(z)
    jac = jacobian_fd(field, t, z, h)
    skew_norm = None
    if isinstance(field, EmpiricalField):
        skew_norm = float(np.linalg.norm(skew_condition_sum(field, t, z, h)))
    return AsymmetryReport(
        t=float(t),
        z=z,
        jacobian=jac,
        asym_norm=asymmetry_norm(jac),
        skew_sum_norm=skew_norm,
        fd_step=float(h),
    )


def continuity_residual(
    field: EmpiricalField,
    t: float,
    z: np.ndarray,
    h_t: float,
    h_z: float,
    normalized: bool = False,
) -> float:
    """Central-difference estimate of d/dt p_t(z) + div(p_t v)(t, z).

    The mixture density and its minimizing field satisfy the continuity
    equation exactly, so the residual measures only discretization error and
    shrinks at second order in (h_t, h_z).  With ``normalized`` the residual
    is divided by p_t(z).
    """
    z = np.asarray(z, dtype=np.float64)
    d = z.size
    if h_t <= 0 or h_z <= 0:
        raise ValueError("steps must be positive")
    if not (0.0 < t - h_t and t + h_t <= field.t_max):
        raise ValueError(f"t +/- h_t must stay inside (0, {field.t_max}]")

    dp_dt = (
        np.exp(field.log_density(t + h_t, z)) - np.exp(field.log_density(t - h_t, z))
    ) / (2.0 * h_t)

    eye = np.eye(d)
    probes = np.concatenate([z + h_z * eye, z - h_z * eye], axis=0)
    dens = np.exp(field.log_density(t, probes))
    vels = field.velocity(t, probes)
    # flux component k at the two probes displaced along coordinate k
    flux_plus = dens[:d] * vels[np.arange(d), np.arange(d)]
    flux_minus = dens[d:] * vels[d + np.arange(d), np.arange(d)]
    divergence = float(np.sum(flux_plus - flux_minus) / (2.0 * h_z))

    residual = float(dp_dt) + divergence
    if normalized:
        residual /= float(np.exp(field.log_density(t, z)))
    return residual


@dataclass(frozen=True)
class NearestDistanceStats:
    """Distribution of endpoint-to-nearest-training-point distances."""

    count: int
    min: float
    mean: float
    q25: float
    median: float
    q75: float
    max: float

    def to_json_dict(self) -> dict:
        return {
            "count": self.count,
            "min": self.min,
            "mean": self.mean,
            "q25": self.q25,
            "median": self.median,
            "q75": self.q75,
            "max": self.max,
        }


def memorization_proxy(field: EmpiricalField, endpoints: np.ndarray) -> NearestDistanceStats:
    """Nearest-training-point distance statistics for generated endpoints."""
    pts = np.asarray(endpoints, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.size == 0:
        raise ValueError("endpoints must be nonempty")
    X = field.dataset.points
    dists = np.empty(pts.shape[0])
    chunk = 4096
    for s in range(0, pts.shape[0], chunk):
        block = pts[s : s + chunk]
        diff = block[:, None, :] - X[None, :, :]
        dists[s : s + block.shape[0]] = np.sqrt(
            np.einsum("bnd,bnd->bn", diff, diff).min(axis=1)
        )
    q25, med, q75 = np.quantile(dists, [0.25, 0.5, 0.75])
    return NearestDistanceStats(
        count=int(dists.size),
        min=float(dists.min()),
        mean=float(dists.mean()),
        q25=float(q25),
        median=float(med),
        q75=float(q75),
        max=float(dists.max()),
    )
