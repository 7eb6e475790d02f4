"""Closed-form velocity fields: the empirical minimizer and its Gaussian baseline.

The empirical field is the exact minimizer of the finite-sample objective, a
softmax-weighted blend of per-point conditional velocities.  All mixture math
runs in log space with max subtraction so the fields stay finite arbitrarily
close to the endpoint and arbitrarily far from the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .core import (
    AffineSchedule,
    Dataset,
    GaussianParams,
    SourceKernel,
    T_MAX_DEFAULT,
)

# Normalized weights below this are indistinguishable from zero at every
# declared tolerance; flushing them avoids subnormal arithmetic downstream.
_WEIGHT_FLUSH = 1e-300

_STATS_CACHE_MAX = 1024


def _as_batch(z: np.ndarray):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    if z.ndim == 2:
        return z, False
    raise ValueError(f"state must have shape (d,) or (B, d), got {z.shape}")


@dataclass
class EmpiricalField:
    """Exact empirical flow-matching minimizer for an affine schedule.

    Evaluations accept a single state of shape (d,) or a batch (B, d) and are
    pure; instances are safe to share across threads.
    """

    dataset: Dataset
    schedule: AffineSchedule
    kernel: SourceKernel
    t_max: float = T_MAX_DEFAULT

    def __post_init__(self):
        if self.kernel.dim != self.dataset.dim:
            raise ValueError("kernel dim does not match dataset dim")
        if not 0.0 < self.t_max < 1.0:
            raise ValueError("t_max must lie in (0, 1)")
        self._stats_cache: dict[float, tuple] = {}

    def _check_t(self, t: float) -> float:
        t = float(t)
        if not 0.0 <= t <= self.t_max:
            raise ValueError(f"t={t} outside the field domain [0, {self.t_max}]")
        return t

    def _stats(self, t: float):
        """Per-point (m_t, sigma_t, 1/sigma^2, a_t, b_t, log-jacobian), memoized."""
        hit = self._stats_cache.get(t)
        if hit is not None:
            return hit
        X = self.dataset.points
        m = self.schedule.m(t, X)
        sig = np.asarray(self.schedule.sigma(t, X), dtype=np.float64)
        if not np.all(sig > 0.0):
            raise ValueError(f"sigma(t={t}) is not positive; t is outside the flow domain")
        a = np.asarray(self.schedule.sigma_dot(t, X), dtype=np.float64) / sig
        b = self.schedule.m_dot(t, X) - m * a[:, None]
        stats = (m, sig, 1.0 / (sig * sig), a, b, -self.dataset.dim * np.log(sig))
        if len(self._stats_cache) >= _STATS_CACHE_MAX:
            self._stats_cache.clear()
        self._stats_cache[t] = stats
        return stats

    def _log_conditionals(self, t: float, Z: np.ndarray) -> np.ndarray:
        """log p_t(z | x_i) for every batch state and dataset point, (B, N)."""
        m, _, inv_var, _, _, log_jac = self._stats(t)
        sq = cdist(Z, m, "sqeuclidean")
        sq *= inv_var[None, :]
        out = self.kernel.log_density_from_sqnorm(sq, overwrite=True)
        out += log_jac[None, :]
        return out

    def _weights_batch(self, t: float, Z: np.ndarray) -> np.ndarray:
        logw = self._log_conditionals(t, Z)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        w[w < _WEIGHT_FLUSH] = 0.0
        return w

    def weights(self, t: float, z: np.ndarray) -> np.ndarray:
        """Posterior path weights w_i(t, z); nonnegative, summing to one."""
        t = self._check_t(t)
        Z, single = _as_batch(z)
        w = self._weights_batch(t, Z)
        return w[0] if single else w

    def velocity(self, t: float, z: np.ndarray) -> np.ndarray:
        """Weighted blend sum_i w_i(t, z) * (a_t(x_i) z + b_t(x_i))."""
        t = self._check_t(t)
        Z, single = _as_batch(z)
        _, _, _, a, b, _ = self._stats(t)
        w = self._weights_batch(t, Z)
        v = Z * np.einsum("bn,n->b", w, a)[:, None] + np.einsum("bn,nd->bd", w, b)
        return v[0] if single else v

    def log_density(self, t: float, z: np.ndarray):
        """Log of the N-term mixture (1/N) sum_i p_t(z | x_i)."""
        t = self._check_t(t)
        Z, single = _as_batch(z)
        logp = self._log_conditionals(t, Z)
        peak = logp.max(axis=1)
        out = peak + np.log(np.exp(logp - peak[:, None]).sum(axis=1))
        out -= np.log(len(self.dataset))
        return float(out[0]) if single else out

    def weight_gradients(self, t: float, z: np.ndarray) -> np.ndarray:
        """Analytic grad_z w_i(t, z), shape (N, d), for a single state.

        Uses grad w_i = w_i (g_i - sum_j w_j g_j) with g_i the conditional
        log-density gradient; a fast alternative to central differences.
        """
        t = self._check_t(t)
        Z, single = _as_batch(z)
        if not single:
            raise ValueError("gradients are computed one state at a time")
        m, sig, _, _, _, _ = self._stats(t)
        u = (Z[0][None, :] - m) / sig[:, None]
        g = self.kernel.log_density_grad(u) / sig[:, None]
        w = self._weights_batch(t, Z)[0]
        return w[:, None] * (g - w @ g)

    def conditional_velocities(self, t: float, z: np.ndarray) -> np.ndarray:
        """Per-point conditional velocities a_t(x_i) z + b_t(x_i), shape (N, d)."""
        t = self._check_t(t)
        z = np.asarray(z, dtype=np.float64)
        _, _, _, a, b, _ = self._stats(t)
        return a[:, None] * z[None, :] + b


def weights(field: EmpiricalField, t: float, z: np.ndarray) -> np.ndarray:
    return field.weights(t, z)


def empirical_velocity(field: EmpiricalField, t: float, z: np.ndarray) -> np.ndarray:
    return field.velocity(t, z)


def empirical_log_density(field: EmpiricalField, t: float, z: np.ndarray):
    return field.log_density(t, z)


# --- specialized straight-path closed form ----------------------------------
#
# Independent of the general affine machinery above: weights come from the
# squared-distance softmax and the blend is of straight-line directions.
# Kept separate on purpose so the two routes can cross-check each other.


def rf_softmax_weights(dataset: Dataset, t: float, z: np.ndarray) -> np.ndarray:
    """softmax_j(-|z - t x_j|^2 / (2 (1-t)^2)) for the straight-path schedule."""
    Z, single = _as_batch(z)
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t={t} outside [0, 1)")
    diff = Z[:, None, :] - t * dataset.points[None, :, :]
    logits = np.einsum("bnd,bnd->bn", diff, diff) / (-2.0 * (1.0 - t) ** 2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if single else w


def rf_softmax_velocity(dataset: Dataset, t: float, z: np.ndarray) -> np.ndarray:
    """sum_i w_i(t, z) (x_i - z) / (1 - t) with the softmax weights above."""
    Z, single = _as_batch(z)
    w = rf_softmax_weights(dataset, t, Z)
    v = (np.einsum("bn,nd->bd", w, dataset.points) - Z) / (1.0 - t)
    return v[0] if single else v


@dataclass
class PopulationGaussianField:
    """Population velocity for an independent coupling of N(0, I) with a Gaussian.

    The conditional expectation of the displacement given the interpolant is
    linear in z; coefficients are evaluated in the target eigenbasis.
    """

    target: GaussianParams
    t_max: float = T_MAX_DEFAULT
    _evals: np.ndarray = field(init=False, repr=False)
    _evecs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        evals, evecs = np.linalg.eigh(self.target.covariance)
        self._evals = evals
        self._evecs = evecs

    def path_covariance(self, t: float) -> np.ndarray:
        """Covariance (1-t)^2 I + t^2 Sigma_1 of the interpolant at time t."""
        lam = (1.0 - t) ** 2 + t**2 * self._evals
        return (self._evecs * lam) @ self._evecs.T

    def velocity(self, t: float, z: np.ndarray) -> np.ndarray:
        """m_1 + (t Sigma_1 - (1-t) I) Sigma_t^{-1} (z - t m_1)."""
        t = float(t)
        if not 0.0 <= t < 1.0:
            raise ValueError(f"t={t} outside [0, 1)")
        Z, single = _as_batch(z)
        lam_t = (1.0 - t) ** 2 + t**2 * self._evals
        coef = (t * self._evals - (1.0 - t)) / lam_t
        Y = (Z - t * self.target.mean) @ self._evecs
        v = self.target.mean + (Y * coef) @ self._evecs.T
        return v[0] if single else v

    def score(self, t: float, z: np.ndarray) -> np.ndarray:
        """Score via the velocity relation (t v(t, z) - z) / (1 - t)."""
        t = float(t)
        if not 0.0 < t < 1.0:
            raise ValueError(f"t={t} outside (0, 1); the relation degenerates at t=0")
        Z, single = _as_batch(z)
        s = (t * self.velocity(t, Z) - Z) / (1.0 - t)
        return s[0] if single else s

    def analytic_score(self, t: float, z: np.ndarray) -> np.ndarray:
        """Direct Gaussian score -Sigma_t^{-1} (z - t m_1), the oracle route."""
        t = float(t)
        if not 0.0 <= t < 1.0:
            raise ValueError(f"t={t} outside [0, 1)")
        Z, single = _as_batch(z)
        lam_t = (1.0 - t) ** 2 + t**2 * self._evals
        Y = (Z - t * self.target.mean) @ self._evecs
        s = -(Y / lam_t) @ self._evecs.T
        return s[0] if single else s


def population_gaussian_velocity(
    field: PopulationGaussianField, t: float, z: np.ndarray
) -> np.ndarray:
    return field.velocity(t, z)


def population_score(field: PopulationGaussianField, t: float, z: np.ndarray) -> np.ndarray:
    return field.score(t, z)
