"""Closed-form Gaussian transport baselines and concentration constants.

Covers the identity-source Gaussian Monge map, the pointwise energy identity,
the exponential concentration bound with its explicit constants, the
Gaussian-source and affine-growth energy-tail constants, and the two scalar
oracle formulas (Gaussian MGF, chi-square tail) that back them.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .core import AffineSchedule, Dataset, GaussianParams, affine_coefficients

_LOG_2PI = math.log(2.0 * math.pi)

# Eigenvalues this small are outside the SPD contract; between the two
# thresholds they are clamped before the square root.
_EIG_REJECT = 1e-8
_EIG_CLAMP = 1e-12

# |sqrt(eigenvalue) - 1| below this counts as "covariance equals identity",
# which disables the exponential bound (its constants diverge as rho -> 0).
_RHO_IDENTITY_TOL = 1e-12


class GaussianTransport:
    """Monge map x -> m_1 + Sigma_1^{1/2} x and its derived quantities."""

    def __init__(self, target: GaussianParams):
        self.target = target
        evals, evecs = np.linalg.eigh(target.covariance)
        if evals.min() < _EIG_REJECT:
            raise ValueError(
                f"covariance eigenvalue {evals.min():.3e} below SPD tolerance {_EIG_REJECT}"
            )
        evals = np.maximum(evals, _EIG_CLAMP)
        self._evals = evals
        self._evecs = evecs
        roots = np.sqrt(evals)
        self.sqrt_cov = (evecs * roots) @ evecs.T
        self.inv_sqrt_cov = (evecs / roots) @ evecs.T
        dev = np.abs(roots - 1.0).max()
        self.rho = float(dev**2) if dev > _RHO_IDENTITY_TOL else 0.0
        if self.rho > 0.0:
            mean_sq = float(self.target.mean @ self.target.mean)
            self.tail_C = 2.0 ** (0.5 * self.dim) * math.exp(mean_sq / (2.0 * self.rho))
        else:
            self.tail_C = None

    @property
    def dim(self) -> int:
        return self.target.dim

    def monge_map(self, x: np.ndarray) -> np.ndarray:
        """m_1 + Sigma_1^{1/2} x; pushes N(0, I) forward to the target."""
        x = np.asarray(x, dtype=np.float64)
        return self.target.mean + x @ self.sqrt_cov

    def inverse_map(self, y: np.ndarray) -> np.ndarray:
        """Sigma_1^{-1/2} (y - m_1), the inverse of ``monge_map``."""
        y = np.asarray(y, dtype=np.float64)
        return (y - self.target.mean) @ self.inv_sqrt_cov

    def ot_energy(self, y: np.ndarray):
        """Transport energy |y - R^{-1}(y)|^2 of an endpoint y."""
        y = np.asarray(y, dtype=np.float64)
        diff = y - self.inverse_map(y)
        out = np.einsum("...d,...d->...", diff, diff)
        return float(out) if out.ndim == 0 else out

    def log_target_density(self, y: np.ndarray):
        y = np.asarray(y, dtype=np.float64)
        w = (y - self.target.mean) @ self._evecs
        quad = np.einsum("...d,...d->...", w / self._evals, w)
        logdet = float(np.sum(np.log(self._evals)))
        out = -0.5 * (quad + logdet + self.dim * _LOG_2PI)
        return float(out) if out.ndim == 0 else out

    def energy_identity_residual(self, y: np.ndarray):
        """Residual of E(y)/2 = -log p_1(y) + C(y); zero up to rounding.

        C(y) = y^T (I - 2 Sigma^{-1/2}) y / 2 + m_1^T Sigma^{-1/2} y
               - log det(2 pi Sigma) / 2.
        """
        y = np.asarray(y, dtype=np.float64)
        quad = np.einsum("...d,...d->...", y, y) - 2.0 * np.einsum(
            "...d,...d->...", y @ self.inv_sqrt_cov, y
        )
        lin = np.einsum("...d,d->...", y, self.target.mean @ self.inv_sqrt_cov)
        logdet = float(np.sum(np.log(self._evals))) + self.dim * _LOG_2PI
        corr = 0.5 * quad + lin - 0.5 * logdet
        out = 0.5 * self.ot_energy(y) + self.log_target_density(y) - corr
        return float(out) if np.ndim(out) == 0 else out

    def exp_tail_bound(self, u):
        """min(1, C exp(-u / (4 rho))); requires a non-identity covariance."""
        if self.rho == 0.0:
            raise ValueError("exponential tail bound is undefined for identity covariance")
        u = np.asarray(u, dtype=np.float64)
        if not np.all(u > 0.0):
            raise ValueError("thresholds must be positive")
        out = np.minimum(1.0, self.tail_C * np.exp(-u / (4.0 * self.rho)))
        return float(out) if out.ndim == 0 else out

    def w2_squared(self) -> float:
        """Squared 2-Wasserstein distance from N(0, I) to the target.

        |m_1|^2 + tr(Sigma_1) + d - 2 tr(Sigma_1^{1/2}); validated against the
        Monte Carlo transport cost in the test suite before anything relies
        on it.
        """
        mean_sq = float(self.target.mean @ self.target.mean)
        return mean_sq + float(self._evals.sum()) + self.dim - 2.0 * float(np.sqrt(self._evals).sum())


def monge_map(gt: GaussianTransport, x: np.ndarray) -> np.ndarray:
    return gt.monge_map(x)


def inverse_map(gt: GaussianTransport, y: np.ndarray) -> np.ndarray:
    return gt.inverse_map(y)


def ot_energy(gt: GaussianTransport, y: np.ndarray):
    return gt.ot_energy(y)


def energy_identity_residual(gt: GaussianTransport, y: np.ndarray):
    return gt.energy_identity_residual(y)


def exp_tail_bound(gt: GaussianTransport, u):
    return gt.exp_tail_bound(u)


def w2_squared_gaussian(gt: GaussianTransport) -> float:
    return gt.w2_squared()


class GaussianSourceTailConstants(NamedTuple):
    """Explicit constants of the Gaussian-source exponential energy bounds."""

    c_t: float
    C_t: float
    U_t: float
    c_T: float
    C_T: float
    U_T: float
    c3: float


def gaussian_source_tail_constants(
    dataset: Dataset, t: float, T: float
) -> GaussianSourceTailConstants:
    """Constants (c_t, C_t, U_t, c_T, C_T, U_T, c3) for a straight-path field.

    Instantaneous: P(K_t >= u) <= C_t exp(-c_t u) for u >= U_t with
    c_t = (1-t)^4/32 and C_t = exp(M^2/16).  Integrated: P(E_T >= u) <=
    C_T exp(-c_T u) for u >= U_T with c_T = 3/(32((1-T)^-3 - 1)) and
    U_T = c3(T)(2d + M^2), c3(T) = (2/3)((1-T)^-3 - 1).
    """
    if not 0.0 <= t <= T:
        raise ValueError(f"need 0 <= t <= T, got t={t}, T={T}")
    if T >= 1.0:
        raise ValueError(f"T={T} must be < 1")
    M2 = dataset.max_norm**2
    d = dataset.dim
    c_t = (1.0 - t) ** 4 / 32.0
    C_t = math.exp(M2 / 16.0)
    U_t = 2.0 * (1.0 - t) ** -4 * (2 * d + M2)
    c3 = (2.0 / 3.0) * ((1.0 - T) ** -3 - 1.0)
    U_T = c3 * (2 * d + M2)
    c_T = 3.0 / (32.0 * ((1.0 - T) ** -3 - 1.0)) if T > 0.0 else math.inf
    return GaussianSourceTailConstants(c_t, C_t, U_t, c_T, C_t, U_T, c3)


class AffineGrowthConstants(NamedTuple):
    """Growth and comparison constants for a general affine empirical field.

    A_max / B_max bound the conditional coefficients over the dataset and
    [0, T]; the remaining constants come from the Gronwall comparison
    r' <= A_max r + B_max, giving K_t <= C_K (|x0|^2 + 1) and
    E_T <= C_E (|x0|^2 + 1).
    """

    A_max: float
    B_max: float
    C1: float
    C2: float
    C3: float
    C4: float
    C_K: float
    C_E: float
    T: float


def affine_growth_constants(
    dataset: Dataset, schedule: AffineSchedule, T: float, grid_points: int = 4096
) -> AffineGrowthConstants:
    """Numerical suprema of |a_t|, |b_t| over the dataset and a [0, T] grid."""
    if not 0.0 < T < 1.0:
        raise ValueError(f"T={T} must lie in (0, 1)")
    A_max = 0.0
    B_max = 0.0
    for t in np.linspace(0.0, T, grid_points + 1):
        a, b = affine_coefficients(schedule, float(t), dataset.points)
        A_max = max(A_max, float(np.abs(a).max()))
        B_max = max(B_max, float(np.linalg.norm(b, axis=1).max()))
    if A_max > 0.0:
        C1 = math.exp(A_max * T)
        C2 = B_max / A_max * (C1 - 1.0)
    else:
        C1 = 1.0
        C2 = B_max * T
    C3 = A_max * C1
    C4 = A_max * C2 + B_max
    C_K = 2.0 * max(C3**2, C4**2)
    return AffineGrowthConstants(A_max, B_max, C1, C2, C3, C4, C_K, T * C_K, T)


def gaussian_mgf(a: float, b: float) -> float:
    """E[exp(a W + b W^2)] for scalar standard Gaussian W, b < 1/2."""
    if b >= 0.5:
        raise ValueError(f"b={b} >= 1/2: the expectation diverges")
    return (1.0 - 2.0 * b) ** -0.5 * math.exp(a**2 / (2.0 * (1.0 - 2.0 * b)))


def gaussian_mgf_monte_carlo(a: float, b: float, draws: int, seed: int) -> float:
    """Monte Carlo oracle for E[exp(a W + b W^2)], W ~ N(0, 1).

    The naive sample mean has finite variance only for b < 1/4, so for larger
    b the estimate is importance-sampled from an exponentially tilted Gaussian
    proposal.  Either way the estimator is unbiased for the true expectation
    whatever value ``gaussian_mgf`` returns, which is what makes it an oracle.
    """
    if b >= 0.5:
        raise ValueError(f"b={b} >= 1/2: the expectation diverges")
    if draws < 1:
        raise ValueError("draws must be >= 1")
    from .core import SourceKernel, sample_source

    z = sample_source(SourceKernel("standard_gaussian", dim=1), seed, draws)[:, 0]
    if b < 0.2:
        return float(np.mean(np.exp(a * z + b * z * z)))
    prec = 1.0 - 2.0 * b
    m_q = a / prec
    # any proposal variance above 1/(2(1-2b)) keeps the weights square-integrable
    s_q = math.sqrt(0.75 / prec)
    w = m_q + s_q * z
    logwt = a * w + b * w * w - 0.5 * w * w + 0.5 * ((w - m_q) / s_q) ** 2 + math.log(s_q)
    return float(np.mean(np.exp(logwt)))


def chisq_tail_monte_carlo(s: float, d: int, draws: int, seed: int) -> float:
    """Empirical P(|X|^2 / d >= s) for X ~ N(0, I_d)."""
    from .core import SourceKernel, sample_source

    x = sample_source(SourceKernel("standard_gaussian", dim=d), seed, draws)
    u = np.einsum("bd,bd->b", x, x) / d
    return float(np.mean(u >= s))


def chisq_tail_bound(s: float, d: int) -> float:
    """Upper bound exp(-s d / 16) on P(|X|^2 / d >= s) for X ~ N(0, I_d), s >= 2."""
    if s < 2.0:
        raise ValueError(f"s={s} outside the bound's validity range s >= 2")
    if d < 1:
        raise ValueError("d must be a positive integer")
    return math.exp(-s * d / 16.0)
