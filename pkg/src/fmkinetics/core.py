"""Datasets, source kernels, affine schedules and their conditional flows.

Everything here is immutable after construction and safe to share across
workers.  Sampling is counter-based: the random words consumed by row ``i``
of a stream depend only on ``(seed, i)``, never on chunking or thread
assignment.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaincinv, gammaln, ndtri

# The unregularized straight-path velocity blows up at t=1; every operation
# that walks a flow accepts t only in [0, T_MAX_DEFAULT] unless the caller
# narrows it further.
T_MAX_DEFAULT = 1.0 - 1e-3

_LOG_2PI = math.log(2.0 * math.pi)

# Philox-4x64 emits 4 words per counter tick; rows are padded to that block
# so every row starts on a counter boundary.
_PHILOX_BLOCK = 4


def max_row_norm(points: np.ndarray) -> float:
    """Largest Euclidean row norm, computed the same way everywhere."""
    return float(np.max(np.linalg.norm(points, axis=1)))


@dataclass(frozen=True)
class Dataset:
    """A fixed set of target points with its cached maximum norm.

    Attributes
    ----------
    points : (N, d) float64 array, C-contiguous, read-only
    dim : int
    max_norm : float, equal to ``max_row_norm(points)``
    """

    points: np.ndarray
    dim: int = field(init=False)
    max_norm: float = field(init=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, order="C", copy=True)
        if pts.ndim != 2:
            raise ValueError(f"points must be 2-d (N, d), got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("dataset needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("dataset contains non-finite coordinates")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dim", int(pts.shape[1]))
        object.__setattr__(self, "max_norm", max_row_norm(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Load one point per row, no header, d numeric columns."""
        rows = []
        width = None
        with open(path, newline="") as f:
            for lineno, row in enumerate(csv.reader(f), start=1):
                if not row:
                    continue
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise ValueError(
                        f"{path}: line {lineno} has {len(row)} columns, expected {width}"
                    )
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from None
        if not rows:
            raise ValueError(f"{path}: empty dataset")
        return cls(np.asarray(rows, dtype=np.float64))

    @classmethod
    def from_json(cls, path) -> "Dataset":
        """Load a JSON array of equal-length numeric arrays."""
        with open(path) as f:
            raw = json.load(f)
        if not isinstance(raw, list) or not raw:
            raise ValueError(f"{path}: expected a non-empty JSON array of arrays")
        widths = {len(r) if isinstance(r, list) else -1 for r in raw}
        if len(widths) != 1 or -1 in widths:
            raise ValueError(f"{path}: rows are not a rectangular array")
        return cls(np.asarray(raw, dtype=np.float64))


@dataclass(frozen=True)
class SourceKernel:
    """Source density: standard Gaussian or spherical multivariate Student-t.

    For ``student_t`` the norm tail index equals ``dof``: the kernel is the
    classic Gaussian-over-chi construction, so P(|X| >= s) ~ s**-dof.
    """

    kind: str
    dim: int
    dof: float | None = None

    def __post_init__(self):
        if self.kind not in ("standard_gaussian", "student_t"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.kind == "student_t":
            if self.dof is None or not self.dof > 0:
                raise ValueError("student_t kernel requires dof > 0")
        elif self.dof is not None:
            raise ValueError("standard_gaussian kernel takes no dof")

    @property
    def norm_tail_index(self) -> float:
        """Tail index alpha of P(|X| >= s); inf for the Gaussian."""
        return math.inf if self.kind == "standard_gaussian" else float(self.dof)

    def log_density(self, u: np.ndarray) -> np.ndarray:
        """log K(u) for u of shape (..., dim); finite for finite input."""
        u = np.asarray(u, dtype=np.float64)
        return self.log_density_from_sqnorm(np.einsum("...d,...d->...", u, u))

    def log_density_from_sqnorm(self, sq: np.ndarray, overwrite: bool = False) -> np.ndarray:
        """log K as a function of |u|^2 (the kernel is spherical).

        With ``overwrite`` the input buffer is reused; results are bitwise
        identical either way.
        """
        sq = np.asarray(sq, dtype=np.float64)
        out = sq if overwrite else sq.astype(np.float64, copy=True)
        if self.kind == "standard_gaussian":
            out *= -0.5
            out += -0.5 * self.dim * _LOG_2PI
            return out
        nu, d = self.dof, self.dim
        lognorm = (
            gammaln(0.5 * (nu + d))
            - gammaln(0.5 * nu)
            - 0.5 * d * math.log(nu * math.pi)
        )
        out /= nu
        np.log1p(out, out=out)
        out *= -0.5 * (nu + d)
        out += lognorm
        return out

    def log_density_grad(self, u: np.ndarray) -> np.ndarray:
        """Gradient of log K at u, shape (..., dim)."""
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "standard_gaussian":
            return -u
        nu, d = self.dof, self.dim
        sq = np.einsum("...d,...d->...", u, u)
        return -(nu + d) / (nu + sq)[..., None] * u

    @property
    def _words_per_row(self) -> int:
        # d uniforms for the Gaussian vector, +1 for the chi-square divisor
        return self.dim + (1 if self.kind == "student_t" else 0)


def _uniform_rows(seed: int, start_row: int, n_rows: int, words_per_row: int) -> np.ndarray:
    """Open-interval uniforms for rows [start_row, start_row + n_rows).

    Row i always consumes the same Philox words regardless of how calls are
    chunked, which is what makes parallel sampling worker-invariant.
    """
    stride = -(-words_per_row // _PHILOX_BLOCK) * _PHILOX_BLOCK
    tick0 = start_row * (stride // _PHILOX_BLOCK)
    counter = [
        tick0 & 0xFFFFFFFFFFFFFFFF,
        (tick0 >> 64) & 0xFFFFFFFFFFFFFFFF,
        0,
        0,
    ]
    gen = np.random.Generator(np.random.Philox(key=seed, counter=counter))
    u = gen.random(n_rows * stride).reshape(n_rows, stride)[:, :words_per_row]
    # random() yields k * 2**-53; the half-step shift keeps u strictly inside
    # (0, 1) so the inverse CDFs below stay finite.
    return u + 2.0**-54


def sample_source(
    kernel: SourceKernel, seed: int, count: int, start: int = 0
) -> np.ndarray:
    """Draw ``count`` i.i.d. source vectors, shape (count, dim).

    Deterministic in (seed, row index): ``start`` selects a window of the
    same infinite stream, so sampling rows [0, n) in one call equals
    concatenating any partition of that range.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if start < 0:
        raise ValueError("start must be >= 0")
    u = _uniform_rows(seed, start, count, kernel._words_per_row)
    z = ndtri(u[:, : kernel.dim])
    if kernel.kind == "standard_gaussian":
        return z
    # chi-square via inverse regularized gamma keeps consumption fixed-width
    chisq = 2.0 * gammaincinv(0.5 * kernel.dof, u[:, kernel.dim])
    return z * np.sqrt(kernel.dof / chisq)[:, None]


# --- affine schedules -------------------------------------------------------
#
# Schedule callables are vectorized over the point axis: x has shape (..., d),
# m and m_dot return (..., d), sigma and sigma_dot return (...).  Built-ins
# are assembled from module-level functions so schedule objects pickle.


def _rf_mean(t, x):
    return t * np.asarray(x, dtype=np.float64)


def _rf_mean_dot(t, x):
    return np.asarray(x, dtype=np.float64) + 0.0


def _scalar_profile(t, x, value):
    x = np.asarray(x)
    return np.full(x.shape[:-1], value, dtype=np.float64)


def _rf_sigma(t, x, shrink):
    return _scalar_profile(t, x, 1.0 - shrink * t)


def _rf_sigma_dot(t, x, shrink):
    return _scalar_profile(t, x, -shrink)


@dataclass(frozen=True)
class AffineSchedule:
    """Conditional affine flow psi_t(z | x) = m(t, x) + sigma(t, x) * z.

    The time derivatives are supplied, not differenced, so the velocity
    coefficients derived from them are exact.
    """

    m: Callable[[float, np.ndarray], np.ndarray]
    m_dot: Callable[[float, np.ndarray], np.ndarray]
    sigma: Callable[[float, np.ndarray], np.ndarray]
    sigma_dot: Callable[[float, np.ndarray], np.ndarray]
    name: str
    sigma_end: float = 0.0

    def check_boundaries(self, dim: int, n_probes: int = 100, seed: int = 0) -> None:
        """Verify m(0)=0, m(1)=x, sigma(0)=1, sigma(1)=sigma_end on random probes."""
        x = np.random.Generator(np.random.Philox(key=seed)).normal(size=(n_probes, dim))
        if not np.allclose(self.m(0.0, x), 0.0, atol=1e-12):
            raise ValueError(f"schedule {self.name!r}: m(0, x) != 0")
        if not np.allclose(self.m(1.0, x), x, atol=1e-12):
            raise ValueError(f"schedule {self.name!r}: m(1, x) != x")
        if not np.allclose(self.sigma(0.0, x), 1.0, atol=1e-12):
            raise ValueError(f"schedule {self.name!r}: sigma(0, x) != 1")
        sig_end = self.sigma(1.0, x)
        if not np.allclose(sig_end, self.sigma_end, atol=1e-12) or self.sigma_end < 0:
            raise ValueError(f"schedule {self.name!r}: sigma(1, x) != {self.sigma_end}")
        for t in (0.0, 0.25, 0.5, 0.9, T_MAX_DEFAULT):
            if not np.all(self.sigma(t, x) > 0):
                raise ValueError(f"schedule {self.name!r}: sigma(t={t}, x) <= 0")


def rf_schedule() -> AffineSchedule:
    """Straight interpolation paths: m = t*x, sigma = 1 - t."""
    sched = AffineSchedule(
        m=_rf_mean,
        m_dot=_rf_mean_dot,
        sigma=partial(_rf_sigma, shrink=1.0),
        sigma_dot=partial(_rf_sigma_dot, shrink=1.0),
        name="rf",
        sigma_end=0.0,
    )
    sched.check_boundaries(dim=3)
    return sched


def regularized_rf_schedule(sigma_min: float) -> AffineSchedule:
    """Straight paths with sigma = 1 - (1 - sigma_min) * t, sigma_min in [0, 1)."""
    if not 0.0 <= sigma_min < 1.0:
        raise ValueError("sigma_min must be in [0, 1)")
    shrink = 1.0 - sigma_min
    sched = AffineSchedule(
        m=_rf_mean,
        m_dot=_rf_mean_dot,
        sigma=partial(_rf_sigma, shrink=shrink),
        sigma_dot=partial(_rf_sigma_dot, shrink=shrink),
        name=f"rf_regularized({sigma_min:g})",
        sigma_end=sigma_min,
    )
    sched.check_boundaries(dim=3)
    return sched


def affine_coefficients(schedule: AffineSchedule, t: float, x: np.ndarray):
    """Velocity coefficients (a, b) with v(t, z | x) = a * z + b.

    a = sigma_dot / sigma and b = m_dot - m * a, vectorized over a trailing
    point axis: x of shape (..., d) gives a of shape (...) and b like x.
    """
    x = np.asarray(x, dtype=np.float64)
    sig = np.asarray(schedule.sigma(t, x), dtype=np.float64)
    if not np.all(sig > 0.0):
        raise ValueError(f"sigma(t={t}) is not positive; t is outside the flow domain")
    a = np.asarray(schedule.sigma_dot(t, x), dtype=np.float64) / sig
    b = schedule.m_dot(t, x) - schedule.m(t, x) * a[..., None]
    if x.ndim == 1:
        return float(a), b
    return a, b


def conditional_log_density(
    schedule: AffineSchedule,
    kernel: SourceKernel,
    t: float,
    z: np.ndarray,
    x: np.ndarray,
) -> float | np.ndarray:
    """log p_t(z | x) = -d*log sigma_t(x) + log K((z - m_t(x)) / sigma_t(x))."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    sig = np.asarray(schedule.sigma(t, x), dtype=np.float64)
    if not np.all(sig > 0.0):
        raise ValueError(f"sigma(t={t}) is not positive; t is outside the flow domain")
    diff = z - schedule.m(t, x)
    sq = np.einsum("...d,...d->...", diff, diff) * (1.0 / (sig * sig))
    out = -kernel.dim * np.log(sig) + kernel.log_density_from_sqnorm(sq)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class GaussianParams:
    """Mean and SPD covariance of a Gaussian target."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64, copy=True).reshape(-1)
        cov = np.array(self.covariance, dtype=np.float64, copy=True)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean size {mean.size}")
        atol = 1e-12 * max(1.0, float(np.abs(cov).max()))
        if not np.allclose(cov, cov.T, rtol=0.0, atol=atol):
            raise ValueError("covariance is not symmetric to 1e-12")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ValueError("covariance is not positive definite")
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_json(cls, path) -> "GaussianParams":
        """Load {"mean": [...], "cov": [[...], ...]} from a JSON file."""
        with open(path) as f:
            raw = json.load(f)
        try:
            return cls(np.asarray(raw["mean"]), np.asarray(raw["cov"]))
        except KeyError as exc:
            raise ValueError(f"{path}: missing key {exc}") from None
