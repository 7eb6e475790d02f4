"""Empirical survival curves and exponential vs polynomial tail fits.

The theorems under test are one-sided bounds that hold "for sufficiently
large" thresholds, so fits run on the upper tail only (default: top 5% of
samples, never fewer than 200 points), and noisy extreme thresholds with
fewer than 10 exceedances are dropped before regression.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

MIN_SAMPLES = 100
MIN_TAIL_POINTS = 200
MIN_DISTINCT_THRESHOLDS = 50
DEFAULT_TAIL_QUANTILE = 0.95

# thresholds with fewer exceedances than this are too noisy to regress on
_MIN_EXCEEDANCES = 10


class InsufficientDataError(ValueError):
    """Too few samples to estimate a survival curve."""


class TailFitError(ValueError):
    """Tail region is degenerate or does not admit a decaying fit."""


@dataclass(frozen=True)
class SurvivalCurve:
    """Empirical exceedance curve S(u) = #{x_i >= u} / n on distinct thresholds."""

    thresholds: np.ndarray
    survival: np.ndarray
    n_samples: int

    def pairs(self) -> list[tuple[float, float]]:
        return [(float(u), float(s)) for u, s in zip(self.thresholds, self.survival)]

    def write_csv(self, fobj, metadata: dict | None = None) -> None:
        if metadata:
            tags = " ".join(f"{k}={v}" for k, v in metadata.items())
            fobj.write(f"# {tags}\n")
        fobj.write("u,survival\n")
        for u, s in zip(self.thresholds, self.survival):
            fobj.write(f"{u:.17g},{s:.17g}\n")

    def to_csv(self, path, metadata: dict | None = None) -> None:
        with open(path, "w", newline="\n") as f:
            self.write_csv(f, metadata)

    def to_csv_text(self, metadata: dict | None = None) -> str:
        buf = io.StringIO()
        self.write_csv(buf, metadata)
        return buf.getvalue()


def survival_function(samples) -> SurvivalCurve:
    """Exceedance fractions at the sorted distinct sample values."""
    arr = np.asarray(samples, dtype=np.float64).ravel()
    if arr.size < MIN_SAMPLES:
        raise InsufficientDataError(
            f"need at least {MIN_SAMPLES} samples, got {arr.size}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples must be finite")
    xs = np.sort(arr)
    thresholds, first = np.unique(xs, return_index=True)
    survival = (arr.size - first) / arr.size
    return SurvivalCurve(thresholds=thresholds, survival=survival, n_samples=arr.size)


@dataclass(frozen=True)
class TailFitResult:
    """Least-squares line through the transformed upper tail of a survival curve.

    ``slope`` is d log S / du for the exponential model and d log S / d log u
    for the polynomial model; a valid fit always has slope < 0.
    """

    model: str
    slope: float
    intercept: float
    r_squared: float
    n_tail: int
    threshold_quantile: float

    def to_json_dict(self) -> dict:
        return {
            "model": self.model,
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "n_tail": self.n_tail,
            "threshold_quantile": self.threshold_quantile,
        }


def _tail_region(curve: SurvivalCurve, q: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 <= q < 1.0:
        raise ValueError(f"quantile q={q} must lie in [0, 1)")
    keep = curve.survival >= _MIN_EXCEEDANCES / curve.n_samples
    u = curve.thresholds[keep]
    s = curve.survival[keep]
    in_tail = s <= (1.0 - q)
    if in_tail.sum() < MIN_TAIL_POINTS:
        # widen to the largest surviving thresholds rather than fit the bulk
        u_tail = u[-MIN_TAIL_POINTS:]
        s_tail = s[-MIN_TAIL_POINTS:]
    else:
        u_tail = u[in_tail]
        s_tail = s[in_tail]
    if np.unique(u_tail).size < MIN_DISTINCT_THRESHOLDS:
        raise TailFitError(
            f"tail region has {np.unique(u_tail).size} distinct thresholds, "
            f"need {MIN_DISTINCT_THRESHOLDS}"
        )
    return u_tail, s_tail


def _line_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    if np.ptp(x) == 0.0:
        raise TailFitError("degenerate tail: thresholds do not vary")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise TailFitError("degenerate tail: survival does not vary")
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot
    return float(slope), float(intercept), min(max(r2, 0.0), 1.0)


def fit_exponential_tail(
    curve: SurvivalCurve, q: float = DEFAULT_TAIL_QUANTILE
) -> TailFitResult:
    """Fit log S(u) = slope * u + intercept on the upper tail."""
    u, s = _tail_region(curve, q)
    slope, intercept, r2 = _line_fit(u, np.log(s))
    if slope >= 0.0:
        raise TailFitError(f"exponential fit does not decay (slope={slope:.3g})")
    return TailFitResult("exponential", slope, intercept, r2, int(u.size), q)


def fit_polynomial_tail(
    curve: SurvivalCurve, q: float = DEFAULT_TAIL_QUANTILE
) -> TailFitResult:
    """Fit log S(u) = slope * log u + intercept on the upper tail."""
    u, s = _tail_region(curve, q)
    if np.any(u <= 0.0):
        raise TailFitError("polynomial fit requires strictly positive thresholds")
    slope, intercept, r2 = _line_fit(np.log(u), np.log(s))
    if slope >= 0.0:
        raise TailFitError(f"polynomial fit does not decay (slope={slope:.3g})")
    return TailFitResult("polynomial", slope, intercept, r2, int(u.size), q)


def dkw_radius(n: int, delta: float = 1e-3) -> float:
    """One-sided Dvoretzky-Kiefer-Wolfowitz confidence radius."""
    if n < 1 or not 0.0 < delta < 1.0:
        raise ValueError("need n >= 1 and delta in (0, 1)")
    return math.sqrt(math.log(1.0 / delta) / (2.0 * n))


def bound_domination_check(
    curve: SurvivalCurve, bound, u_min: float, delta: float = 1e-3
) -> bool:
    """True iff S(u) <= bound(u) + DKW(n, delta) at every threshold u >= u_min."""
    u_all = curve.thresholds
    if not u_all[0] <= u_min <= u_all[-1]:
        raise ValueError(
            f"u_min={u_min} outside sampled range [{u_all[0]:.6g}, {u_all[-1]:.6g}]"
        )
    mask = u_all >= u_min
    u = u_all[mask]
    s = curve.survival[mask]
    try:
        b = np.asarray(bound(u), dtype=np.float64)
        if b.shape != u.shape:
            raise TypeError
    except TypeError:
        b = np.asarray([float(bound(x)) for x in u])
    return bool(np.all(s <= b + dkw_radius(curve.n_samples, delta)))
