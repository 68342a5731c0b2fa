"""Forecast-verification metrics: deterministic, probabilistic, spectral,
and distributional diagnostics.

Conventions used throughout:
  * weights are normalized to mean 1, so weighted means are plain means
    when weights are uniform;
  * anomaly computation is the caller's job for acc (the correlation here
    is uncentered, computed exactly on what is passed in);
  * undefined results (zero-norm anomaly, non-positive corrected spread
    denominator) are returned as nan rather than clamped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .state import Trajectory

__all__ = [
    "WeightVector", "MetricSeries", "rmse", "acc", "relative_improvement",
    "crps", "crps_field", "crpss", "spread_skill_ratio", "ks_two_sample",
    "power_spectrum", "eof", "standardized_index",
]


@dataclass(frozen=True)
class WeightVector:
    """Non-negative spatial weights, normalized to mean 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        m = w.mean()
        if m <= 0:
            raise ValueError("weights must have positive mean")
        w = w / m
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, dim: int) -> "WeightVector":
        return cls(np.ones(dim))

    @property
    def dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class MetricSeries:
    name: str
    lead_or_time: tuple
    values: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.lead_or_time) != len(self.values):
            raise ValueError("lead/value length mismatch")
        object.__setattr__(self, "lead_or_time", tuple(int(k) for k in self.lead_or_time))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))


def _values(x) -> np.ndarray:
    return x.values if hasattr(x, "values") and not isinstance(x, np.ndarray) else np.asarray(x, dtype=np.float64)


def _weights_for(a: np.ndarray, w: WeightVector | None) -> np.ndarray:
    if w is None:
        return np.ones(a.shape[-1])
    if w.dim != a.shape[-1]:
        raise ValueError("weight length mismatch")
    return w.weights


def rmse(a, b, w: WeightVector | None = None) -> float:
    """Weighted root-mean-square difference sqrt(mean_i w_i (a_i-b_i)^2)."""
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ValueError("shape mismatch")
    wv = _weights_for(av, w)
    return float(np.sqrt(np.mean(wv * (av - bv) ** 2)))


def acc(a_anom, b_anom, w: WeightVector | None = None) -> float:
    """Weighted uncentered anomaly correlation; nan if either field has zero norm."""
    av, bv = _values(a_anom), _values(b_anom)
    if av.shape != bv.shape:
        raise ValueError("shape mismatch")
    wv = _weights_for(av, w)
    na = np.sum(wv * av * av)
    nb = np.sum(wv * bv * bv)
    if na <= 0 or nb <= 0:
        return float("nan")
    return float(np.sum(wv * av * bv) / np.sqrt(na * nb))


def relative_improvement(rmse_a: float, rmse_b: float) -> float:
    """Percent change of a relative to baseline b: (a - b)/b * 100."""
    if rmse_b <= 0:
        raise ValueError("baseline rmse must be positive")
    return (rmse_a - rmse_b) / rmse_b * 100.0


def _pairwise_abs_sum(sorted_x: np.ndarray) -> float:
    # sum_{m,k} |x_m - x_k| over all ordered pairs, via the sorted identity
    m = sorted_x.shape[0]
    j = np.arange(m)
    return float(2.0 * np.sum((2 * j - m + 1) * sorted_x))


def crps(members, truth: float) -> float:
    """Fair (unbiased) ensemble CRPS at a single point.

    skill term mean|x_m - y| minus spread term sum|x_m - x_k| / (2 M (M-1));
    a single-member ensemble degenerates to absolute error.
    """
    x = np.asarray(members, dtype=np.float64).ravel()
    m = x.shape[0]
    if m == 0:
        raise ValueError("empty ensemble")
    skill = float(np.mean(np.abs(x - truth)))
    if m == 1:
        return skill
    spread = _pairwise_abs_sum(np.sort(x)) / (2.0 * m * (m - 1))
    return skill - spread


def crps_field(ens_values: np.ndarray, truth, w: WeightVector | None = None) -> float:
    """Weighted mean over coordinates of the per-coordinate ensemble CRPS."""
    X = np.asarray(ens_values, dtype=np.float64)
    y = _values(truth)
    if X.ndim != 2 or X.shape[1] != y.shape[0]:
        raise ValueError("ens_values must be (M, dim) matching truth")
    wv = _weights_for(y, w)
    m = X.shape[0]
    skill = np.mean(np.abs(X - y), axis=0)
    if m == 1:
        per_coord = skill
    else:
        Xs = np.sort(X, axis=0)
        j = np.arange(m)[:, None]
        spread = 2.0 * np.sum((2 * j - m + 1) * Xs, axis=0) / (2.0 * m * (m - 1))
        per_coord = skill - spread
    return float(np.mean(wv * per_coord))


def crpss(crps_fc: float, crps_bench: float) -> float:
    if crps_bench <= 0:
        raise ValueError("benchmark crps must be positive")
    return 1.0 - crps_fc / crps_bench


def spread_skill_ratio(ensembles, truths, w: WeightVector | None = None) -> float:
    """Bias-corrected spread-skill ratio sqrt(S^2 / (eps^2 - S^2/M)).

    S^2 is the time mean of the (weighted) spatially averaged unbiased
    ensemble variance, eps^2 the time mean of the weighted squared error of
    the ensemble mean.  M is the ensemble size.  Returns 0 for a zero-spread
    ensemble with nonzero error, nan when the corrected denominator is not
    positive.
    """
    if isinstance(truths, Trajectory):
        Y = truths.values
    else:
        Y = np.asarray(truths, dtype=np.float64)
    if hasattr(ensembles, "__len__") and len(ensembles) > 0 and hasattr(ensembles[0], "as_array"):
        X = np.stack([e.as_array() for e in ensembles])
    else:
        X = np.asarray(ensembles, dtype=np.float64)
    if X.ndim != 3 or Y.ndim != 2 or X.shape[0] != Y.shape[0] or X.shape[2] != Y.shape[1]:
        raise ValueError("need ensembles (T, M, dim) and truths (T, dim)")
    m = X.shape[1]
    if m < 2:
        raise ValueError("spread needs M >= 2")
    wv = _weights_for(Y, w)
    var = X.var(axis=1, ddof=1)                   # (T, dim) unbiased member variance
    s2 = float(np.mean(np.mean(wv * var, axis=1)))
    err2 = (X.mean(axis=1) - Y) ** 2
    e2 = float(np.mean(np.mean(wv * err2, axis=1)))
    if s2 == 0.0:
        return 0.0 if e2 > 0 else float("nan")
    denom = e2 - s2 / m
    if denom <= 0:
        return float("nan")
    return float(np.sqrt(s2 / denom))


def _kolmogorov_sf(lam: float) -> float:
    # asymptotic Kolmogorov survival function Q(lam) = 2 sum (-1)^{j-1} e^{-2 j^2 lam^2}
    if lam < 1e-8:
        return 1.0
    total = 0.0
    for j in range(1, 101):
        term = 2.0 * (-1.0) ** (j - 1) * np.exp(-2.0 * j * j * lam * lam)
        total += term
        if abs(term) < 1e-12:
            break
    return float(min(1.0, max(0.0, total)))


def ks_two_sample(x, y) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    xs = np.sort(np.asarray(x, dtype=np.float64).ravel())
    ys = np.sort(np.asarray(y, dtype=np.float64).ravel())
    n, m = xs.shape[0], ys.shape[0]
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    grid = np.concatenate([xs, ys])
    cdf_x = np.searchsorted(xs, grid, side="right") / n
    cdf_y = np.searchsorted(ys, grid, side="right") / m
    d = float(np.max(np.abs(cdf_x - cdf_y)))
    ne = n * m / (n + m)
    lam = (np.sqrt(ne) + 0.12 + 0.11 / np.sqrt(ne)) * d
    return d, _kolmogorov_sf(lam)


def power_spectrum(field, domain_length: float) -> tuple[np.ndarray, float]:
    """One-sided power spectrum of a periodic field with a Parseval check.

    F_k = (1/L) sum_l f_l e^{-2 pi i k l / L}; S_0 = C |F_0|^2 and
    S_k = 2 C |F_k|^2 for interior k (the Nyquist bin of an even-length
    field keeps factor 1 so the energies add up exactly).  The Parseval
    residual |sum S_k - (C/L) sum f_l^2| is asserted below 1e-10 (relative
    to the energy scale) and returned.
    """
    f = _values(field)
    L = f.shape[0]
    if L < 2:
        raise ValueError("need at least 2 points")
    C = float(domain_length)
    F = np.fft.rfft(f) / L
    S = 2.0 * C * np.abs(F) ** 2
    S[0] = C * np.abs(F[0]) ** 2
    if L % 2 == 0:
        S[-1] = C * np.abs(F[-1]) ** 2
    energy = C / L * float(np.sum(f * f))
    residual = float(abs(np.sum(S) - energy))
    if residual > 1e-10 * max(1.0, abs(energy)):
        raise AssertionError(f"Parseval residual {residual:.3e} exceeds tolerance")
    return S, residual


def eof(data, n_modes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Leading EOFs of a trajectory: orthonormal patterns, explained-variance
    fractions (non-increasing), and principal-component time series.

    Sign convention: the entry of largest magnitude in each pattern is positive.
    """
    X = data.values if isinstance(data, Trajectory) else np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("data must be (time, dim)")
    t, d = X.shape
    if t <= n_modes:
        raise ValueError("need more samples than modes")
    if n_modes < 1 or n_modes > min(t, d):
        raise ValueError("invalid mode count")
    anom = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(anom, full_matrices=False)
    total = float(np.sum(s ** 2))
    if total <= 0:
        raise ValueError("rank-deficient anomaly matrix: no variance")
    patterns = vt[:n_modes].copy()
    for k in range(n_modes):
        j = int(np.argmax(np.abs(patterns[k])))
        if patterns[k, j] < 0:
            patterns[k] = -patterns[k]
    explained = (s[:n_modes] ** 2) / total
    pcs = anom @ patterns.T
    return patterns, explained, pcs


def standardized_index(series_a, series_b, scale: float = 10.0) -> np.ndarray:
    """Standardized two-point difference index: scale * (d - mean d)/std d."""
    a = np.asarray(series_a, dtype=np.float64).ravel()
    b = np.asarray(series_b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.shape[0] < 2:
        raise ValueError("series must share length >= 2")
    d = a - b
    sd = d.std()
    if sd == 0:
        raise ValueError("zero variance difference series")
    return scale * (d - d.mean()) / sd
