"""Reference methods the generative pipeline is judged against.

Exact Kalman filtering for the linear-Gaussian system, a stochastic
ensemble Kalman update, and the persistence / climatology forecasts used
as skill floors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import ObservationSet
from .dynamics import SystemSpec
from .rng import generator
from .state import Climatology, Ensemble, Trajectory

__all__ = [
    "LinearGaussianModel", "KalmanResult", "kalman_filter", "enkf_step",
    "stationary_covariance", "persistence_forecast", "climatology_ensemble",
]


@dataclass(frozen=True)
class LinearGaussianModel:
    """One-step transition x' = A x + w, w ~ N(0, Q)."""

    a_d: np.ndarray
    q_d: np.ndarray

    def __post_init__(self):
        a = np.array(self.a_d, dtype=np.float64)
        q = np.array(self.q_d, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or q.shape != a.shape:
            raise ValueError("A and Q must be matching square matrices")
        q = 0.5 * (q + q.T)
        a.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "a_d", a)
        object.__setattr__(self, "q_d", q)

    @property
    def dim(self) -> int:
        return self.a_d.shape[0]

    @staticmethod
    def from_spec(spec: SystemSpec) -> "LinearGaussianModel":
        if spec.kind != "linear_gaussian":
            raise ValueError("spec is not linear_gaussian")
        return LinearGaussianModel(spec.params["A_d"], spec.params["Q_d"])


def stationary_covariance(lg: LinearGaussianModel, tol: float = 1e-13,
                          max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of Sigma = A Sigma A^T + Q (A must be stable)."""
    sig = np.array(lg.q_d)
    for _ in range(max_iter):
        nxt = lg.a_d @ sig @ lg.a_d.T + lg.q_d
        nxt = 0.5 * (nxt + nxt.T)
        if np.max(np.abs(nxt - sig)) < tol:
            return nxt
        sig = nxt
    raise RuntimeError("stationary covariance iteration did not converge")


@dataclass(frozen=True)
class KalmanResult:
    analysis_means: np.ndarray   # (t, d)
    analysis_covs: np.ndarray    # (t, d, d)
    forecast_means: np.ndarray
    forecast_covs: np.ndarray


def _kf_update(mean, cov, obs: ObservationSet):
    if obs.k == 0:
        return mean, cov
    idx = obs.indices
    r = np.diag(obs.sigma_o ** 2)
    ph_t = cov[:, idx]
    innov_cov = ph_t[idx, :] + r
    gain = np.linalg.solve(innov_cov, ph_t.T).T
    mean = mean + gain @ (obs.values - mean[idx])
    ikh = np.eye(cov.shape[0])
    ikh[:, idx] -= gain
    cov = ikh @ cov @ ikh.T + gain @ r @ gain.T   # Joseph form
    return mean, 0.5 * (cov + cov.T)


def kalman_filter(lg: LinearGaussianModel, obs_stream, x0_mean,
                  x0_cov) -> KalmanResult:
    """Exact filter over a stream of observation sets.

    obs_stream[0] updates the supplied prior directly; each later entry is
    preceded by one model propagation.  Empty observation sets are allowed
    and leave the forecast unchanged.
    """
    mean = np.asarray(x0_mean, dtype=np.float64).copy()
    cov = 0.5 * (np.asarray(x0_cov, dtype=np.float64)
                 + np.asarray(x0_cov, dtype=np.float64).T)
    f_means, f_covs, a_means, a_covs = [], [], [], []
    for t, obs in enumerate(obs_stream):
        if t > 0:
            mean = lg.a_d @ mean
            cov = lg.a_d @ cov @ lg.a_d.T + lg.q_d
            cov = 0.5 * (cov + cov.T)
        f_means.append(mean.copy())
        f_covs.append(cov.copy())
        mean, cov = _kf_update(mean, cov, obs)
        a_means.append(mean.copy())
        a_covs.append(cov.copy())
    return KalmanResult(np.array(a_means), np.array(a_covs),
                        np.array(f_means), np.array(f_covs))


def enkf_step(ens, obs: ObservationSet, inflation: float, seed: int):
    """Stochastic (perturbed-observation) ensemble Kalman analysis.

    Anomalies are inflated about the mean before the update; sample
    covariances use the unbiased estimator.  Accepts an Ensemble or an
    (m, d) array and returns the matching type.
    """
    if inflation <= 0:
        raise ValueError("inflation must be positive")
    wrap = isinstance(ens, Ensemble)
    x = ens.as_array() if wrap else np.array(ens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (m, d) ensemble with m >= 2")
    if inflation != 1.0:
        mean = x.mean(axis=0)
        x = mean + inflation * (x - mean)
    if obs.k:
        m = x.shape[0]
        idx = obs.indices
        g = generator(seed, "enkf")
        perturbed = obs.values + obs.sigma_o * g.standard_normal((m, obs.k))
        anoms = x - x.mean(axis=0)
        p_xy = anoms.T @ anoms[:, idx] / (m - 1)
        p_yy = p_xy[idx, :] + np.diag(obs.sigma_o ** 2)
        gain = np.linalg.solve(p_yy, p_xy.T).T
        x = x + (perturbed - x[:, idx]) @ gain.T
    if wrap:
        return Ensemble.from_array(x, ens.member_seeds)
    return x


def persistence_forecast(x0, lead_steps: int) -> np.ndarray:
    """(lead_steps, d) forecast that repeats the initial state."""
    if lead_steps < 1:
        raise ValueError("lead_steps must be >= 1")
    x = np.asarray(x0, dtype=np.float64)
    return np.tile(x, (lead_steps, 1))


def climatology_ensemble(clim: Climatology, n: int, seed: int,
                         mode: str = "gaussian",
                         data: Trajectory | None = None) -> Ensemble:
    """Flow-independent reference ensemble drawn from the climatology.

    gaussian mode samples independent coordinates at the climatological
    moments; resample mode draws whole states from a stored trajectory,
    preserving cross-coordinate structure.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    g = generator(seed, "clim-ens")
    if mode == "gaussian":
        draws = clim.mean + clim.std * g.standard_normal((n, clim.mean.size))
    elif mode == "resample":
        if data is None or len(data) == 0:
            raise ValueError("resample mode needs a data trajectory")
        draws = data.values[g.integers(0, len(data), size=n)]
    else:
        raise ValueError(f"unknown climatology ensemble mode {mode!r}")
    seeds = [int(g.integers(0, 2 ** 63)) for _ in range(n)]
    return Ensemble.from_array(draws, seeds)
