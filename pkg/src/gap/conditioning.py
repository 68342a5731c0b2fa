"""Sampling-time constraints: observations, guidance, SDEdit, calibration.

All conditioning happens inside the reverse chain in normalized coordinates.
Three modes:

  replace             hard-constrain observed coordinates at every visited
                      node by redrawing them from the forward marginal of
                      the observed values; exact at the final node.
  copaint             soft score augmentation with an approximate
                      likelihood gradient; observed coordinates are pulled,
                      never pinned.
  replace_plus_travel replacement plus periodic time-travel repair loops
                      (forward-noise a few nodes, re-denoise) that let the
                      unobserved coordinates re-equilibrate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ForecastModel, forecast_array
from .diffusion import (ALPHA_FLOOR, NoiseSchedule, SamplerConfig, ScoreModel,
                        member_streams, reverse_chain, sampler_nodes,
                        score_array, _stacked_normal)
from .rng import derive_seed, generator
from .state import (Climatology, Ensemble, StateVector, Trajectory,
                    denormalize_array, normalize_array)
from .verification import WeightVector, crps_field, power_spectrum


@dataclass(frozen=True)
class ObservationSet:
    """Point observations of a subset of coordinates, in system units."""

    indices: np.ndarray
    values: np.ndarray
    sigma_o: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "time_index", int(self.time_index))
        idx = np.asarray(self.indices, dtype=int).reshape(-1)
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        sig = np.asarray(self.sigma_o, dtype=np.float64)
        if sig.ndim == 0:
            sig = np.full(idx.shape, float(sig))
        sig = sig.reshape(-1)
        if not (idx.shape == vals.shape == sig.shape):
            raise ValueError("indices, values, sigma_o must align")
        if idx.size and np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        if np.any(sig < 0):
            raise ValueError("sigma_o must be non-negative")
        if not np.all(np.isfinite(vals)):
            raise ValueError("observation values must be finite")
        for arr in (idx, vals, sig):
            arr.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "sigma_o", sig)

    @property
    def k(self) -> int:
        return int(self.indices.size)

    @staticmethod
    def empty() -> "ObservationSet":
        z = np.array([], dtype=float)
        return ObservationSet(z.astype(int), z, z)


@dataclass(frozen=True)
class ObservationOperator:
    """Which coordinates get observed and how noisily."""

    indices: np.ndarray
    sigma_o: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int).reshape(-1)
        sig = np.asarray(self.sigma_o, dtype=np.float64)
        if sig.ndim == 0:
            sig = np.full(idx.shape, float(sig))
        if idx.size and np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        if np.any(sig < 0):
            raise ValueError("sigma_o must be non-negative")
        idx.setflags(write=False)
        sig.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "sigma_o", sig)


def apply_observation_noise(x_truth: StateVector, obs_spec: ObservationOperator,
                            seed: int) -> ObservationSet:
    """Observe the truth through the operator with additive Gaussian noise."""
    g = generator(seed, "obs-noise")
    vals = x_truth.values[obs_spec.indices] \
        + obs_spec.sigma_o * g.standard_normal(obs_spec.indices.shape)
    return ObservationSet(obs_spec.indices, vals, obs_spec.sigma_o)


@dataclass(frozen=True)
class GuidanceConfig:
    mode: str = "copaint"           # replace | copaint | replace_plus_travel
    guidance_lr: float = 1.0        # guidance strength multiplier
    sigma_tau_scale: float = 1.0    # inflates the denoiser-variance term
    travel_every: int = 10          # visited-node cadence of travel loops
    travel_tau: int = 10            # grid nodes re-noised per travel round
    travel_rounds: int = 2

    def __post_init__(self):
        if self.mode not in ("replace", "copaint", "replace_plus_travel"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.guidance_lr <= 0 or self.sigma_tau_scale <= 0:
            raise ValueError("guidance_lr and sigma_tau_scale must be positive")
        if self.travel_every < 1 or self.travel_tau < 1 or self.travel_rounds < 1:
            raise ValueError("travel knobs must be >= 1")


def _normalized_obs(obs: ObservationSet, clim: Climatology):
    idx = obs.indices
    o_n = (obs.values - clim.mean[idx]) / clim.std[idx]
    sig_n = obs.sigma_o / clim.std[idx]
    return idx, o_n, sig_n


def likelihood_gradient_array(x_tau: np.ndarray, tau_idx: int,
                              obs: ObservationSet, model: ScoreModel,
                              sched: NoiseSchedule,
                              cfg: GuidanceConfig) -> np.ndarray:
    """Gradient of the observation log-likelihood wrt the noised state.

    Normalized coordinates, (d,) or (m, d) input.  The analytic-Gaussian
    model uses its exact denoiser Jacobian and posterior covariance; the
    learned model falls back to a diagonal surrogate that treats the
    denoiser as (1/alpha) I on the observed coordinates.
    """
    x = np.atleast_2d(np.asarray(x_tau, dtype=np.float64))
    out = np.zeros_like(x)
    if obs.k == 0:
        return out.reshape(np.shape(x_tau))
    idx, o_n, sig_n = _normalized_obs(obs, model.clim)
    a = sched.alpha[tau_idx]
    s = sched.sigma[tau_idx]
    if model.kind == "analytic_gaussian":
        mu, _ = model.gaussian_params
        evals, evecs = model.gaussian_eig()
        gain = evals / (a * a * evals + s * s)       # eigvals of Sigma C^-1
        y = (x - a * mu) @ evecs
        denoised = mu + a * (y * gain) @ evecs.T     # exact E[x0 | x_tau]
        sig_c = (evecs * gain) @ evecs.T             # Sigma C^-1
        j_full = a * sig_c                           # denoiser Jacobian
        post = s * s * sig_c                         # Var[x0 | x_tau]
        innov_cov = np.diag(sig_n ** 2) + cfg.sigma_tau_scale * post[np.ix_(idx, idx)]
        innov = o_n - denoised[:, idx]
        weighted = np.linalg.solve(innov_cov, innov.T).T
        out = weighted @ j_full[idx, :]
    else:
        a_f = max(a, ALPHA_FLOOR)
        denoised = (x + s * s * score_array(x, tau_idx, model, sched)) / a_f
        denom = sig_n ** 2 + cfg.sigma_tau_scale * s * s
        out[:, idx] = (o_n - denoised[:, idx]) / denom / a_f
    return out.reshape(np.shape(x_tau))


def likelihood_gradient(x_tau: StateVector, tau_idx: int, obs: ObservationSet,
                        model: ScoreModel, sched: NoiseSchedule,
                        cfg: GuidanceConfig) -> StateVector:
    return StateVector(likelihood_gradient_array(
        x_tau.values, tau_idx, obs, model, sched, cfg))


def _replace_hook(obs: ObservationSet, model: ScoreModel, sched: NoiseSchedule,
                  gens):
    """Hook that redraws observed coordinates from their forward marginal."""
    idx, o_n, _ = _normalized_obs(obs, model.clim)

    def hook(x, node):
        if idx.size == 0:
            return x
        a, s = sched.alpha[node], sched.sigma[node]
        eps = _stacked_normal(gens, (idx.size,)) if s > 0 else 0.0
        x[:, idx] = a * o_n + s * eps
        return x

    return hook


def _travel_hook(obs, model, sched, cfg: GuidanceConfig,
                 sampler_cfg: SamplerConfig, gens, top_node: int):
    """Replacement plus periodic forward-noise / re-denoise repair loops."""
    replace = _replace_hook(obs, model, sched, gens)
    counter = {"n": 0}

    def hook(x, node):
        x = replace(x, node)
        counter["n"] += 1
        up = min(node + cfg.travel_tau, top_node)
        if node == 0 or up <= node or counter["n"] % cfg.travel_every != 0:
            return x
        ladder = np.arange(node, up + 1)
        a_ratio = sched.alpha[up] / sched.alpha[node]
        noise_std = np.sqrt(max(0.0, 1.0 - a_ratio ** 2))
        for _ in range(cfg.travel_rounds):
            x = a_ratio * x + noise_std * _stacked_normal(gens, x.shape[1:])
            x = reverse_chain(x, ladder, model, sched, sampler_cfg, gens,
                              node_hook=replace)
        return x

    return hook


def sample_conditioned(model: ScoreModel, sched: NoiseSchedule,
                       sampler_cfg: SamplerConfig, obs: ObservationSet,
                       g: GuidanceConfig, n: int, seed: int) -> Ensemble:
    """Draw n members from the prior constrained by one observation set."""
    if n < 1:
        raise ValueError("need n >= 1")
    seeds, gens = member_streams(seed, n)
    x = _stacked_normal(gens, (model.dim,))
    nodes = sampler_nodes(sched, sampler_cfg.n_steps)
    score_fn = None
    hook = None
    if g.mode == "copaint":
        def score_fn(xx, i):
            base = score_array(xx, i, model, sched)
            grad = likelihood_gradient_array(xx, i, obs, model, sched, g)
            return base + g.guidance_lr * grad
    elif g.mode == "replace":
        hook = _replace_hook(obs, model, sched, gens)
    else:
        hook = _travel_hook(obs, model, sched, g, sampler_cfg, gens,
                            top_node=int(nodes[-1]))
    x = reverse_chain(x, nodes, model, sched, sampler_cfg, gens,
                      score_fn=score_fn, node_hook=hook)
    return Ensemble.from_array(denormalize_array(x, model.clim), seeds)


@dataclass(frozen=True)
class SDEditConfig:
    tau_star_idx: int
    n_replicates: int = 1
    combine_obs: ObservationSet | None = None

    def __post_init__(self):
        if self.tau_star_idx < 0:
            raise ValueError("tau_star_idx must be >= 0")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")


def _as_member_array(x_pred, dim: int) -> np.ndarray:
    if isinstance(x_pred, Ensemble):
        return x_pred.as_array()
    if isinstance(x_pred, StateVector):
        return x_pred.values[None, :]
    arr = np.asarray(x_pred, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError("expected (m, d) member array")
    return arr


def sdedit(x_pred, model: ScoreModel, sched: NoiseSchedule,
           sampler_cfg: SamplerConfig, cfg: SDEditConfig, seed: int) -> Ensemble:
    """Partial forward noising to tau*, then reverse back to the data manifold.

    Each input member yields cfg.n_replicates output members with
    independent noise draws.  When combine_obs is set, observed coordinates
    are hard-replaced at every node of the reverse pass.
    """
    if cfg.tau_star_idx > sched.n_steps:
        raise ValueError("tau_star_idx beyond schedule")
    arr = _as_member_array(x_pred, model.dim)
    m = arr.shape[0]
    z = normalize_array(arr, model.clim)
    z = np.repeat(z, cfg.n_replicates, axis=0)
    seeds, gens = member_streams(seed, m * cfg.n_replicates, tag="sdedit")
    t = cfg.tau_star_idx
    if t == 0:
        out = z
        if cfg.combine_obs is not None and cfg.combine_obs.k:
            idx, o_n, _ = _normalized_obs(cfg.combine_obs, model.clim)
            out = out.copy()
            out[:, idx] = o_n
        return Ensemble.from_array(denormalize_array(out, model.clim), seeds)
    eps = _stacked_normal(gens, (model.dim,))
    x = sched.alpha[t] * z + sched.sigma[t] * eps
    nodes = sampler_nodes(sched, sampler_cfg.n_steps, top_idx=t)
    hook = None
    if cfg.combine_obs is not None and cfg.combine_obs.k:
        hook = _replace_hook(cfg.combine_obs, model, sched, gens)
    x = reverse_chain(x, nodes, model, sched, sampler_cfg, gens, node_hook=hook)
    return Ensemble.from_array(denormalize_array(x, model.clim), seeds)


@dataclass(frozen=True)
class CandidateScore:
    tau_idx: int
    crps: float
    mae: float
    spectrum_dist: float


@dataclass(frozen=True)
class CalibrationResult:
    best_tau_idx: int
    table: tuple

    def crps_curve(self) -> np.ndarray:
        return np.array([c.crps for c in self.table])


def calibrate_tau_star(model: ScoreModel, sched: NoiseSchedule,
                       forecaster: ForecastModel, val_data: Trajectory,
                       candidate_taus, n_ens: int, seed: int,
                       n_cases: int = 64) -> CalibrationResult:
    """Pick the noising depth that minimizes one-step ensemble CRPS.

    Builds one-step forecast cases from consecutive validation states,
    refines each forecast into an n_ens-member SDEdit ensemble per candidate
    depth, and scores CRPS (the selection metric), normalized MAE of the
    ensemble mean, and a log-spectrum RMSE against the verifying truth.
    """
    if len(val_data) < 51:
        raise ValueError("need at least 51 validation states")
    cands = sorted(int(t) for t in candidate_taus)
    if not cands:
        raise ValueError("no candidate depths")
    n_cases = min(n_cases, len(val_data) - 1)
    if n_cases < 50:
        raise ValueError("need at least 50 one-step cases")
    starts = np.unique(np.round(
        np.linspace(0, len(val_data) - 2, n_cases)).astype(int))
    w = WeightVector.uniform(model.dim)
    clim_std = model.clim.std
    preds, truths = [], []
    for t0 in starts:
        fc = forecast_array(val_data.values[t0], forecaster, 1,
                            rng_seed=derive_seed(seed, "calib-fc", int(t0)))
        preds.append(fc)
        truths.append(val_data.values[t0 + 1])
    rows = []
    for tau in cands:
        scores, maes, specs = [], [], []
        for case, (pred, truth) in enumerate(zip(preds, truths)):
            ens = sdedit(pred, model, sched,
                         SamplerConfig(method="ddim", n_steps=sched.n_steps),
                         SDEditConfig(tau_star_idx=tau, n_replicates=n_ens),
                         seed=derive_seed(seed, f"calib-{tau}", case))
            arr = ens.as_array()
            scores.append(crps_field(arr, truth, w))
            maes.append(float(np.mean(np.abs(arr.mean(axis=0) - truth) / clim_std)))
            s_ens = np.mean([power_spectrum(mrow, float(model.dim))[0]
                             for mrow in arr], axis=0)
            s_true, _ = power_spectrum(truth, float(model.dim))
            specs.append(float(np.sqrt(np.mean(
                (np.log10(s_ens + 1e-12) - np.log10(s_true + 1e-12)) ** 2))))
        rows.append(CandidateScore(tau, float(np.mean(scores)),
                                   float(np.mean(maes)), float(np.mean(specs))))
    best = rows[int(np.argmin([r.crps for r in rows]))].tau_idx
    return CalibrationResult(best, tuple(rows))


def forcing_constraint(theta_traj, t: int, sigma_o: float = 0.0) -> ObservationSet:
    """Constraint pinning the leading forcing coordinates at time index t.

    theta_traj is a (T, nf) array (or Trajectory) of prescribed forcing
    values; t must lie in [0, T).
    """
    arr = theta_traj.values if isinstance(theta_traj, Trajectory) \
        else np.atleast_2d(np.asarray(theta_traj, dtype=np.float64))
    t = int(t)
    if not 0 <= t < arr.shape[0]:
        raise ValueError(f"time index {t} outside forcing trajectory "
                         f"of length {arr.shape[0]}")
    row = arr[t]
    return ObservationSet(np.arange(row.size), row, sigma_o, time_index=t)


def anomaly_persistence(theta_t0, clim: Climatology, t0_phase: int,
                        horizon: int) -> np.ndarray:
    """Seasonal-analog forcing scenario: cycle plus persisted initial anomaly.

    Returns a (horizon, nf) forcing trajectory whose rows follow the
    climatological phase means for the leading len(theta_t0) coordinates
    with the time-zero anomaly carried forward unchanged.
    """
    theta0 = theta_t0.values if isinstance(theta_t0, StateVector) \
        else np.asarray(theta_t0, dtype=np.float64)
    if clim.per_phase_mean is None:
        raise ValueError("climatology carries no phase means")
    nf = theta0.shape[0]
    anom = theta0 - clim.phase_mean(t0_phase)[:nf]
    rows = np.stack([clim.phase_mean(t0_phase + k)[:nf] + anom
                     for k in range(1, horizon + 1)])
    return rows
