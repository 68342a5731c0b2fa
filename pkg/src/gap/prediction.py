"""Prediction-phase machinery: ensemble forecasts, seasonal analogs, climate runs.

Every roll-out advances through the same advance_step: one forecaster step
per member, divergent members resampled from the survivors, then an SDEdit
refinement that can pin prescribed forcing coordinates.  The assimilation
cycle drives the identical code path with observations added, so a forecast
is an assimilation run with nothing observed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import (ObservationSet, SDEditConfig, forcing_constraint,
                           sdedit)
from .diffusion import NoiseSchedule, SamplerConfig, ScoreModel
from .dynamics import DivergenceError, ForecastModel, forecast_array
from .rng import derive_seed, generator
from .state import Ensemble, StateVector, Trajectory

EXCURSION_Z = 5.0
EXCURSION_LOG_CAP = 1000


def advance_step(x: np.ndarray, forecaster: ForecastModel, model: ScoreModel,
                 sched: NoiseSchedule, sampler_cfg: SamplerConfig,
                 tau_idx: int, step_index: int, seed: int,
                 obs: ObservationSet | None = None,
                 resample_spread: float = 0.5):
    """One forecaster step plus SDEdit refinement for an (m, d) member batch.

    Members whose propagation diverges are redrawn around the surviving
    members before refinement.  Returns (refined, background, n_resampled)
    where background is the batch after propagation but before refinement.
    All randomness is derived from (seed, step_index), so any caller feeding
    the same batch and seed gets bit-identical output.
    """
    seed_t = derive_seed(seed, "advance", step_index)
    m = x.shape[0]
    out = np.empty_like(x)
    bad = np.zeros(m, dtype=bool)
    for i in range(m):
        try:
            out[i] = forecast_array(x[i], forecaster, 1,
                                    rng_seed=derive_seed(seed_t, "prop", i),
                                    step_index=step_index)
        except DivergenceError:
            bad[i] = True
    n_bad = int(bad.sum())
    if n_bad:
        good = ~bad
        if not good.any():
            raise DivergenceError("all members diverged", step=step_index)
        mean = out[good].mean(axis=0)
        std = out[good].std(axis=0)
        g = generator(seed_t, "resample")
        out[bad] = mean + resample_spread * std * g.standard_normal((n_bad, x.shape[1]))
    background = out.copy()
    ens = sdedit(out, model, sched, sampler_cfg,
                 SDEditConfig(tau_idx, n_replicates=1, combine_obs=obs),
                 seed=derive_seed(seed_t, "refine"))
    out = ens.as_array()
    if not np.all(np.isfinite(out)):
        raise DivergenceError("refinement produced non-finite members",
                              step=step_index, state=out)
    return out, background, n_bad


@dataclass(frozen=True)
class ForecastRun:
    init_ensemble: Ensemble
    lead_steps: int
    per_lead_ensembles: tuple
    config: tuple = ()

    def __post_init__(self):
        if len(self.per_lead_ensembles) != self.lead_steps:
            raise ValueError("need one ensemble per lead")

    def lead(self, k: int) -> Ensemble:
        """Ensemble at lead k (1-based)."""
        if not 1 <= k <= self.lead_steps:
            raise ValueError("lead out of range")
        return self.per_lead_ensembles[k - 1]

    def mean_trajectory(self) -> np.ndarray:
        return np.stack([e.as_array().mean(axis=0)
                         for e in self.per_lead_ensembles])


def _forcing_obs(forcing, k: int) -> ObservationSet | None:
    if forcing is None:
        return None
    n = len(forcing.values) if isinstance(forcing, Trajectory) \
        else np.atleast_2d(np.asarray(forcing)).shape[0]
    return forcing_constraint(forcing, k % n)   # periodic extension


def ensemble_forecast(init: Ensemble, model: ScoreModel, sched: NoiseSchedule,
                      forecaster: ForecastModel, sdedit_cfg: SDEditConfig,
                      lead_steps: int, forcing=None, seed: int = 0,
                      sampler_cfg: SamplerConfig | None = None,
                      step_offset: int = 0) -> ForecastRun:
    """Roll an analysis ensemble forward, refining each step through the prior.

    When a forcing trajectory is given, its coordinates are pinned during
    every refinement (row k - 1 at lead k, extended periodically).
    """
    if lead_steps < 1:
        raise ValueError("lead_steps must be >= 1")
    if sdedit_cfg.n_replicates != 1:
        raise ValueError("stepping uses one replicate per member")
    if sampler_cfg is None:
        sampler_cfg = SamplerConfig(method="ddim", n_steps=sched.n_steps)
    x = init.as_array()
    leads = []
    for k in range(1, lead_steps + 1):
        obs = _forcing_obs(forcing, k - 1)
        x, _, _ = advance_step(x, forecaster, model, sched, sampler_cfg,
                               sdedit_cfg.tau_star_idx, step_offset + k - 1,
                               seed, obs=obs)
        leads.append(Ensemble.from_array(x, init.member_seeds))
    return ForecastRun(init, lead_steps, tuple(leads),
                       config=(sdedit_cfg, sampler_cfg, forcing is not None))


def seasonal_run(init: Ensemble, forcing_pred, model: ScoreModel,
                 sched: NoiseSchedule, forecaster: ForecastModel,
                 sdedit_cfg: SDEditConfig, lead_steps: int, seed: int = 0,
                 sampler_cfg: SamplerConfig | None = None,
                 step_offset: int = 0) -> ForecastRun:
    """Forecast with forcing coordinates pinned to a persisted-anomaly scenario."""
    arr = forcing_pred.values if isinstance(forcing_pred, Trajectory) \
        else np.atleast_2d(np.asarray(forcing_pred, dtype=np.float64))
    if arr.shape[0] < lead_steps:
        raise ValueError("forcing horizon shorter than lead_steps")
    return ensemble_forecast(init, model, sched, forecaster, sdedit_cfg,
                             lead_steps, forcing=arr, seed=seed,
                             sampler_cfg=sampler_cfg, step_offset=step_offset)


@dataclass(frozen=True)
class ClimateRunStats:
    n_steps: int
    count: int
    running_mean: np.ndarray
    running_var: np.ndarray
    excursion_log: tuple           # first (step, max |z|) events
    excursion_count: int
    seasonal_composite: np.ndarray | None = None
    thinned: Trajectory | None = None

    def global_mean(self) -> float:
        return float(np.mean(self.running_mean))


def climate_run(init: StateVector, model: ScoreModel, sched: NoiseSchedule,
                forecaster: ForecastModel, sdedit_cfg: SDEditConfig,
                n_steps: int, forcing=None, seed: int = 0,
                sampler_cfg: SamplerConfig | None = None,
                thin_every: int | None = None,
                cycle_len: int | None = None) -> ClimateRunStats:
    """Long single-member roll-out with streaming statistics.

    Accumulates per-coordinate running mean and variance (Welford), logs
    |z| > 5 excursions against the model climatology, and optionally keeps
    every thin_every-th state.  Memory stays O(1) in n_steps unless
    thinning is requested.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    d = init.dim
    if sampler_cfg is None:
        sampler_cfg = SamplerConfig(method="ddim", n_steps=sched.n_steps)
    clim = model.clim
    x = init.values[None, :].copy()
    count = 0
    mean = np.zeros(d)
    m2 = np.zeros(d)
    phase_sum = np.zeros((cycle_len, d)) if cycle_len else None
    phase_count = np.zeros(cycle_len, dtype=int) if cycle_len else None
    excursions = []
    n_exc = 0
    kept, kept_t0 = [], 0.0
    dt = forecaster.spec.dt if forecaster.spec is not None else 1.0
    for t in range(1, n_steps + 1):
        obs = _forcing_obs(forcing, t - 1)
        x, _, _ = advance_step(x, forecaster, model, sched, sampler_cfg,
                               sdedit_cfg.tau_star_idx, t - 1, seed, obs=obs)
        row = x[0]
        count += 1
        delta = row - mean
        mean += delta / count
        m2 += delta * (row - mean)
        z = np.max(np.abs((row - clim.mean) / clim.std))
        if z > EXCURSION_Z:
            n_exc += 1
            if len(excursions) < EXCURSION_LOG_CAP:
                excursions.append((t, float(z)))
        if cycle_len:
            ph = t % cycle_len
            phase_sum[ph] += row
            phase_count[ph] += 1
        if thin_every and t % thin_every == 0:
            if not kept:
                kept_t0 = t * dt
            kept.append(row.copy())
    var = m2 / count if count else np.zeros(d)
    composite = None
    if cycle_len and count:
        safe = np.maximum(phase_count, 1)[:, None]
        composite = phase_sum / safe
    thinned = None
    if thin_every and kept:
        thinned = Trajectory(np.stack(kept), dt=dt * thin_every, t0=kept_t0)
    return ClimateRunStats(n_steps, count, mean, var, tuple(excursions),
                           n_exc, composite, thinned)
