"""Sequential assimilation: cold start, cycling, and observation networks.

A cycle is cold start from the observation-conditioned climatological
prior, then for every model step: propagate all members, refine through
the diffusion prior with the current observations hard-replaced.  Steps
between analysis times carry empty observation sets, which makes a pure
forecast literally a cycle with nothing observed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conditioning import (GuidanceConfig, ObservationOperator, ObservationSet,
                           SDEditConfig, apply_observation_noise,
                           sample_conditioned)
from .diffusion import NoiseSchedule, SamplerConfig, ScoreModel
from .dynamics import ForecastModel
from .prediction import advance_step
from .rng import derive_seed, generator
from .state import Ensemble, StateVector, Trajectory
from .verification import WeightVector, rmse


@dataclass(frozen=True)
class AssimilationConfig:
    window_steps: int
    obs_every: int = 1
    ensemble_size: int = 32
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sdedit: SDEditConfig = field(default_factory=lambda: SDEditConfig(tau_star_idx=10))
    sampler: SamplerConfig = field(
        default_factory=lambda: SamplerConfig(method="ddim", n_steps=100))
    forecaster_id: str = ""
    resample_spread: float = 0.5

    def __post_init__(self):
        if self.window_steps < 1:
            raise ValueError("window_steps must be >= 1")
        if self.obs_every < 1:
            raise ValueError("obs_every must be >= 1")
        if self.ensemble_size < 2:
            raise ValueError("need >= 2 members for spread diagnostics")
        if self.sdedit.n_replicates != 1:
            raise ValueError("cycling uses one replicate per member")


@dataclass(frozen=True)
class CycleRecord:
    time_index: int
    prior_ensemble: Ensemble
    posterior_ensemble: Ensemble
    obs_used: ObservationSet
    diagnostics: dict

    def __post_init__(self):
        if len(self.prior_ensemble.members) != len(self.posterior_ensemble.members):
            raise ValueError("prior and posterior must share member count")


def cold_start(model: ScoreModel, sched: NoiseSchedule, obs0: ObservationSet,
               cfg: AssimilationConfig, seed: int) -> Ensemble:
    """Initial ensemble from the observation-conditioned climatological prior.

    An empty obs0 degrades to an unconditional climatological draw.
    """
    return sample_conditioned(model, sched, cfg.sampler, obs0, cfg.guidance,
                              cfg.ensemble_size, seed)


def _diag(post: np.ndarray, prior: np.ndarray, truth_row, w: WeightVector,
          n_resampled: int, obs_count: int) -> dict:
    out = {
        "spread": float(np.mean(post.std(axis=0))),
        "prior_spread": float(np.mean(prior.std(axis=0))),
        "n_resampled": float(n_resampled),
        "obs_count": float(obs_count),
    }
    if truth_row is not None:
        out["rmse"] = rmse(post.mean(axis=0), truth_row, w)
        out["prior_rmse"] = rmse(prior.mean(axis=0), truth_row, w)
    return out


def assimilation_cycle(truth: Trajectory, obs_stream, model: ScoreModel,
                       sched: NoiseSchedule, forecaster: ForecastModel,
                       cfg: AssimilationConfig, seed: int) -> list[CycleRecord]:
    """Run a full window of propagate-and-update steps.

    obs_stream holds one observation set per analysis time (every
    cfg.obs_every model steps, starting at step 0); steps in between see an
    empty set.  Diagnostics score the posterior ensemble mean against the
    truth trajectory when it covers the step.
    """
    need = cfg.window_steps // cfg.obs_every + 1
    if len(obs_stream) < need:
        raise ValueError(f"obs_stream needs {need} entries for this window")
    w = WeightVector.uniform(model.dim)
    empty = ObservationSet.empty()
    ens0 = cold_start(model, sched, obs_stream[0], cfg,
                      derive_seed(seed, "cold-start"))
    records = []
    arr0 = ens0.as_array()
    truth_row = truth.values[0] if len(truth) > 0 else None
    records.append(CycleRecord(0, ens0, ens0, obs_stream[0],
                               _diag(arr0, arr0, truth_row, w, 0,
                                     obs_stream[0].k)))
    x = arr0
    for t in range(1, cfg.window_steps + 1):
        analysis = t % cfg.obs_every == 0
        obs = obs_stream[t // cfg.obs_every] if analysis else empty
        x, background, n_bad = advance_step(
            x, forecaster, model, sched, cfg.sampler, cfg.sdedit.tau_star_idx,
            t - 1, seed, obs=obs, resample_spread=cfg.resample_spread)
        truth_row = truth.values[t] if len(truth) > t else None
        records.append(CycleRecord(
            t,
            Ensemble.from_array(background, ens0.member_seeds),
            Ensemble.from_array(x, ens0.member_seeds),
            obs,
            _diag(x, background, truth_row, w, n_bad, obs.k)))
    return records


def simulate_obs_network(truth: Trajectory, n_obs: int, sigma_o: float,
                         layout: str, obs_every: int, seed: int) -> list[ObservationSet]:
    """Synthetic observation stream drawn from a truth trajectory.

    layout random_fixed draws one index set reused at every analysis time;
    random_per_step redraws indices each time.  sigma_o = 0 gives perfect
    observations.
    """
    d = truth.dim
    if not 0 <= n_obs <= d:
        raise ValueError("n_obs must lie in [0, dim]")
    if layout not in ("random_fixed", "random_per_step"):
        raise ValueError(f"unknown layout {layout!r}")
    if obs_every < 1:
        raise ValueError("obs_every must be >= 1")
    times = range(0, len(truth), obs_every)
    g_idx = generator(seed, "obs-layout")
    fixed = np.sort(g_idx.choice(d, size=n_obs, replace=False)) if n_obs else \
        np.array([], dtype=int)
    stream = []
    for t in times:
        if layout == "random_per_step" and n_obs:
            idx = np.sort(g_idx.choice(d, size=n_obs, replace=False))
        else:
            idx = fixed
        op = ObservationOperator(idx, sigma_o)
        raw = apply_observation_noise(
            StateVector(truth.values[t]), op, derive_seed(seed, "obs-time", t))
        stream.append(ObservationSet(raw.indices, raw.values, raw.sigma_o,
                                     time_index=t))
    return stream


def ring_distance_to_obs(dim: int, obs_indices) -> np.ndarray:
    """Per-coordinate cyclic distance to the nearest observed coordinate."""
    idx = np.asarray(obs_indices, dtype=int)
    if idx.size == 0:
        raise ValueError("no observed coordinates")
    coords = np.arange(dim)[:, None]
    raw = np.abs(coords - idx[None, :])
    return np.min(np.minimum(raw, dim - raw), axis=1).astype(float)


@dataclass(frozen=True)
class BinStat:
    lo: float
    hi: float
    count: int
    mean_spread: float
    mean_abs_error: float


def distance_binned_error(record: CycleRecord, obs: ObservationSet, bins,
                          truth) -> tuple:
    """Ensemble spread and mean absolute error binned by distance to data.

    bins are ascending edges on the ring distance from each coordinate to
    its nearest observed coordinate; empty bins are omitted from the
    result.  truth supplies the verifying state at the record's time.
    """
    edges = np.asarray(bins, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bins must be ascending edges")
    t = truth.values if isinstance(truth, StateVector) else \
        np.asarray(truth, dtype=np.float64)
    post = record.posterior_ensemble.as_array()
    dist = ring_distance_to_obs(post.shape[1], obs.indices)
    spread = post.std(axis=0)
    abs_err = np.abs(post.mean(axis=0) - t)
    out = []
    for k in range(edges.size - 1):
        sel = (dist >= edges[k]) & (dist < edges[k + 1])
        if not sel.any():
            continue
        out.append(BinStat(float(edges[k]), float(edges[k + 1]),
                           int(sel.sum()), float(spread[sel].mean()),
                           float(abs_err[sel].mean())))
    return tuple(out)
