"""Generative assimilation and prediction on surrogate dynamical systems.

A variance-preserving diffusion model learns the climatology of a small
dynamical system; observational, predictive, and forcing constraints are
applied at sampling time to produce analyses, ensemble forecasts,
seasonal-analog runs, and stable long climate simulations.
"""

__version__ = "0.1.0"

from .state import (StateVector, Trajectory, Ensemble, Climatology,
                    fit_climatology, identity_climatology, normalize,
                    denormalize, anomaly)
from .dynamics import (SystemSpec, DivergenceError, lorenz63_spec,
                       lorenz96_spec, linear_gaussian_spec,
                       lorenz96_forced_spec, forcing_cycle, step_truth,
                       generate_dataset, ForecastModel, perfect_model,
                       imperfect_model, forecast, train_forecaster)
from .diffusion import (NoiseSchedule, build_schedule, perturb_forward,
                        ScoreModel, analytic_gaussian_model, score,
                        train_score, SamplerConfig, sample, denoise_one_step)
from .conditioning import (ObservationSet, ObservationOperator,
                           apply_observation_noise, GuidanceConfig,
                           likelihood_gradient, sample_conditioned,
                           SDEditConfig, sdedit, calibrate_tau_star,
                           forcing_constraint, anomaly_persistence)
from .assimilation import (AssimilationConfig, CycleRecord, cold_start,
                           assimilation_cycle, simulate_obs_network,
                           distance_binned_error)
from .prediction import (ForecastRun, ClimateRunStats, advance_step,
                         ensemble_forecast, seasonal_run, climate_run)
from .baselines import (LinearGaussianModel, kalman_filter, enkf_step,
                        stationary_covariance, persistence_forecast,
                        climatology_ensemble)
from .verification import (WeightVector, rmse, acc, relative_improvement,
                           crps, crps_field, crpss, spread_skill_ratio,
                           ks_two_sample, power_spectrum, eof,
                           standardized_index)
