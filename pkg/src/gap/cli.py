"""Command-line surface: one subcommand per pipeline stage.

Every command loads the config tree, runs exactly one module pipeline,
writes its artifacts plus a run manifest into the output directory, and
maps failures to exit codes: 0 ok, 1 usage or config, 2 numerical
failure, 3 I/O.  Re-running any command with the same config and seed
reproduces byte-identical tensors.
"""
from __future__ import annotations

import os
import sys
import time

import click
import numpy as np

from . import __version__
from .assimilation import (AssimilationConfig, assimilation_cycle,
                           simulate_obs_network)
from .baselines import (LinearGaussianModel, climatology_ensemble, enkf_step,
                        kalman_filter, persistence_forecast,
                        stationary_covariance)
from .conditioning import (GuidanceConfig, SDEditConfig, anomaly_persistence,
                           calibrate_tau_star, sdedit)
from .config import (ConfigError, config_hash, load_config,
                     system_spec_from_config)
from .diffusion import (SamplerConfig, analytic_gaussian_model, build_schedule,
                        train_score)
from .dynamics import (DivergenceError, ForecastModel, generate_dataset,
                       imperfect_model, perfect_model, step_array,
                       train_forecaster)
from .prediction import climate_run, ensemble_forecast, seasonal_run
from .rng import derive_seed, generator
from .state import (Climatology, Ensemble, StateVector, Trajectory,
                    fit_climatology)
from .tensorio import (DigestMismatchError, TensorFormatError,
                       climatology_from_dict, climatology_to_dict,
                       file_digest, forecast_model_from_dict,
                       forecast_model_to_dict, read_json, read_tensor_checked,
                       schedule_from_dict, schedule_to_dict,
                       score_model_from_dict, score_model_to_dict,
                       write_json, write_metrics_csv, write_tensor)
from .verification import WeightVector, acc, crps_field, rmse, spread_skill_ratio


class _Run:
    """Mutable bookkeeping for one command invocation."""

    def __init__(self, cfg, seed, out_dir, quiet):
        self.cfg = cfg
        self.seed = seed
        self.out = out_dir
        self.quiet = quiet
        self.inputs = {}
        self.outputs = {}
        self.steps = {}
        self.summary = {}
        self.t0 = time.monotonic()

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def say(self, msg: str) -> None:
        if not self.quiet:
            click.echo(msg)

    def save_tensor(self, name: str, array, role: str) -> None:
        digest = write_tensor(self.path(name), array, name=name, role=role)
        self.outputs[name] = digest

    def save_json(self, name: str, obj) -> None:
        write_json(self.path(name), obj)
        self.outputs[name] = file_digest(self.path(name))

    def save_metrics(self, name: str, rows) -> None:
        write_metrics_csv(self.path(name), rows)
        self.outputs[name] = file_digest(self.path(name))

    def load_tensor(self, name: str) -> np.ndarray:
        arr, digest = read_tensor_checked(self.path(name))
        self.inputs[name] = digest
        return arr

    def load_json(self, name: str):
        obj = read_json(self.path(name))
        self.inputs[name] = file_digest(self.path(name))
        return obj

    def finish(self, command: str) -> None:
        manifest = {
            "command": command,
            "tool_version": __version__,
            "config": self.cfg,
            "config_hash": config_hash(self.cfg),
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "steps": self.steps,
            "summary": self.summary,
            "wall_clock_s": round(time.monotonic() - self.t0, 3),
        }
        write_json(self.path("manifest.json"), manifest)


def _apply_threads(threads):
    n = threads
    if n is None:
        env = os.environ.get("GAP_THREADS")
        if env is not None:
            try:
                n = int(env)
            except ValueError:
                raise ConfigError(f"GAP_THREADS must be an integer, got {env!r}")
    if n is not None:
        if n < 1:
            raise ConfigError("threads must be >= 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)
    return n


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="YAML experiment config; defaults apply when omitted.")
@click.option("--seed", type=int, default=None, help="Master seed override.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory override.")
@click.option("--threads", type=int, default=None,
              help="BLAS thread cap (GAP_THREADS env is the fallback).")
@click.option("--quiet", is_flag=True, help="Suppress progress output.")
@click.pass_context
def cli(ctx, config_path, seed, out_dir, threads, quiet):
    """Generative assimilation and prediction on surrogate dynamical systems."""
    cfg = load_config(config_path)
    thread_count = _apply_threads(threads)
    if seed is not None:
        cfg["seed"] = seed
    if out_dir is not None:
        cfg["output_dir"] = out_dir
    os.makedirs(cfg["output_dir"], exist_ok=True)
    run = _Run(cfg, cfg["seed"], cfg["output_dir"], quiet)
    if thread_count is not None:
        run.steps["threads"] = thread_count
    ctx.obj = run


def _schedule_from_cfg(cfg):
    d = cfg["diffusion"]
    return build_schedule(d["beta_min"], d["beta_max"], d["n_steps"])


def _sampler_from_cfg(cfg) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(method=s["method"], n_steps=s["n_steps"],
                         eta=s["eta"], churn=s["churn"])


def _guidance_from_cfg(cfg) -> GuidanceConfig:
    c = cfg["conditioning"]
    return GuidanceConfig(mode=c["mode"], guidance_lr=c["guidance_lr"],
                          sigma_tau_scale=c["sigma_tau_scale"],
                          travel_every=c["travel_every"],
                          travel_tau=c["travel_tau"],
                          travel_rounds=c["travel_rounds"])


def _load_dataset(run: _Run) -> tuple[Trajectory, Climatology]:
    values = run.load_tensor("dataset.gapt")
    spec = system_spec_from_config(run.cfg)
    thin = run.cfg["data"]["thin"]
    clim = climatology_from_dict(run.load_json("climatology.json"))
    return Trajectory(values, dt=spec.dt * thin), clim


def _load_score(run: _Run):
    blob = run.load_json("score_model.json")
    return score_model_from_dict(blob["model"]), schedule_from_dict(blob["schedule"])


def _load_forecaster(run: _Run) -> ForecastModel:
    return forecast_model_from_dict(run.load_json("forecaster.json"))


def _init_ensemble(run: _Run, truth: Trajectory, model, sched, t0: int,
                   n_members: int) -> Ensemble:
    tau = run.cfg["conditioning"]["tau_star_idx"]
    return sdedit(StateVector(truth.values[t0]), model, sched,
                  _sampler_from_cfg(run.cfg),
                  SDEditConfig(tau_star_idx=tau, n_replicates=n_members),
                  seed=derive_seed(run.seed, "forecast-init"))


@cli.command("generate-data")
@click.pass_obj
def cmd_generate_data(run: _Run):
    """Integrate the truth system and fit its climatology."""
    spec = system_spec_from_config(run.cfg)
    d = run.cfg["data"]
    data = generate_dataset(spec, d["n_spinup"], d["n_samples"], d["thin"],
                            run.seed)
    cycle = d["cycle_len"] or None
    if cycle and (d["thin"] != 1 or d["n_spinup"] % cycle != 0):
        raise ConfigError("phase-resolved climatology needs thin=1 and "
                          "n_spinup divisible by cycle_len")
    clim = fit_climatology(data, cycle_len=cycle)
    run.save_tensor("dataset.gapt", data.values, role="truth-trajectory")
    run.save_json("climatology.json", climatology_to_dict(clim))
    run.steps["model_steps"] = d["n_spinup"] + d["n_samples"] * d["thin"]
    run.summary["mean_norm"] = float(np.linalg.norm(clim.mean))
    run.summary["std_norm"] = float(np.linalg.norm(clim.std))
    run.say(f"dataset: {data.values.shape} states written")
    run.finish("generate-data")


@cli.command("train-score")
@click.pass_obj
def cmd_train_score(run: _Run):
    """Fit the climatological diffusion prior (learned or analytic)."""
    data, clim = _load_dataset(run)
    sched = _schedule_from_cfg(run.cfg)
    diff = run.cfg["diffusion"]
    if diff["analytic"]:
        spec = system_spec_from_config(run.cfg)
        if spec.kind != "linear_gaussian":
            raise ConfigError("analytic score requires the linear_gaussian system")
        cov = stationary_covariance(LinearGaussianModel.from_spec(spec))
        model = analytic_gaussian_model(np.zeros(spec.dim), cov, clim)
        run.summary["score"] = "analytic_gaussian"
    else:
        model = train_score(data, clim, sched, diff["hidden_sizes"],
                            diff["epochs"], diff["lr"], diff["batch"],
                            run.seed)
        run.summary["score"] = "mlp"
        run.summary["final_loss"] = model.weights.loss_curve[-1]
        run.steps["epochs"] = diff["epochs"]
    run.save_json("score_model.json", {"model": score_model_to_dict(model),
                                       "schedule": schedule_to_dict(sched)})
    run.say(f"score model ({run.summary['score']}) written")
    run.finish("train-score")


@cli.command("train-forecaster")
@click.pass_obj
def cmd_train_forecaster(run: _Run):
    """Build the one-step forecaster (physics-based or learned)."""
    fc_cfg = run.cfg["forecaster"]
    kind = fc_cfg["kind"]
    if kind == "perfect":
        model = perfect_model(system_spec_from_config(run.cfg))
    elif kind == "imperfect_physics":
        model = imperfect_model(system_spec_from_config(run.cfg),
                                forcing_delta=fc_cfg["forcing_delta"],
                                halve_substeps=fc_cfg["halve_substeps"])
    elif kind == "learned_mlp":
        data, _ = _load_dataset(run)
        model = train_forecaster(data, fc_cfg["hidden_sizes"],
                                 fc_cfg["epochs"], fc_cfg["lr"], run.seed,
                                 batch_size=fc_cfg["batch"])
        run.summary["final_loss"] = model.weights.loss_curve[-1]
        run.steps["epochs"] = fc_cfg["epochs"]
    else:
        raise ConfigError(f"unknown forecaster kind {kind!r}")
    run.save_json("forecaster.json", forecast_model_to_dict(model))
    run.say(f"forecaster ({kind}) written")
    run.finish("train-forecaster")


@cli.command("assimilate")
@click.pass_obj
def cmd_assimilate(run: _Run):
    """Cycle the generative filter against the stored truth."""
    truth, _ = _load_dataset(run)
    model, sched = _load_score(run)
    forecaster = _load_forecaster(run)
    a = run.cfg["assimilation"]
    if run.cfg["data"]["thin"] != 1:
        raise ConfigError("assimilation needs thin=1 so steps align with truth")
    window = a["window_steps"]
    if len(truth) < window + 1:
        raise ConfigError("dataset shorter than the assimilation window")
    obs_stream = simulate_obs_network(truth, a["n_obs"], a["sigma_o"],
                                      a["layout"], a["obs_every"], run.seed)
    acfg = AssimilationConfig(
        window_steps=window, obs_every=a["obs_every"],
        ensemble_size=a["ensemble_size"], guidance=_guidance_from_cfg(run.cfg),
        sdedit=SDEditConfig(run.cfg["conditioning"]["tau_star_idx"]),
        sampler=_sampler_from_cfg(run.cfg), forecaster_id=forecaster.kind)
    records = assimilation_cycle(truth, obs_stream, model, sched, forecaster,
                                 acfg, run.seed)
    means = np.stack([r.posterior_ensemble.as_array().mean(axis=0)
                      for r in records])
    spreads = np.array([r.diagnostics["spread"] for r in records])
    run.save_tensor("analysis_mean.gapt", means, role="analysis-mean")
    run.save_tensor("analysis_spread.gapt", spreads, role="analysis-spread")
    rows = []
    m = acfg.ensemble_size
    for r in records:
        for key in ("rmse", "prior_rmse", "spread", "n_resampled"):
            if key in r.diagnostics:
                rows.append((f"analysis_{key}" if key == "rmse" else key,
                             r.time_index, r.diagnostics[key], m, run.seed))
    run.save_metrics("assimilation_metrics.csv", rows)
    run.steps["cycles"] = window
    run.summary["final_rmse"] = records[-1].diagnostics.get("rmse")
    run.say(f"assimilated {window} steps, final rmse "
            f"{run.summary['final_rmse']:.4f}")
    run.finish("assimilate")


@cli.command("forecast")
@click.pass_obj
def cmd_forecast(run: _Run):
    """Ensemble forecast from the end of the stored truth window."""
    truth, _ = _load_dataset(run)
    model, sched = _load_score(run)
    forecaster = _load_forecaster(run)
    p = run.cfg["prediction"]
    lead, m = p["lead_steps"], p["n_members"]
    if run.cfg["data"]["thin"] != 1:
        raise ConfigError("forecasting needs thin=1 so leads align with truth")
    t0 = len(truth) - 1 - lead
    if t0 < 0:
        raise ConfigError("dataset too short for the requested lead_steps")
    init = _init_ensemble(run, truth, model, sched, t0, m)
    offset = run.cfg["data"]["n_spinup"] + t0
    fc = ensemble_forecast(init, model, sched, forecaster,
                           SDEditConfig(run.cfg["conditioning"]["tau_star_idx"]),
                           lead, forcing=None, seed=run.seed,
                           sampler_cfg=_sampler_from_cfg(run.cfg),
                           step_offset=offset)
    ens = np.stack([e.as_array() for e in fc.per_lead_ensembles])
    run.save_tensor("forecast_ensembles.gapt", ens, role="forecast-ensembles")
    run.save_tensor("forecast_mean.gapt", fc.mean_trajectory(),
                    role="forecast-mean")
    run.save_tensor("truth_window.gapt", truth.values[t0 + 1:t0 + 1 + lead],
                    role="verifying-truth")
    run.steps["lead_steps"] = lead
    run.say(f"forecast: {lead} leads x {m} members from t0={t0}")
    run.finish("forecast")


@cli.command("seasonal")
@click.pass_obj
def cmd_seasonal(run: _Run):
    """Forecast with the initial forcing anomaly persisted along the cycle."""
    truth, clim = _load_dataset(run)
    model, sched = _load_score(run)
    forecaster = _load_forecaster(run)
    spec = system_spec_from_config(run.cfg)
    if spec.kind != "lorenz96_forced":
        raise ConfigError("seasonal runs need the lorenz96_forced system")
    if clim.per_phase_mean is None:
        raise ConfigError("seasonal runs need a phase-resolved climatology "
                          "(set data.cycle_len)")
    p = run.cfg["prediction"]
    lead, m = p["lead_steps"], p["n_members"]
    t0 = len(truth) - 1 - lead
    if t0 < 0:
        raise ConfigError("dataset too short for the requested lead_steps")
    nf = spec.params["n_forcing"]
    offset = run.cfg["data"]["n_spinup"] + t0
    phase = offset % clim.cycle_len
    forcing_pred = anomaly_persistence(truth.values[t0][:nf], clim, phase, lead)
    init = _init_ensemble(run, truth, model, sched, t0, m)
    fc = seasonal_run(init, forcing_pred, model, sched, forecaster,
                      SDEditConfig(run.cfg["conditioning"]["tau_star_idx"]),
                      lead, seed=run.seed,
                      sampler_cfg=_sampler_from_cfg(run.cfg),
                      step_offset=offset)
    ens = np.stack([e.as_array() for e in fc.per_lead_ensembles])
    run.save_tensor("forecast_ensembles.gapt", ens, role="seasonal-ensembles")
    run.save_tensor("forecast_mean.gapt", fc.mean_trajectory(),
                    role="seasonal-mean")
    run.save_tensor("truth_window.gapt", truth.values[t0 + 1:t0 + 1 + lead],
                    role="verifying-truth")
    run.save_tensor("forcing_pred.gapt", forcing_pred, role="forcing-scenario")
    run.steps["lead_steps"] = lead
    run.say(f"seasonal: {lead} leads x {m} members, phase {phase}")
    run.finish("seasonal")


@cli.command("climate-run")
@click.pass_obj
def cmd_climate_run(run: _Run):
    """Long free (or forced) roll-out with streaming stability statistics."""
    truth, _ = _load_dataset(run)
    model, sched = _load_score(run)
    forecaster = _load_forecaster(run)
    c = run.cfg["climate"]
    stats = climate_run(StateVector(truth.values[-1]), model, sched,
                        forecaster,
                        SDEditConfig(run.cfg["conditioning"]["tau_star_idx"]),
                        c["n_steps"], forcing=None, seed=run.seed,
                        sampler_cfg=_sampler_from_cfg(run.cfg),
                        thin_every=c["thin_every"] or None,
                        cycle_len=c["cycle_len"] or None)
    run.save_tensor("climate_running_mean.gapt", stats.running_mean,
                    role="climate-mean")
    run.save_tensor("climate_running_var.gapt", stats.running_var,
                    role="climate-var")
    if stats.seasonal_composite is not None:
        run.save_tensor("climate_composite.gapt", stats.seasonal_composite,
                        role="climate-phase-composite")
    if stats.thinned is not None:
        run.save_tensor("climate_thinned.gapt", stats.thinned.values,
                        role="climate-thinned-trajectory")
    rows = [("global_mean", 0, float(np.mean(stats.running_mean)), 1, run.seed),
            ("global_var", 0, float(np.mean(stats.running_var)), 1, run.seed),
            ("excursion_count", 0, float(stats.excursion_count), 1, run.seed)]
    run.save_metrics("climate_metrics.csv", rows)
    run.steps["model_steps"] = stats.n_steps
    run.summary["excursion_count"] = stats.excursion_count
    run.say(f"climate run: {stats.n_steps} steps, "
            f"{stats.excursion_count} excursions")
    run.finish("climate-run")


@cli.command("calibrate-tau")
@click.pass_obj
def cmd_calibrate_tau(run: _Run):
    """Sweep noising depths and pick the one minimizing one-step CRPS."""
    truth, clim = _load_dataset(run)
    model, sched = _load_score(run)
    forecaster = _load_forecaster(run)
    cal = run.cfg["calibration"]
    if cal["bias"]:
        forecaster = ForecastModel(forecaster.kind, forecaster.spec,
                                   weights=forecaster.weights,
                                   bias_injection=cal["bias"] * clim.std)
    result = calibrate_tau_star(model, sched, forecaster, truth,
                                cal["candidates"], cal["n_ens"], run.seed)
    rows = []
    for row in result.table:
        rows.append(("crps", row.tau_idx, row.crps, cal["n_ens"], run.seed))
        rows.append(("mae", row.tau_idx, row.mae, cal["n_ens"], run.seed))
        rows.append(("spectrum_dist", row.tau_idx, row.spectrum_dist,
                     cal["n_ens"], run.seed))
    run.save_metrics("calibration_metrics.csv", rows)
    run.summary["best_tau_idx"] = result.best_tau_idx
    run.steps["candidates"] = len(result.table)
    run.say(f"calibrated tau* index: {result.best_tau_idx}")
    run.finish("calibrate-tau")


@cli.command("evaluate")
@click.pass_obj
def cmd_evaluate(run: _Run):
    """Score stored forecast ensembles against their verifying truth."""
    _, clim = _load_dataset(run)
    ens = run.load_tensor("forecast_ensembles.gapt")
    truth = run.load_tensor("truth_window.gapt")
    if ens.ndim != 3 or ens.shape[0] != truth.shape[0]:
        raise ConfigError("forecast and truth artifacts do not align")
    lead_count, m, d = ens.shape
    w = WeightVector.uniform(d)
    clim_ens = climatology_ensemble(clim, m, derive_seed(run.seed, "clim-ref"))
    clim_arr = clim_ens.as_array()
    rows = []
    for k in range(lead_count):
        mean_k = ens[k].mean(axis=0)
        rows.append(("rmse", k + 1, rmse(mean_k, truth[k], w), m, run.seed))
        rows.append(("acc", k + 1,
                     acc(mean_k - clim.mean, truth[k] - clim.mean, w), m,
                     run.seed))
        rows.append(("crps", k + 1, crps_field(ens[k], truth[k], w), m,
                     run.seed))
        rows.append(("crps_clim", k + 1, crps_field(clim_arr, truth[k], w), m,
                     run.seed))
    if m >= 2:
        rows.append(("ssr", 0, spread_skill_ratio(ens, truth, w), m, run.seed))
    run.save_metrics("evaluation_metrics.csv", rows)
    run.summary["leads"] = lead_count
    run.say(f"evaluated {lead_count} leads")
    run.finish("evaluate")


@cli.command("baseline")
@click.pass_obj
def cmd_baseline(run: _Run):
    """Run the configured reference method over the assimilation window."""
    truth, clim = _load_dataset(run)
    a = run.cfg["assimilation"]
    method = run.cfg["baseline"]["method"]
    w = WeightVector.uniform(truth.dim)
    window = min(a["window_steps"], len(truth) - 1)
    obs_stream = simulate_obs_network(truth, a["n_obs"], a["sigma_o"],
                                      a["layout"], a["obs_every"], run.seed)
    rows = []
    if method == "kalman":
        spec = system_spec_from_config(run.cfg)
        if spec.kind != "linear_gaussian":
            raise ConfigError("kalman baseline requires linear_gaussian")
        lg = LinearGaussianModel.from_spec(spec)
        sigma = stationary_covariance(lg)
        res = kalman_filter(lg, obs_stream[:window // a["obs_every"] + 1],
                            np.zeros(truth.dim), sigma)
        for i, mean in enumerate(res.analysis_means):
            t = i * a["obs_every"]
            rows.append(("kf_rmse", t, rmse(mean, truth.values[t], w), 1,
                         run.seed))
        run.save_tensor("baseline_mean.gapt", res.analysis_means,
                        role="kalman-analysis-mean")
    elif method == "enkf":
        spec = system_spec_from_config(run.cfg)
        m = a["ensemble_size"]
        ens = climatology_ensemble(clim, m, derive_seed(run.seed, "enkf-init"),
                                   mode="resample", data=truth).as_array()
        infl = run.cfg["baseline"]["inflation"]
        for t in range(window + 1):
            if t > 0:
                ens = step_array(ens, spec, derive_seed(run.seed, "enkf-prop", t),
                                 step_index=t - 1)
            if t % a["obs_every"] == 0:
                ens = enkf_step(ens, obs_stream[t // a["obs_every"]], infl,
                                derive_seed(run.seed, "enkf-up", t))
            rows.append(("enkf_rmse", t,
                         rmse(ens.mean(axis=0), truth.values[t], w), m,
                         run.seed))
    elif method == "persistence":
        fc = persistence_forecast(truth.values[0], window)
        for t in range(1, window + 1):
            rows.append(("persistence_rmse", t,
                         rmse(fc[t - 1], truth.values[t], w), 1, run.seed))
    elif method == "climatology":
        m = a["ensemble_size"]
        ref = climatology_ensemble(clim, m,
                                   derive_seed(run.seed, "clim-ref")).as_array()
        for t in range(window + 1):
            rows.append(("climatology_crps", t,
                         crps_field(ref, truth.values[t], w), m, run.seed))
    else:
        raise ConfigError(f"unknown baseline method {method!r}")
    run.save_metrics("baseline_metrics.csv", rows)
    run.steps["window_steps"] = window
    run.say(f"baseline ({method}): {len(rows)} metric rows")
    run.finish("baseline")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="gap", standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except (DigestMismatchError, TensorFormatError, OSError) as exc:
        click.echo(f"i/o error: {exc}", err=True)
        return 3
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 2
    except ValueError as exc:
        click.echo(f"invalid request: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
