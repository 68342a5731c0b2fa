"""Surrogate dynamical systems, dataset generation, and forecasting models.

Systems:
  * lorenz63 / lorenz96: classic chaotic benchmarks, integrated with RK4;
  * linear_gaussian: a stable OU process with exact discretization, the
    ground truth for every linear-Gaussian oracle;
  * lorenz96_forced: the first n_forcing coordinates are slow "forcing"
    variables relaxing toward a seasonal target, the rest a Lorenz-96 ring
    whose effective forcing shifts with the mean forcing anomaly.

All step functions accept a single state (d,) or a batch (m, d).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .mlp import MLP, Adam
from .rng import generator
from .state import (Climatology, StateVector, Trajectory, fit_climatology,
                    normalize_array, denormalize_array)


class DivergenceError(RuntimeError):
    """A state became non-finite during integration."""

    def __init__(self, message: str, step: int | None = None, state=None):
        super().__init__(message)
        self.step = step
        self.state = state


@dataclass(frozen=True)
class SystemSpec:
    kind: str           # linear_gaussian | lorenz63 | lorenz96 | lorenz96_forced
    dim: int
    params: dict
    dt: float
    substeps: int = 1

    def __post_init__(self):
        if self.kind not in ("linear_gaussian", "lorenz63", "lorenz96", "lorenz96_forced"):
            raise ValueError(f"unknown system kind {self.kind!r}")
        if self.dt <= 0 or self.substeps < 1:
            raise ValueError("dt must be positive and substeps >= 1")


def lorenz63_spec(dt: float = 0.01, substeps: int = 1,
                  sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> SystemSpec:
    return SystemSpec("lorenz63", 3, {"sigma": sigma, "rho": rho, "beta": beta}, dt, substeps)


def lorenz96_spec(dim: int = 40, forcing: float = 8.0, dt: float = 0.05,
                  substeps: int = 2) -> SystemSpec:
    return SystemSpec("lorenz96", dim, {"F": forcing}, dt, substeps)


def linear_gaussian_spec(dim: int = 8, dt: float = 0.1, seed: int = 0,
                         damping: float = 0.6) -> SystemSpec:
    """Stable OU process dx = A x dt + dW, discretized exactly.

    A = skew - damping*I is always Hurwitz, giving oscillatory decaying
    modes; Q is a random diagonal.  The exact one-step transition A_d and
    process-noise covariance Q_d come from the van Loan block-matrix trick.
    """
    rng = generator(seed, "lg-spec")
    skew = rng.normal(size=(dim, dim)) / np.sqrt(dim)
    a_c = 0.5 * (skew - skew.T) - damping * np.eye(dim)
    q_c = np.diag(rng.uniform(0.5, 1.5, size=dim))
    block = np.zeros((2 * dim, 2 * dim))
    block[:dim, :dim] = a_c
    block[:dim, dim:] = q_c
    block[dim:, dim:] = -a_c.T
    phi = expm(block * dt)
    a_d = phi[:dim, :dim]
    q_d = phi[:dim, dim:] @ a_d.T
    q_d = 0.5 * (q_d + q_d.T)
    return SystemSpec("linear_gaussian", dim,
                      {"A": a_c, "Q": q_c, "A_d": a_d, "Q_d": q_d,
                       "Q_d_chol": np.linalg.cholesky(q_d)},
                      dt, 1)


def lorenz96_forced_spec(dim: int = 40, n_forcing: int = 8, forcing: float = 8.0,
                         dt: float = 0.05, substeps: int = 2,
                         kappa: float = 0.1, coupling: float = 3.0,
                         season_amp: float = 1.0, period_steps: int = 200,
                         anom_std: float = 1.0) -> SystemSpec:
    """Lorenz-96 with n_forcing slow forcing coordinates prepended.

    theta_i relaxes toward a sinusoidal seasonal cycle (period period_steps
    model steps, coordinate-staggered phase) with rate kappa, plus seeded
    noise making its anomaly an OU process of stationary std anom_std.  The
    ring is split into n_forcing contiguous sectors; sector i feels
    F_eff = F + coupling * (theta_i - cycle_i), a regional slow forcing.
    """
    if not 0 <= n_forcing < dim:
        raise ValueError("need 0 <= n_forcing < dim")
    return SystemSpec("lorenz96_forced", dim,
                      {"F": forcing, "n_forcing": n_forcing, "kappa": kappa,
                       "coupling": coupling, "season_amp": season_amp,
                       "period_steps": period_steps, "anom_std": anom_std},
                      dt, substeps)


def forcing_cycle(spec: SystemSpec, step_index) -> np.ndarray:
    """Seasonal target of the forcing coordinates at a model step (or steps)."""
    p = spec.params
    nf = p["n_forcing"]
    scalar = np.isscalar(step_index) or np.ndim(step_index) == 0
    phase = 2.0 * np.pi * (np.atleast_1d(np.asarray(step_index, dtype=np.float64))
                           / p["period_steps"])
    offsets = 2.0 * np.pi * np.arange(nf) / max(nf, 1)
    out = p["season_amp"] * np.sin(phase[:, None] + offsets)
    return out[0] if scalar else out


def _rhs_lorenz63(x: np.ndarray, p: dict) -> np.ndarray:
    dx = np.empty_like(x)
    dx[..., 0] = p["sigma"] * (x[..., 1] - x[..., 0])
    dx[..., 1] = x[..., 0] * (p["rho"] - x[..., 2]) - x[..., 1]
    dx[..., 2] = x[..., 0] * x[..., 1] - p["beta"] * x[..., 2]
    return dx


def _rhs_lorenz96(x: np.ndarray, forcing) -> np.ndarray:
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + forcing


def _rk4(rhs, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _step_deterministic(x: np.ndarray, spec: SystemSpec, step_index: int) -> np.ndarray:
    p = spec.params
    h = spec.dt / spec.substeps
    if spec.kind == "lorenz63":
        rhs = lambda s: _rhs_lorenz63(s, p)
    elif spec.kind == "lorenz96":
        rhs = lambda s: _rhs_lorenz96(s, p["F"])
    elif spec.kind == "lorenz96_forced":
        nf = p["n_forcing"]
        cyc = forcing_cycle(spec, step_index)
        # ring site j belongs to sector floor(j * nf / n_ring)
        sector = np.arange(spec.dim - nf) * nf // (spec.dim - nf)

        def rhs(s):
            theta = s[..., :nf]
            atm = s[..., nf:]
            ds = np.empty_like(s)
            ds[..., :nf] = -p["kappa"] * (theta - cyc)
            f_eff = p["F"] + p["coupling"] * (theta - cyc)[..., sector]
            ds[..., nf:] = _rhs_lorenz96(atm, f_eff)
            return ds
    else:
        raise ValueError(spec.kind)
    for _ in range(spec.substeps):
        x = _rk4(rhs, x, h)
    return x


def step_array(x: np.ndarray, spec: SystemSpec, rng_seed: int, step_index: int = 0,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """One model step on a (d,) state or an (m, d) batch of states."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise ValueError("state dim mismatch")
    if spec.kind == "linear_gaussian":
        g = rng if rng is not None else generator(rng_seed, "dyn", step_index)
        p = spec.params
        noise = g.standard_normal(x.shape) @ p["Q_d_chol"].T
        out = x @ p["A_d"].T + noise
    else:
        out = _step_deterministic(x, spec, step_index)
        if spec.kind == "lorenz96_forced":
            # OU noise on the forcing coordinates keeps theta anomalies alive
            p = spec.params
            g = rng if rng is not None else generator(rng_seed, "dyn", step_index)
            nf = p["n_forcing"]
            s_step = p["anom_std"] * np.sqrt(max(0.0, 1.0 - np.exp(-2.0 * p["kappa"] * spec.dt)))
            out[..., :nf] += s_step * g.standard_normal(x.shape[:-1] + (nf,))
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"{spec.kind} produced a non-finite state",
                              step=step_index, state=out)
    return out


def step_truth(x: StateVector, spec: SystemSpec, rng_seed: int,
               step_index: int = 0) -> StateVector:
    """Advance the truth system by one model step (deterministic given seed)."""
    return StateVector(step_array(x.values, spec, rng_seed, step_index))


def default_initial_state(spec: SystemSpec, seed: int) -> np.ndarray:
    rng = generator(seed, "init")
    if spec.kind == "lorenz63":
        return np.array([1.0, 1.0, 1.0])
    if spec.kind == "lorenz96":
        x = np.full(spec.dim, spec.params["F"])
        return x + 0.01 * rng.standard_normal(spec.dim)
    if spec.kind == "lorenz96_forced":
        x = np.full(spec.dim, spec.params["F"])
        nf = spec.params["n_forcing"]
        x[:nf] = forcing_cycle(spec, 0)
        return x + 0.01 * rng.standard_normal(spec.dim)
    return np.zeros(spec.dim)  # linear_gaussian relaxes from the origin


def generate_dataset(spec: SystemSpec, n_spinup: int, n_samples: int, thin: int,
                     seed: int, x0: StateVector | None = None) -> Trajectory:
    """Integrate the truth system and return n_samples states every `thin` steps.

    The trajectory starts after n_spinup discarded steps; its dt is the
    sampling interval spec.dt * thin.  Fully deterministic under seed.
    """
    if n_spinup < 0 or thin < 1 or n_samples < 0:
        raise ValueError("invalid spinup/thin/sample counts")
    if n_samples == 0:
        return Trajectory(np.zeros((0, spec.dim)), spec.dt * thin)
    x = x0.values.copy() if x0 is not None else default_initial_state(spec, seed)
    g = generator(seed, "truth")
    out = np.empty((n_samples, spec.dim))
    total = n_spinup + (n_samples - 1) * thin + 1
    k_out = 0
    for step in range(total):
        if step >= n_spinup and (step - n_spinup) % thin == 0:
            out[k_out] = x
            k_out += 1
            if k_out == n_samples:
                break
        x = step_array(x, spec, seed, step_index=step, rng=g)
    return Trajectory(out, spec.dt * thin)


@dataclass(frozen=True)
class LearnedStepper:
    """Weights of a one-step residual MLP operating in normalized space."""

    net: MLP
    clim: Climatology
    loss_curve: tuple


@dataclass(frozen=True)
class ForecastModel:
    kind: str                       # perfect | imperfect_physics | learned_mlp
    spec: SystemSpec | None
    weights: LearnedStepper | None = None
    bias_injection: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("perfect", "imperfect_physics", "learned_mlp"):
            raise ValueError(f"unknown forecaster kind {self.kind!r}")
        if self.kind == "learned_mlp" and self.weights is None:
            raise ValueError("learned_mlp requires weights")
        if self.kind != "learned_mlp" and self.spec is None:
            raise ValueError("physics forecaster requires a system spec")
        if self.bias_injection is not None:
            b = np.array(self.bias_injection, dtype=np.float64)
            d = self.spec.dim if self.spec is not None else self.weights.clim.dim
            if b.shape != (d,):
                raise ValueError("bias_injection dim mismatch")
            object.__setattr__(self, "bias_injection", b)

    @property
    def dim(self) -> int:
        return self.spec.dim if self.spec is not None else self.weights.clim.dim


def perfect_model(spec: SystemSpec, bias: np.ndarray | None = None) -> ForecastModel:
    return ForecastModel("perfect", spec, bias_injection=bias)


def imperfect_model(spec: SystemSpec, forcing_delta: float = 1.0,
                    halve_substeps: bool = False,
                    bias: np.ndarray | None = None) -> ForecastModel:
    """Systematically wrong physics: forcing shifted and/or coarser integration."""
    params = dict(spec.params)
    if "F" in params:
        params["F"] = params["F"] + forcing_delta
    substeps = max(1, spec.substeps // 2) if halve_substeps else spec.substeps
    wrong = SystemSpec(spec.kind, spec.dim, params, spec.dt, substeps)
    return ForecastModel("imperfect_physics", wrong, bias_injection=bias)


def forecast_array(x: np.ndarray, m: ForecastModel, lead_steps: int, rng_seed: int,
                   step_index: int = 0) -> np.ndarray:
    """Roll the forecaster lead_steps forward on a state or batch of states."""
    if lead_steps < 1:
        raise ValueError("lead_steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    for k in range(lead_steps):
        if m.kind == "learned_mlp":
            st = m.weights
            z = normalize_array(x, st.clim)
            x = denormalize_array(z + st.net.forward(np.atleast_2d(z)).reshape(z.shape), st.clim)
        else:
            x = step_array(x, m.spec, rng_seed, step_index=step_index + k)
        if m.bias_injection is not None:
            x = x + m.bias_injection
        if not np.all(np.isfinite(x)):
            raise DivergenceError("forecast diverged", step=step_index + k, state=x)
    return x


def forecast(x: StateVector, m: ForecastModel, lead_steps: int, rng_seed: int,
             step_index: int = 0) -> StateVector:
    return StateVector(forecast_array(x.values, m, lead_steps, rng_seed, step_index))


def train_forecaster(data: Trajectory, hidden_sizes: list[int], epochs: int,
                     lr: float, seed: int, batch_size: int = 64) -> ForecastModel:
    """Fit a residual one-step MLP to consecutive trajectory pairs.

    Inputs and targets are normalized by the trajectory's own climatology;
    the net learns the normalized increment.  Plain MSE loss, Adam updates,
    deterministic under seed.
    """
    if len(data) < 2:
        raise ValueError("need at least 2 states")
    clim = fit_climatology(data)
    z = normalize_array(data.values, clim)
    x_in, y_out = z[:-1], z[1:]
    target = y_out - x_in
    n = x_in.shape[0]
    d = data.dim
    net = MLP([d] + list(hidden_sizes) + [d], seed=seed)
    opt = Adam(net, lr=lr)
    g = generator(seed, "train-forecaster")
    losses = []
    for _ in range(epochs):
        order = g.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, tb = x_in[idx], target[idx]
            pred, acts = net.forward_cache(xb)
            err = pred - tb
            loss = float(np.mean(err ** 2))
            if not np.isfinite(loss):
                raise DivergenceError("training loss became non-finite")
            epoch_loss += loss * len(idx)
            dout = 2.0 * err / err.size
            dws, dbs = net.backward(acts, dout)
            opt.step(net, dws, dbs)
        losses.append(epoch_loss / n)
    return ForecastModel("learned_mlp", None,
                         weights=LearnedStepper(net, clim, tuple(losses)))
