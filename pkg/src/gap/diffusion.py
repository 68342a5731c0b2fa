"""Variance-preserving diffusion: schedule, score models, training, samplers.

The forward process x_tau = alpha(tau) x_0 + sqrt(1 - alpha(tau)^2) eps runs
on tau in [0, 1] with a linear beta schedule, so alpha^2 + sigma^2 = 1 at
every node.  Score models and all sampling work in normalized coordinates;
ensembles are denormalized through the model's climatology on the way out.

Reverse chains draw member noise from independent counter-based streams
(one per member, keyed by the member seed), so results are independent of
batching and of the total member count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import MLP, Adam
from .rng import derive_seed
from .state import (Climatology, Ensemble, StateVector, Trajectory,
                    identity_climatology, normalize_array, denormalize_array)

ALPHA_FLOOR = 1e-6   # terminal guard: alpha(tau) ~ 0 near tau = 1
SIGMA_FLOOR = 1e-6   # sigma(0) = 0; score preconditioning divides by sigma


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float
    beta_max: float
    n_steps: int
    tau_grid: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    beta: np.ndarray
    T: float = 1.0

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1


def build_schedule(beta_min: float = 0.1, beta_max: float = 20.0,
                   n_steps: int = 160) -> NoiseSchedule:
    """Linear-beta VP schedule tabulated on a uniform grid over [0, 1].

    alpha(tau) = exp(-(beta_min tau + (beta_max - beta_min) tau^2 / 2) / 2).
    """
    if not 0 < beta_min <= beta_max:
        raise ValueError("need 0 < beta_min <= beta_max")
    if n_steps < 2:
        raise ValueError("need n_steps >= 2")
    tau = np.linspace(0.0, 1.0, n_steps + 1)
    integral = beta_min * tau + 0.5 * (beta_max - beta_min) * tau ** 2
    alpha = np.exp(-0.5 * integral)
    sigma = np.sqrt(np.maximum(0.0, 1.0 - alpha ** 2))
    beta = beta_min + (beta_max - beta_min) * tau
    for arr in (tau, alpha, sigma, beta):
        arr.setflags(write=False)
    return NoiseSchedule(beta_min, beta_max, n_steps, tau, alpha, sigma, beta)


def perturb_forward(x0, tau_idx: int, sched: NoiseSchedule, seed: int):
    """Forward-noise a state to depth tau_idx; returns (x_tau, eps)."""
    if not 0 <= tau_idx <= sched.n_steps:
        raise ValueError("tau_idx out of range")
    wrap = isinstance(x0, StateVector)
    x = x0.values if wrap else np.asarray(x0, dtype=np.float64)
    g = np.random.Generator(np.random.Philox(key=derive_seed(seed, "perturb")))
    eps = g.standard_normal(x.shape)
    out = sched.alpha[tau_idx] * x + sched.sigma[tau_idx] * eps
    if wrap:
        return StateVector(out), StateVector(eps)
    return out, eps


@dataclass(frozen=True)
class ScoreNet:
    """MLP score head: input [x_tau, sinusoidal embedding of tau], output eps-hat."""

    net: MLP
    hidden_sizes: tuple
    n_freqs: int = 8
    loss_curve: tuple = ()

    def embed(self, tau) -> np.ndarray:
        t = np.atleast_1d(np.asarray(tau, dtype=np.float64))[:, None]
        # geometric ladder topping out near 32 cycles on [0, 1]; higher
        # frequencies alias badly between neighboring schedule nodes
        freqs = 0.25 * 2.0 ** np.arange(self.n_freqs)
        ang = 2.0 * np.pi * t * freqs
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class ScoreModel:
    kind: str                       # mlp | analytic_gaussian
    dim: int
    clim: Climatology
    weights: ScoreNet | None = None
    gaussian_params: tuple | None = None   # (mu, Sigma) in normalized space

    def __post_init__(self):
        if self.kind == "mlp":
            if self.weights is None or self.gaussian_params is not None:
                raise ValueError("mlp model carries weights only")
        elif self.kind == "analytic_gaussian":
            if self.gaussian_params is None or self.weights is not None:
                raise ValueError("analytic model carries gaussian_params only")
            mu, cov = self.gaussian_params
            mu = np.array(mu, dtype=np.float64)
            cov = np.array(cov, dtype=np.float64)
            if mu.shape != (self.dim,) or cov.shape != (self.dim, self.dim):
                raise ValueError("gaussian_params shape mismatch")
            cov = 0.5 * (cov + cov.T) + 1e-10 * np.eye(self.dim)  # regularized
            evals, evecs = np.linalg.eigh(cov)
            if np.any(evals <= 0):
                raise ValueError("covariance not positive definite")
            object.__setattr__(self, "gaussian_params", (mu, cov))
            object.__setattr__(self, "_eig", (evals, evecs))
        else:
            raise ValueError(f"unknown score model kind {self.kind!r}")

    def gaussian_eig(self):
        return self._eig


def analytic_gaussian_model(mean, cov, clim: Climatology | None = None) -> ScoreModel:
    """Exact Gaussian score model from system-unit moments.

    The moments are transformed into the normalized coordinates implied by
    clim (identity climatology when omitted).
    """
    mean = np.asarray(mean, dtype=np.float64)
    d = mean.shape[0]
    if clim is None:
        clim = identity_climatology(d)
    mu_n = (mean - clim.mean) / clim.std
    cov_n = np.asarray(cov, dtype=np.float64) / np.outer(clim.std, clim.std)
    return ScoreModel("analytic_gaussian", d, clim, gaussian_params=(mu_n, cov_n))


def score_array(x_tau: np.ndarray, tau_idx: int, model: ScoreModel,
                sched: NoiseSchedule) -> np.ndarray:
    """Score of the noised marginal at a grid node, on (d,) or (m, d) input."""
    x = np.asarray(x_tau, dtype=np.float64)
    a = sched.alpha[tau_idx]
    s = sched.sigma[tau_idx]
    if model.kind == "analytic_gaussian":
        mu, _ = model.gaussian_params
        evals, evecs = model.gaussian_eig()
        denom = a * a * evals + s * s
        y = (x - a * mu) @ evecs
        return -(y / denom) @ evecs.T
    emb = model.weights.embed(sched.tau_grid[tau_idx])
    x2 = np.atleast_2d(x)
    inp = np.concatenate([x2, np.broadcast_to(emb, (x2.shape[0], emb.shape[1]))], axis=1)
    resid = model.weights.net.forward(inp)
    # sigma*x skip: zero net output already scores a unit-Gaussian climatology,
    # so the net only carries the deviation from it
    eps_hat = s * x2 + a * resid
    out = -eps_hat / max(s, SIGMA_FLOOR)
    return out.reshape(x.shape)


def score(x_tau: StateVector, tau_idx: int, model: ScoreModel,
          sched: NoiseSchedule) -> StateVector:
    if x_tau.dim != model.dim:
        raise ValueError("dim mismatch")
    return StateVector(score_array(x_tau.values, tau_idx, model, sched))


def denoise_one_step(x_tau, tau_idx: int, model: ScoreModel,
                     sched: NoiseSchedule):
    """Posterior-mean estimate of x_0 from x_tau: (x + sigma^2 score) / alpha."""
    wrap = isinstance(x_tau, StateVector)
    x = x_tau.values if wrap else np.asarray(x_tau, dtype=np.float64)
    a = max(sched.alpha[tau_idx], ALPHA_FLOOR)
    s = sched.sigma[tau_idx]
    out = (x + s * s * score_array(x, tau_idx, model, sched)) / a
    return StateVector(out) if wrap else out


def dsm_loss(model: ScoreModel, sched: NoiseSchedule, z0: np.ndarray,
             tau_idx: np.ndarray, eps: np.ndarray) -> float:
    """Denoising score-matching loss ||s(x_tau) + eps/sigma||^2 on given draws.

    Uniform (lambda = 1) weighting in normalized space; usable with any model
    kind so learned and analytic scores can be compared on identical noise.
    """
    total = 0.0
    for i in np.unique(tau_idx):
        rows = tau_idx == i
        a, s = sched.alpha[i], max(sched.sigma[i], SIGMA_FLOOR)
        x_tau = a * z0[rows] + s * eps[rows]
        sc = score_array(x_tau, int(i), model, sched)
        total += float(np.sum((sc + eps[rows] / s) ** 2))
    return total / z0.shape[0]


def train_score(data: Trajectory, clim: Climatology, sched: NoiseSchedule,
                hidden_sizes: list[int], epochs: int, lr: float, batch: int,
                seed: int) -> ScoreModel:
    """Denoising score matching on normalized climatological samples.

    Per sample: draw a grid node tau uniformly from {1..N}, noise the state,
    and regress eps-hat = sigma*x + alpha*net(x, tau) on the drawn eps with
    the 1/sigma^2 factor implied by the uniform-lambda loss ||s + eps/sigma||^2.
    The sigma*x skip term pins the pure-noise limit, so the regression target
    seen by the net has unit variance at every node.
    """
    if len(data) == 0:
        raise ValueError("empty training data")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    z = normalize_array(data.values, clim)
    n, d = z.shape
    net_holder = ScoreNet(MLP([d + 16] + list(hidden_sizes) + [d], seed=seed),
                          tuple(hidden_sizes))
    net = net_holder.net
    opt = Adam(net, lr=lr)
    g = np.random.Generator(np.random.Philox(key=derive_seed(seed, "train-score")))
    losses = []
    total_steps = epochs * ((n + batch - 1) // batch)
    step_no = 0
    for _ in range(epochs):
        order = g.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            z0 = z[idx]
            b = z0.shape[0]
            ti = g.integers(1, sched.n_steps + 1, size=b)
            a = sched.alpha[ti][:, None]
            s = np.maximum(sched.sigma[ti], SIGMA_FLOOR)[:, None]
            eps = g.standard_normal((b, d))
            x_tau = a * z0 + s * eps
            emb = net_holder.embed(sched.tau_grid[ti])
            resid, acts = net.forward_cache(np.concatenate([x_tau, emb], axis=1))
            diff = (s * x_tau + a * resid - eps) / s
            loss = float(np.mean(np.sum(diff * diff, axis=1)))
            if not np.isfinite(loss):
                raise FloatingPointError("score training loss became non-finite")
            epoch_loss += loss * b
            dout = 2.0 * diff * (a / s) / b
            dws, dbs = net.backward(acts, dout)
            opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step_no / total_steps))
            opt.step(net, dws, dbs)
            step_no += 1
        losses.append(epoch_loss / n)
    trained = ScoreNet(net, tuple(hidden_sizes), loss_curve=tuple(losses))
    return ScoreModel("mlp", d, clim, weights=trained)


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "heun_pflow_ode"   # euler_maruyama_sde | heun_pflow_ode | ddim
    n_steps: int = 100
    eta: float = 0.0                 # ddim only
    churn: float = 0.0               # extra per-step noise inflation, 0 = off

    def __post_init__(self):
        if self.method not in ("euler_maruyama_sde", "heun_pflow_ode", "ddim"):
            raise ValueError(f"unknown sampler method {self.method!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.churn < 0:
            raise ValueError("churn must be >= 0")


def member_streams(seed: int, n: int, tag: str = "member"):
    seeds = [derive_seed(seed, tag, i) for i in range(n)]
    gens = [np.random.Generator(np.random.Philox(key=s)) for s in seeds]
    return seeds, gens


def _stacked_normal(gens, shape) -> np.ndarray:
    return np.stack([g.standard_normal(shape) for g in gens])


def sampler_nodes(sched: NoiseSchedule, n_steps: int, top_idx: int | None = None) -> np.ndarray:
    """Ascending schedule-node subset visited by a sampler run.

    Includes node 0 and the top node; n_steps counts transitions on the full
    span, thinned proportionally when starting below the top of the schedule.
    """
    if not 2 <= n_steps:
        raise ValueError("sampler needs n_steps >= 2")
    if n_steps > sched.n_steps:
        raise ValueError("sampler n_steps cannot exceed the schedule's")
    top = sched.n_steps if top_idx is None else int(top_idx)
    if not 0 <= top <= sched.n_steps:
        raise ValueError("top index out of range")
    if top == 0:
        return np.array([0], dtype=int)
    k = max(1, int(round(n_steps * top / sched.n_steps)))
    nodes = np.unique(np.round(np.linspace(0, top, k + 1)).astype(int))
    return nodes


def reverse_chain(x: np.ndarray, nodes: np.ndarray, model: ScoreModel,
                  sched: NoiseSchedule, cfg: SamplerConfig, gens,
                  score_fn=None, node_hook=None) -> np.ndarray:
    """Run the configured reverse process over an ascending node list.

    x is an (m, d) batch sitting at nodes[-1].  node_hook(x, node) -> x is
    applied on arrival at every node (including the start and node 0);
    score_fn(x, node) defaults to the model score and is the seam where
    guidance terms enter.  Per-member noise comes from gens, one stream per
    row, drawn in a fixed order so the chain is reproducible.
    """
    if score_fn is None:
        score_fn = lambda xx, i: score_array(xx, i, model, sched)
    tau, alpha, sigma, beta = sched.tau_grid, sched.alpha, sched.sigma, sched.beta
    if node_hook is not None:
        x = node_hook(x, int(nodes[-1]))
    for pos in range(len(nodes) - 1, 0, -1):
        i, j = int(nodes[pos]), int(nodes[pos - 1])
        h = tau[i] - tau[j]
        if cfg.churn > 0.0 and sigma[i] > 0.0:
            x = x + cfg.churn * sigma[i] * np.sqrt(h) * _stacked_normal(gens, x.shape[1:])
        if cfg.method == "euler_maruyama_sde":
            drift = -0.5 * beta[i] * x - beta[i] * score_fn(x, i)
            x = x - h * drift + np.sqrt(beta[i] * h) * _stacked_normal(gens, x.shape[1:])
        elif cfg.method == "heun_pflow_ode":
            d1 = -0.5 * beta[i] * (x + score_fn(x, i))
            x_pred = x - h * d1
            if j == 0:
                x = x_pred  # final step stays first-order: one score evaluation
            else:
                d2 = -0.5 * beta[j] * (x_pred + score_fn(x_pred, j))
                x = x - 0.5 * h * (d1 + d2)
        else:  # ddim
            a_i = max(alpha[i], ALPHA_FLOOR)
            eps_hat = -sigma[i] * score_fn(x, i)
            x0_hat = (x - sigma[i] * eps_hat) / a_i
            sig_t = 0.0
            if cfg.eta > 0.0 and j > 0:
                abar_i, abar_j = alpha[i] ** 2, alpha[j] ** 2
                sig_t = cfg.eta * np.sqrt((1 - abar_j) / (1 - abar_i)) \
                    * np.sqrt(max(0.0, 1 - abar_i / abar_j))
            direction = np.sqrt(max(0.0, sigma[j] ** 2 - sig_t ** 2))
            x = alpha[j] * x0_hat + direction * eps_hat
            if sig_t > 0.0:
                x = x + sig_t * _stacked_normal(gens, x.shape[1:])
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"sampler produced non-finite state at node {j}")
        if node_hook is not None:
            x = node_hook(x, j)
    return x


def sample(model: ScoreModel, sched: NoiseSchedule, cfg: SamplerConfig,
           n: int, seed: int) -> Ensemble:
    """Draw n members from the learned (or analytic) prior, denormalized."""
    if n < 1:
        raise ValueError("need n >= 1")
    seeds, gens = member_streams(seed, n)
    x = _stacked_normal(gens, (model.dim,))
    nodes = sampler_nodes(sched, cfg.n_steps)
    x = reverse_chain(x, nodes, model, sched, cfg, gens)
    return Ensemble.from_array(denormalize_array(x, model.clim), seeds)
