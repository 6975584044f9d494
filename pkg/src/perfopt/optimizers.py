"""Training procedures that interact with a stateful environment.

Every procedure deploys exactly ``cfg.T`` models and returns a
:class:`RunRecord` with one row per deployment.

* ``spgd``    Stateful PerfGD: finite-difference partials of the mean map from
              the recent trajectory, Neumann-series long-term Jacobian,
              score-function gradient, Gaussian-perturbed gradient step.
* ``bspgd``   SPGD whose partials are regressed on a known low-dimensional score.
* ``rgd``     repeated gradient descent, treating the current distribution as fixed.
* ``perfgd``  stateless PerfGD that redeploys each model ``wait`` times and
              treats the last observation as settled.
* ``dfo``     one-point spherical zeroth-order descent on the realized loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from perfopt import environments as envs
from perfopt.environments import EnvironmentSpec, EnvState, Variant
from perfopt.errors import DegenerateWindowError, InvalidInputError, SingularMatrixError
from perfopt.estimators import (
    TrajectoryWindow,
    estimate_jac_direct,
    estimate_lt_grad_closed_linear,
    estimate_lt_grad_mc,
    lt_jacobian_with_info,
    estimate_partials,
    estimate_partials_bottleneck,
    PartialsEstimate,
)
from perfopt.linalg import clip_gradient, project_box

logger = logging.getLogger(__name__)

METHODS = ("spgd", "bspgd", "rgd", "perfgd", "dfo")


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameters for one optimizer run.

    ``horizon=None`` means "use the entire trajectory". ``init_steps=None``
    defaults to the model dimension. ``fixed_anchor=None`` turns fixed-base
    differencing on for the oscillating environment only.
    """

    method: str
    lr: float
    perturbation: float = 0.0
    horizon: int | None = None
    wait: int = 1
    init_steps: int | None = None
    clip_norm: float = 10.0
    T: int = 50
    theta0: tuple | None = None
    fixed_anchor: bool | None = None
    mc_samples: int = 10_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.lr > 0:
            raise InvalidInputError("lr must be positive")
        if self.perturbation < 0:
            raise InvalidInputError("perturbation must be nonnegative")
        if self.wait < 1:
            raise InvalidInputError("wait must be >= 1")
        if self.T < 1:
            raise InvalidInputError("T must be >= 1")
        if self.clip_norm <= 0:
            raise InvalidInputError("clip_norm must be positive")
        if self.method == "dfo" and self.perturbation <= 0:
            raise InvalidInputError("dfo needs a positive perturbation radius")
        if self.theta0 is not None:
            object.__setattr__(self, "theta0", tuple(float(x) for x in self.theta0))

    def check_for(self, spec: EnvironmentSpec) -> None:
        d = spec.d
        if self.horizon is not None:
            floor = {"spgd": 2 * d, "bspgd": d + 1, "perfgd": d}.get(self.method, 0)
            if self.horizon < floor:
                raise InvalidInputError(f"{self.method} horizon must be >= {floor}, got {self.horizon}")
        if self.theta0 is not None and len(self.theta0) != d:
            raise InvalidInputError("theta0 has the wrong dimension")
        if self.method == "bspgd" and spec.variant is not Variant.BOTTLENECK:
            raise InvalidInputError("bspgd needs an environment with a known score (bottleneck)")

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["theta0"] is not None:
            out["theta0"] = list(out["theta0"])
        return out

    def label(self) -> str:
        parts = [self.method, f"lr={self.lr:.4g}"]
        if self.method in ("spgd", "bspgd", "dfo"):
            parts.append(f"ps={self.perturbation:.4g}")
        if self.method in ("spgd", "bspgd", "perfgd"):
            parts.append(f"H={'full' if self.horizon is None else self.horizon}")
        if self.method in ("perfgd", "dfo"):
            parts.append(f"wait={self.wait}")
        return " ".join(parts)


@dataclass
class RunRecord:
    """Per-deployment log of one run.

    ``loss_long_term`` is ``L*`` of the deployed model. DFO additionally logs
    its internal estimate; :attr:`reported_loss` is the curve used for
    comparisons (internal estimate for DFO, deployed model otherwise).
    """

    method: str
    theta: np.ndarray
    mu_hat: np.ndarray
    grad_estimate: np.ndarray
    loss_instantaneous: np.ndarray
    loss_long_term: np.ndarray
    opt_value: float
    theta_internal: np.ndarray | None = None
    loss_long_term_internal: np.ndarray | None = None
    seed: object = None
    config: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.loss_long_term)

    @property
    def steps(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)

    def _frac(self, losses: np.ndarray) -> np.ndarray:
        if self.opt_value == 0:
            return np.full(losses.shape, np.nan)
        return losses / self.opt_value

    @property
    def frac_opt(self) -> np.ndarray:
        return self._frac(self.loss_long_term)

    @property
    def frac_opt_internal(self) -> np.ndarray | None:
        if self.loss_long_term_internal is None:
            return None
        return self._frac(self.loss_long_term_internal)

    @property
    def reported_loss(self) -> np.ndarray:
        if self.loss_long_term_internal is not None:
            return self.loss_long_term_internal
        return self.loss_long_term

    @property
    def final_loss(self) -> float:
        return float(self.reported_loss[-1])

    @property
    def final_frac_opt(self) -> float:
        return float(self._frac(self.reported_loss)[-1])

    @property
    def deployments_to_within_tol(self) -> int | None:
        return self.diagnostics.get("deployments_to_within_tol")


class _Recorder:
    def __init__(self, spec: EnvironmentSpec, env: EnvState, T: int, internal: bool = False):
        d = spec.d
        self.spec, self.env = spec, env
        self.theta = np.empty((T, d))
        self.mu_hat = np.empty((T, d))
        self.grad = np.full((T, d), np.nan)
        self.loss_inst = np.empty(T)
        self.loss_lt = np.empty(T)
        self.theta_int = np.empty((T, d)) if internal else None
        self.loss_lt_int = np.empty(T) if internal else None
        self.t = 0

    def log(self, theta, mu_hat, grad=None, theta_internal=None):
        t, spec = self.t, self.spec
        self.theta[t] = theta
        self.mu_hat[t] = mu_hat
        if grad is not None:
            self.grad[t] = grad
        mu_true = getattr(self.env, "mu_current", mu_hat)
        self.loss_inst[t] = envs.instantaneous_loss(spec, theta, mu_true)
        self.loss_lt[t] = envs.long_term_loss(spec, theta)
        if self.theta_int is not None:
            self.theta_int[t] = theta_internal
            self.loss_lt_int[t] = envs.long_term_loss(spec, theta_internal)
        self.t += 1

    def finish(self, method, opt_value, cfg, seed, diagnostics) -> RunRecord:
        return RunRecord(
            method=method,
            theta=self.theta,
            mu_hat=self.mu_hat,
            grad_estimate=self.grad,
            loss_instantaneous=self.loss_inst,
            loss_long_term=self.loss_lt,
            opt_value=opt_value,
            theta_internal=self.theta_int,
            loss_long_term_internal=self.loss_lt_int,
            seed=seed,
            config=cfg.to_dict(),
            diagnostics=diagnostics,
        )


def _setup(spec, cfg, rng, env, opt_value):
    cfg.check_for(spec)
    lo, hi = spec.bounds()
    theta0 = np.zeros(spec.d) if cfg.theta0 is None else np.asarray(cfg.theta0, dtype=float)
    theta = project_box(theta0, lo, hi)
    if env is None:
        env_rng, = rng.spawn(1)
        env = EnvState(spec, env_rng, theta0=theta)
    if opt_value is None:
        opt_value = envs.opt_reference(spec)[1]
    return env, theta, lo, hi, opt_value


def _spam_gradient(spec: EnvironmentSpec, theta, mu_hat, jac, rng, n: int) -> np.ndarray:
    p = spec.spam_fraction

    def spam_part(z, th):
        u = z @ th
        return p * envs._softplus(-u), (-p * envs._sigmoid(-u))[:, None] * z

    g = estimate_lt_grad_mc(spam_part, theta, mu_hat, jac, spec.Sigma, n, rng, with_se=False).grad
    chol = np.linalg.cholesky(spec.Sigma)
    z = spec.mu_other + rng.standard_normal((n, spec.d)) @ chol.T
    g_ham = (1 - p) / n * (envs._sigmoid(z @ theta) @ z)
    return g + g_ham + spec.ridge * theta


def lt_gradient(spec: EnvironmentSpec, theta, mu_hat, jac, rng, n_mc: int = 10_000) -> np.ndarray:
    """Long-term gradient estimate for the environment's point loss."""
    if spec.is_linear_loss:
        return estimate_lt_grad_closed_linear(theta, mu_hat, jac, ridge=spec.ridge).grad
    return _spam_gradient(spec, theta, mu_hat, jac, rng, n_mc)


def fixed_distribution_gradient(spec: EnvironmentSpec, theta, mu_hat, rng, n_mc: int = 10_000):
    """``E_{mu_hat}[grad_theta l]``: the gradient RGD follows."""
    return lt_gradient(spec, theta, mu_hat, np.zeros((spec.d, spec.d)), rng, n_mc)


def _jacobian_from_partials(partials: PartialsEstimate, diag: dict) -> np.ndarray:
    jac, scaled = lt_jacobian_with_info(partials, project=True)
    if scaled:
        diag["noncontractive_steps"] += 1
    return jac


def _stateful_loop(spec, cfg, rng, env, opt_value, gradient_fn, bottleneck: bool) -> RunRecord:
    env, theta, lo, hi, opt_value = _setup(spec, cfg, rng, env, opt_value)
    d = spec.d
    ds = 1 if bottleneck else d
    init_steps = d if cfg.init_steps is None else cfg.init_steps
    min_h = ds + d
    anchor = cfg.fixed_anchor
    if anchor is None:
        anchor = spec.variant is Variant.OSCILLATING
    window = TrajectoryWindow(model_dim=ds)
    rec = _Recorder(spec, env, cfg.T)
    diag = {"degenerate_steps": 0, "noncontractive_steps": 0, "singular_steps": 0}
    last_grad = np.zeros(d)
    mu_prev = env.observe()
    for t in range(cfg.T):
        mu_hat = env.deploy(theta)
        head = envs.score(theta, mu_prev) if bottleneck else theta
        window.append(np.concatenate([head, mu_prev]), mu_hat)
        if anchor and window.anchor is None:
            window.set_anchor(0)
        grad = None
        if gradient_fn is not None:
            grad = gradient_fn(theta, mu_hat)
        elif t >= init_steps:
            avail = len(window) - 1 - (1 if window.anchor is not None else 0)
            H = avail if cfg.horizon is None else min(cfg.horizon, avail)
            if H >= min_h:
                try:
                    if bottleneck:
                        partials = estimate_partials_bottleneck(
                            window, H, envs.score_grad_theta(theta, mu_hat), envs.score_grad_mu(theta, mu_hat))
                    else:
                        partials = estimate_partials(window, H)
                    jac = _jacobian_from_partials(partials, diag)
                    grad = lt_gradient(spec, theta, mu_hat, jac, rng, cfg.mc_samples)
                    last_grad = grad
                except DegenerateWindowError:
                    diag["degenerate_steps"] += 1
                except SingularMatrixError:
                    diag["singular_steps"] += 1
        step = clip_gradient(last_grad if grad is None else grad, cfg.clip_norm)
        noise = rng.standard_normal(d)
        rec.log(theta, mu_hat, grad)
        theta = project_box(theta - cfg.lr * (step + cfg.perturbation * noise), lo, hi)
        mu_prev = mu_hat
    return rec.finish(cfg.method, opt_value, cfg, None, diag)


def run_spgd(spec: EnvironmentSpec, cfg: OptimizerConfig, rng: np.random.Generator,
             env: EnvState | None = None, opt_value: float | None = None,
             gradient_fn: Callable | None = None) -> RunRecord:
    """Stateful PerfGD.

    The first ``init_steps`` deployments (default ``d``) only apply the
    Gaussian perturbation. Afterwards, once at least ``2d + 1`` points are
    available, each step estimates the partials over the last ``H`` steps
    (all available points while fewer than ``H + 1`` exist); if the window
    is degenerate the previous gradient is reused.

    ``gradient_fn(theta, mu_hat)``, if given, replaces the estimator entirely.
    """
    return _stateful_loop(spec, cfg, rng, env, opt_value, gradient_fn, bottleneck=False)


def run_bspgd(spec: EnvironmentSpec, cfg: OptimizerConfig, rng: np.random.Generator,
              env: EnvState | None = None, opt_value: float | None = None) -> RunRecord:
    """SPGD with partials regressed on the score ``s = theta . mu`` and chained through it."""
    return _stateful_loop(spec, cfg, rng, env, opt_value, None, bottleneck=True)


def run_rgd(spec: EnvironmentSpec, cfg: OptimizerConfig, rng: np.random.Generator,
            env: EnvState | None = None, opt_value: float | None = None) -> RunRecord:
    env, theta, lo, hi, opt_value = _setup(spec, cfg, rng, env, opt_value)
    rec = _Recorder(spec, env, cfg.T)
    for _ in range(cfg.T):
        mu_hat = env.deploy(theta)
        grad = fixed_distribution_gradient(spec, theta, mu_hat, rng, cfg.mc_samples)
        rec.log(theta, mu_hat, grad)
        theta = project_box(theta - cfg.lr * grad, lo, hi)
    return rec.finish(cfg.method, opt_value, cfg, None, {})


def run_perfgd(spec: EnvironmentSpec, cfg: OptimizerConfig, rng: np.random.Generator,
               env: EnvState | None = None, opt_value: float | None = None) -> RunRecord:
    """Stateless PerfGD made to wait: each model is deployed ``wait`` times in a row.

    The final observation of each block is treated as the settled mean. The
    Jacobian of the long-term mean is regressed on the settled pairs; until
    ``d + 1`` pairs exist (or when they are degenerate) the previous gradient
    is reused. Gaussian perturbations are applied during the first ``H``
    outer iterations (``d`` when the horizon is the full history).
    """
    env, theta, lo, hi, opt_value = _setup(spec, cfg, rng, env, opt_value)
    d = spec.d
    rec = _Recorder(spec, env, cfg.T)
    diag = {"degenerate_steps": 0}
    thetas, mus = [], []
    last_grad = np.zeros(d)
    n_perturb = d if cfg.horizon is None else cfg.horizon
    outer = 0
    while rec.t < cfg.T:
        block = min(cfg.wait, cfg.T - rec.t)
        for _ in range(block - 1):
            rec.log(theta, env.deploy(theta))
        mu_hat = env.deploy(theta)
        if block < cfg.wait:
            rec.log(theta, mu_hat)
            break
        thetas.append(theta.copy())
        mus.append(mu_hat)
        grad = None
        avail = len(thetas) - 1
        H = avail if cfg.horizon is None else min(cfg.horizon, avail)
        if H >= d:
            try:
                jac = estimate_jac_direct(thetas, mus, H)
                grad = lt_gradient(spec, theta, mu_hat, jac, rng, cfg.mc_samples)
                last_grad = grad
            except DegenerateWindowError:
                diag["degenerate_steps"] += 1
        rec.log(theta, mu_hat, grad)
        step = clip_gradient(last_grad if grad is None else grad, cfg.clip_norm)
        noise = rng.standard_normal(d)
        if outer < n_perturb:
            step = step + cfg.perturbation * noise
        theta = project_box(theta - cfg.lr * step, lo, hi)
        outer += 1
    return rec.finish(cfg.method, opt_value, cfg, None, diag)


def sample_sphere(d: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal(d)
    return u / np.linalg.norm(u)


def run_dfo(spec: EnvironmentSpec, cfg: OptimizerConfig, rng: np.random.Generator,
            env: EnvState | None = None, opt_value: float | None = None) -> RunRecord:
    """One-point zeroth-order descent.

    Deploys ``theta_int + ps * u`` for ``wait`` steps, reads the realized
    loss on the last observed mean, and steps ``theta_int`` along
    ``-(d / ps) * loss * u``.
    """
    env, theta_int, lo, hi, opt_value = _setup(spec, cfg, rng, env, opt_value)
    d, ps = spec.d, cfg.perturbation
    rec = _Recorder(spec, env, cfg.T, internal=True)
    while rec.t < cfg.T:
        u = sample_sphere(d, rng)
        theta_q = project_box(theta_int + ps * u, lo, hi)
        block = min(cfg.wait, cfg.T - rec.t)
        for _ in range(block - 1):
            rec.log(theta_q, env.deploy(theta_q), theta_internal=theta_int)
        mu_hat = env.deploy(theta_q)
        if block < cfg.wait:
            rec.log(theta_q, mu_hat, theta_internal=theta_int)
            break
        realized = envs.instantaneous_loss(spec, theta_q, mu_hat)
        grad = (d / ps) * realized * u
        rec.log(theta_q, mu_hat, grad, theta_internal=theta_int)
        theta_int = project_box(theta_int - cfg.lr * grad, lo, hi)
    return rec.finish(cfg.method, opt_value, cfg, None, {})


RUNNERS = {
    "spgd": run_spgd,
    "bspgd": run_bspgd,
    "rgd": run_rgd,
    "perfgd": run_perfgd,
    "dfo": run_dfo,
}


def run(spec: EnvironmentSpec, cfg: OptimizerConfig, rng: np.random.Generator, **kwargs) -> RunRecord:
    return RUNNERS[cfg.method](spec, cfg, rng, **kwargs)


def deployments_to_tolerance(record: RunRecord, tol_frac: float) -> int | None:
    """First (1-based) deployment whose reported long-term loss is within ``tol_frac`` of OPT."""
    return first_within_tolerance(record.reported_loss, record.opt_value, tol_frac)


def first_within_tolerance(losses, opt_value: float, tol_frac: float) -> int | None:
    losses = np.asarray(losses, dtype=float)
    hits = np.nonzero(losses - opt_value <= tol_frac * abs(opt_value))[0]
    return int(hits[0]) + 1 if hits.size else None
