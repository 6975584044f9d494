"""Property checks run by ``perfopt validate`` and by the acceptance tests.

Each check returns a :class:`CheckResult`; all use fixed seeds so the
outcome is reproducible.
"""

from __future__ import annotations

import contextlib
import filecmp
import io
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from perfopt import environments as envs
from perfopt.environments import EnvironmentSpec, Variant
from perfopt.estimators import (
    PartialsEstimate,
    TrajectoryWindow,
    estimate_lt_grad_closed_linear,
    estimate_lt_grad_mc,
    estimate_lt_jacobian,
    estimate_partials,
    neumann_partial_sum,
)
from perfopt.linalg import project_box, spectral_norm
from perfopt.optimizers import OptimizerConfig, run_rgd, run_spgd
from perfopt.oracles import OracleReport, fd_gradient, mc_expectation, settle_mu


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


# ----------------------------------------------------------------------------
# checks on the OPT reference of an environment
# ----------------------------------------------------------------------------

def opt_checks(spec: EnvironmentSpec, theta_opt, seed: int = 0) -> list[OracleReport]:
    """Fixed-point, first-order and gradient-consistency checks around ``theta_opt``."""
    theta_opt = np.asarray(theta_opt, dtype=float)
    lo, hi = spec.bounds()
    reports = []
    mu_star = envs.long_term_mean(spec, theta_opt)
    resid = float(np.linalg.norm(envs.mean_map(spec, theta_opt, mu_star) - mu_star))
    reports.append(OracleReport("fixed_point_residual", resid, "mean_map(theta_opt, mu_star) - mu_star",
                                0.0, 0.0, 1e-10, resid <= 1e-10))
    f = lambda th: envs.long_term_loss(spec, th)  # noqa: E731
    g = fd_gradient(f, theta_opt, 1e-5)
    pg = float(np.linalg.norm(theta_opt - project_box(theta_opt - g, lo, hi)))
    reports.append(OracleReport("projected_gradient_at_opt", pg, "central differences", 1e-5, 1e-8, 1e-5,
                                pg <= 1e-5))
    rng = np.random.default_rng(seed)
    theta = rng.uniform(lo, hi) if spec.variant is Variant.BOTTLENECK else rng.uniform(lo, hi) * 0.5
    if spec.is_linear_loss:
        jac = envs.long_term_jacobian(spec, theta)
        closed = estimate_lt_grad_closed_linear(theta, envs.long_term_mean(spec, theta), jac, spec.ridge).grad
        fd = fd_gradient(f, theta, 1e-5)
        rel = float(np.linalg.norm(closed - fd) / max(np.linalg.norm(fd), 1e-12))
        reports.append(OracleReport("fd_vs_closed_form_gradient", rel, "central differences", 1e-5, 1e-8, 1e-5,
                                    rel < 1e-5))
    else:
        rep = _spam_mc_loss(spec, theta_opt, n=100_000, seed=seed)
        gap = abs(rep.value - envs.long_term_loss(spec, theta_opt))
        reports.append(OracleReport("mc_vs_quadrature_loss_at_opt", gap, "monte-carlo", rep.samples_or_step,
                                    rep.error_bound, 3 * rep.error_bound, gap <= 3 * rep.error_bound))
    return reports


def _spam_mc_loss(spec: EnvironmentSpec, theta, n: int, seed) -> OracleReport:
    """Monte-Carlo long-term spam loss with a balanced draw from both classes."""
    theta = np.asarray(theta, dtype=float)
    mu_spam = envs.long_term_mean(spec, theta)
    p = spec.spam_fraction
    rng = np.random.default_rng(seed)
    spam = mc_expectation(lambda z: envs._softplus(-(z @ theta)), mu_spam, spec.Sigma, n, rng)
    ham = mc_expectation(lambda z: envs._softplus(z @ theta), spec.mu_other, spec.Sigma, n, rng)
    value = p * spam.value + (1 - p) * ham.value + 0.5 * spec.ridge * float(theta @ theta)
    se = float(np.hypot(p * spam.error_bound, (1 - p) * ham.error_bound))
    return OracleReport("spam_long_term_loss", value, "monte-carlo", float(n), se)


# ----------------------------------------------------------------------------
# estimator and dynamics properties
# ----------------------------------------------------------------------------

def _random_linear_spec(rng: np.random.Generator, d: int) -> EnvironmentSpec:
    A = envs.random_psd_target(d, rng)
    return EnvironmentSpec(variant="linear", d=d, delta=float(rng.uniform(0.05, 0.95)), A=A,
                           b=rng.normal(size=d), sigma_err=0.0)


def check_estimator_exactness(instances: int = 50, tol: float = 1e-8, seed: int = 7) -> CheckResult:
    """Noiseless affine map: partials and long-term Jacobian recovered exactly."""
    rng = np.random.default_rng(seed)
    worst_p = worst_j = 0.0
    for _ in range(instances):
        d = int(rng.integers(1, 7))
        spec = _random_linear_spec(rng, d)
        H = 2 * d + int(rng.integers(0, d + 1))
        window = TrajectoryWindow(model_dim=d)
        for _ in range(H + 1):
            theta, mu_prev = rng.normal(size=d), rng.normal(size=d)
            window.append(np.concatenate([theta, mu_prev]), envs.mean_map(spec, theta, mu_prev))
        est = estimate_partials(window, H)
        d1, d2 = envs.map_partials(spec, np.zeros(d), np.zeros(d))
        worst_p = max(worst_p, np.max(np.abs(est.d1m - d1)), np.max(np.abs(est.d2m - d2)))
        worst_j = max(worst_j, np.max(np.abs(estimate_lt_jacobian(est) - spec.A)))
    ok = worst_p <= tol and worst_j <= tol
    return CheckResult("estimator exactness", ok,
                       f"max partials error {worst_p:.2e}, max Jacobian error {worst_j:.2e} (tol {tol:g})")


def check_neumann(instances: int = 50, k: int = 50, seed: int = 8) -> CheckResult:
    """Long-term Jacobian vs the k-term partial sum, within the geometric tail."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(instances):
        d = int(rng.integers(1, 7))
        d1 = rng.normal(size=(d, d))
        d2 = rng.normal(size=(d, d))
        r = rng.uniform(0.05, 0.95)
        d2 *= r / spectral_norm(d2)
        p = PartialsEstimate(d1, d2)
        gap = spectral_norm(estimate_lt_jacobian(p) - neumann_partial_sum(p, k))
        bound = r ** k / (1 - r) * spectral_norm(d1)
        worst = max(worst, gap - bound - 1e-12 * (1 + spectral_norm(d1)))
    return CheckResult("Neumann equivalence", worst <= 0, f"max (gap - tail bound) {worst:.2e}")


def analytic_specs(seed: int = 0) -> list[EnvironmentSpec]:
    """One instance of each environment with a closed-form long-term loss."""
    rng = np.random.default_rng(seed)
    d = 5
    b = np.full(d, 2.0)
    A = envs.random_psd_target(d, rng, b=b)
    return [
        EnvironmentSpec(variant="linear", d=d, delta=0.3, A=A, b=b),
        EnvironmentSpec(variant="nonlinear", d=d, delta=0.684, A=-0.8 * np.eye(d), b=b),
        EnvironmentSpec(variant="oscillating", d=d, delta=0.134, A=A, b=b),
        EnvironmentSpec(variant="bottleneck", d=d, delta=0.5, mu0=np.ones(d) / np.sqrt(d), ridge=1.0),
    ]


def all_specs(seed: int = 0) -> list[EnvironmentSpec]:
    spam = EnvironmentSpec(variant="spam", d=2, delta=0.25, mu_orig=[2.0, 1.0], mu_other=[1.0, 2.0],
                           eps=-2.0, ridge=0.1, R=3.0)
    return analytic_specs(seed) + [spam]


def check_gradient_fidelity(n: int = 1_000_000, seed: int = 9) -> CheckResult:
    """Closed-form vs finite differences (1e-5 relative) and Monte-Carlo (3 SE) at exact inputs."""
    rng = np.random.default_rng(seed)
    worst_rel, worst_z, worst_fd_z = 0.0, 0.0, 0.0
    for spec in analytic_specs():
        lo, hi = spec.bounds()
        theta = rng.uniform(lo, hi) if spec.variant is Variant.BOTTLENECK else rng.uniform(-1, 1, spec.d)
        mu = envs.long_term_mean(spec, theta)
        jac = envs.long_term_jacobian(spec, theta)
        closed = estimate_lt_grad_closed_linear(theta, mu, jac, spec.ridge).grad
        fd = fd_gradient(lambda th: envs.long_term_loss(spec, th), theta, 1e-5)
        worst_rel = max(worst_rel, np.linalg.norm(closed - fd) / np.linalg.norm(fd))
        mc = estimate_lt_grad_mc(envs.linear_point_loss(spec.ridge), theta, mu, jac, spec.Sigma, n, rng)
        se = mc.diagnostics["se"]
        worst_z = max(worst_z, np.max(np.abs(mc.grad - closed) / se))
        worst_fd_z = max(worst_fd_z, np.max(np.abs(mc.grad - fd) / se))
    ok = worst_rel <= 1e-5 and worst_z <= 3 and worst_fd_z <= 3
    return CheckResult("gradient fidelity", ok,
                       f"closed vs fd rel {worst_rel:.2e}; |MC - closed| {worst_z:.2f} SE; "
                       f"|MC - fd| {worst_fd_z:.2f} SE")


def _settle_envelope_ratio(spec: EnvironmentSpec, theta, mu0, k_max: int) -> float:
    """Largest ratio of observed error to the geometric envelope over ``k <= k_max``."""
    mu_star = envs.long_term_mean(spec, theta)
    e0 = np.linalg.norm(mu0 - mu_star)
    if e0 == 0:
        return 0.0
    worst = 0.0
    mu = np.array(mu0, dtype=float)
    env = 1.0
    for _ in range(k_max):
        if spec.variant is Variant.NONLINEAR:
            r = float(np.max(1 - spec.delta ** (mu ** 2)))
        elif spec.variant is Variant.BOTTLENECK:
            r = float(np.linalg.norm(theta))
        else:
            r = 1 - spec.delta
        mu = envs.mean_map(spec, theta, mu)
        env *= r
        err = np.linalg.norm(mu - mu_star)
        worst = max(worst, err / (e0 * env) if env > 0 else (np.inf if err > 1e-300 else 0.0))
    return worst


def check_settling(draws: int = 20, k_max: int = 30, seed: int = 10) -> CheckResult:
    """``|m^k - mu*| <= r^k |mu_0 - mu*|`` on every environment; equality for affine maps."""
    rng = np.random.default_rng(seed)
    worst, worst_eq = 0.0, 0.0
    for spec in all_specs():
        lo, hi = spec.bounds()
        for _ in range(draws):
            theta = rng.uniform(lo, hi)
            mu0 = rng.normal(size=spec.d) * 2
            ratio = _settle_envelope_ratio(spec, theta, mu0, k_max)
            worst = max(worst, ratio)
            if spec.variant in (Variant.LINEAR, Variant.OSCILLATING, Variant.SPAM):
                k = int(rng.integers(1, k_max))
                mu_star = envs.long_term_mean(spec, theta)
                err = np.linalg.norm(settle_mu(spec, theta, mu0, k) - mu_star)
                expect = (1 - spec.delta) ** k * np.linalg.norm(mu0 - mu_star)
                worst_eq = max(worst_eq, abs(err - expect) / expect)
    ok = worst <= 1 + 1e-9 and worst_eq <= 1e-9
    return CheckResult("geometric settling", ok,
                       f"max error/envelope {worst:.6f}; affine equality rel dev {worst_eq:.1e}")


def linear_preset_spec(k_settle: float = 8, sigma_err: float = 1e-3) -> EnvironmentSpec:
    from perfopt.harness.config import preset_config

    cfg = preset_config("linear")
    env = cfg.environment.model_copy(update={"k_settle": float(k_settle), "delta": None, "sigma_err": sigma_err})
    return env.build()


def check_rgd_stable_point(T: int = 1000, lr: float = 0.1, seed: int = 11) -> CheckResult:
    """RGD ends at the clamped stable point ``-A^{-1} b``, away from ``theta_OPT``."""
    spec = linear_preset_spec(k_settle=1)
    lo, hi = spec.bounds()
    target = project_box(envs.stable_point(spec), lo, hi)
    theta_opt = envs.opt_reference(spec)[0]
    rec = run_rgd(spec, OptimizerConfig("rgd", lr, T=T), np.random.default_rng(seed))
    # the record holds deployed models; apply the last update to get the final iterate
    final = project_box(rec.theta[-1] - lr * rec.grad_estimate[-1], lo, hi)
    dist = float(np.linalg.norm(final - target))
    gap = float(np.linalg.norm(target - theta_opt))
    return CheckResult("RGD stable point", dist <= 1e-2 and gap > 1e-2,
                       f"|theta_T - stable| = {dist:.2e}, |stable - OPT| = {gap:.3f}")


def check_gradient_trend(Ts=(50, 200, 800), seeds: int = 20, lr: float = 0.1, ps: float = 0.1,
                         horizon: int = 15) -> CheckResult:
    """Running-min of the true ``|grad L*|^2`` averaged over seeds is non-increasing in T."""
    spec = linear_preset_spec(k_settle=8, sigma_err=0.0)
    means = []
    for T in Ts:
        vals = []
        for s in range(seeds):
            rec = run_spgd(spec, OptimizerConfig("spgd", lr, ps, horizon, T=T), np.random.default_rng(s))
            sq = [float(np.sum(envs.long_term_grad(spec, th) ** 2)) for th in rec.theta]
            vals.append(min(sq))
        means.append(float(np.mean(vals)))
    ok = all(b <= a for a, b in zip(means, means[1:]))
    return CheckResult("rate trend", ok, "mean running-min |grad L*|^2: "
                       + ", ".join(f"T={T}: {m:.3e}" for T, m in zip(Ts, means)))


DETERMINISM_CONFIG = {
    "preset": "linear",
    "id": "determinism",
    "trials": 2,
    "T": 30,
    "master_seed": 123,
    "methods": ["spgd", "rgd", "perfgd", "dfo"],
    "optimizers": [
        {"method": "spgd", "lr": 0.1, "perturbation": 0.1, "horizon": 12},
        {"method": "rgd", "lr": 0.1},
        {"method": "perfgd", "lr": 0.1, "perturbation": 1.0, "wait": 5},
        {"method": "dfo", "lr": 0.01, "perturbation": 1.0, "wait": 5},
    ],
}


def check_determinism() -> CheckResult:
    """``run`` twice with the same seed (serial, then two workers) gives identical files."""
    from perfopt.harness.cli import main

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg_path = tmp / "config.yaml"
        cfg_path.write_text(yaml.safe_dump(DETERMINISM_CONFIG))
        with contextlib.redirect_stdout(io.StringIO()):
            codes = [main(["run", str(cfg_path), "--out-dir", str(tmp / name), "--threads", threads,
                           "--format", "both"])
                     for name, threads in (("a", "1"), ("b", "2"))]
        if any(codes):
            return CheckResult("determinism", False, f"run exited with {codes}")
        names = sorted(p.name for p in (tmp / "a").iterdir())
        match, mismatch, errors = filecmp.cmpfiles(tmp / "a", tmp / "b", names, shallow=False)
        ok = bool(names) and not mismatch and not errors
        return CheckResult("determinism", ok, f"{len(match)} identical files, mismatched {mismatch + errors}")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "7": check_estimator_exactness,
    "8": check_neumann,
    "9": check_gradient_fidelity,
    "10": check_settling,
    "11": check_rgd_stable_point,
    "12": check_gradient_trend,
    "13": check_determinism,
}


def run_all() -> list[CheckResult]:
    return [fn() for fn in CHECKS.values()]
