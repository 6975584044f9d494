import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfopt import environments as envs
from perfopt.environments import EnvironmentSpec, EnvState
from perfopt.errors import InvalidInputError
from perfopt.linalg import clip_gradient, project_box
from perfopt.optimizers import (
    METHODS,
    OptimizerConfig,
    deployments_to_tolerance,
    first_within_tolerance,
    run,
    run_spgd,
    sample_sphere,
)

D = 3


def linear(**kw):
    A = envs.random_psd_target(D, np.random.default_rng(0), b=np.full(D, 2.0))
    kw.setdefault("delta", 0.5)
    return EnvironmentSpec(variant="linear", d=D, A=A, b=np.full(D, 2.0), **kw)


def bottleneck(**kw):
    return EnvironmentSpec(variant="bottleneck", d=D, delta=0.5, mu0=np.ones(D) / np.sqrt(D), ridge=1.0, **kw)


def cfg(method, **kw):
    kw.setdefault("lr", 0.1)
    kw.setdefault("T", 30)
    if method in ("dfo",):
        kw.setdefault("perturbation", 0.1)
    return OptimizerConfig(method=method, mc_samples=200, **kw)


def spec_for(method):
    return bottleneck() if method == "bspgd" else linear()


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"method": "sgd", "lr": 0.1},
        {"method": "spgd", "lr": 0.0},
        {"method": "spgd", "lr": 0.1, "perturbation": -1.0},
        {"method": "perfgd", "lr": 0.1, "wait": 0},
        {"method": "spgd", "lr": 0.1, "T": 0},
        {"method": "dfo", "lr": 0.1},
        {"method": "spgd", "lr": 0.1, "clip_norm": 0.0},
    ])
    def test_rejects(self, kw):
        with pytest.raises(InvalidInputError):
            OptimizerConfig(**kw)

    def test_horizon_floor(self):
        with pytest.raises(InvalidInputError):
            cfg("spgd", horizon=2 * D - 1).check_for(linear())
        cfg("spgd", horizon=2 * D).check_for(linear())

    def test_bspgd_needs_bottleneck(self):
        with pytest.raises(InvalidInputError):
            cfg("bspgd").check_for(linear())

    def test_label(self):
        assert cfg("spgd", perturbation=0.01, horizon=7).label() == "spgd lr=0.1 ps=0.01 H=7"
        assert cfg("rgd").label() == "rgd lr=0.1"


class TestRunContract:
    @pytest.mark.parametrize("method", METHODS)
    def test_budget_and_box(self, method):
        spec = spec_for(method)
        rec = run(spec, cfg(method, perturbation=0.5, lr=1.0), np.random.default_rng(0))
        assert len(rec) == 30 and rec.theta.shape == (30, D)
        lo, hi = spec.bounds()
        assert np.all(rec.theta >= lo - 1e-12) and np.all(rec.theta <= hi + 1e-12)
        assert np.all(np.isfinite(rec.loss_long_term))

    @pytest.mark.parametrize("method", METHODS)
    def test_seed_determinism(self, method):
        spec = spec_for(method)
        c = cfg(method, perturbation=0.1)
        a = run(spec, c, np.random.default_rng(3), env=EnvState(spec, np.random.default_rng(4)))
        b = run(spec, c, np.random.default_rng(3), env=EnvState(spec, np.random.default_rng(4)))
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.loss_long_term, b.loss_long_term)

    @pytest.mark.parametrize("method", ["perfgd", "dfo"])
    @pytest.mark.parametrize("wait", [1, 4, 7])
    def test_waiting_keeps_budget(self, method, wait):
        rec = run(linear(), cfg(method, wait=wait, T=20), np.random.default_rng(0))
        assert len(rec) == 20

    def test_perfgd_repeats_model_within_block(self):
        rec = run(linear(), cfg("perfgd", wait=5, T=20, perturbation=1.0), np.random.default_rng(0))
        for start in range(0, 20, 5):
            block = rec.theta[start:start + 5]
            assert np.all(block == block[0])

    def test_long_term_loss_logged(self):
        spec = linear()
        rec = run(spec, cfg("spgd"), np.random.default_rng(0))
        for th, loss in zip(rec.theta, rec.loss_long_term):
            assert loss == pytest.approx(envs.long_term_loss(spec, th))


class TestSpgd:
    def test_gradient_fn_bypass_is_projected_gd(self):
        spec = linear(R=0.5)
        c = cfg("spgd", lr=0.3, clip_norm=1e6)
        grad = lambda th, mu: envs.long_term_grad(spec, th)
        rec = run_spgd(spec, c, np.random.default_rng(0), gradient_fn=grad)
        theta = np.zeros(D)
        lo, hi = spec.bounds()
        for t in range(len(rec)):
            np.testing.assert_allclose(rec.theta[t], theta, atol=1e-12)
            theta = project_box(theta - 0.3 * envs.long_term_grad(spec, theta), lo, hi)

    def test_bypass_with_clip(self):
        spec = linear()
        c = cfg("spgd", lr=0.1, clip_norm=0.5, T=2)
        grad = lambda th, mu: np.array([3.0, 4.0, 0.0])
        rec = run_spgd(spec, c, np.random.default_rng(0), gradient_fn=grad)
        np.testing.assert_allclose(rec.theta[1], rec.theta[0] - 0.1 * clip_gradient([3.0, 4.0, 0.0], 0.5))

    def test_noiseless_converges(self):
        spec = linear(sigma_err=0.0)
        theta_opt, value, _ = envs.opt_reference(spec)
        rec = run(spec, cfg("spgd", T=150, perturbation=0.01, horizon=2 * D + 2), np.random.default_rng(0))
        assert rec.final_frac_opt > 0.99

    def test_zero_perturbation_never_moves_from_rest(self):
        # with no exploration all models are equal and every window is degenerate
        rec = run(linear(), cfg("spgd", perturbation=0.0), np.random.default_rng(0))
        assert np.all(rec.theta == 0)
        assert rec.diagnostics["degenerate_steps"] > 0

    def test_bspgd_noiseless_jacobian(self):
        spec = bottleneck(sigma_err=0.0)
        rec = run(spec, cfg("bspgd", T=80, perturbation=0.01, lr=0.1), np.random.default_rng(0))
        assert rec.final_frac_opt > 0.98


class TestBaselines:
    def test_rgd_with_zero_mean_is_stationary(self):
        spec = EnvironmentSpec(variant="linear", d=2, delta=0.5, A=np.zeros((2, 2)), b=np.zeros(2), sigma_err=0.0)
        rec = run(spec, cfg("rgd", lr=0.5), np.random.default_rng(0), opt_value=-1.0)
        assert np.all(rec.theta == 0)

    def test_rgd_reaches_stable_point(self):
        spec = linear(sigma_err=0.0)
        rec = run(spec, cfg("rgd", lr=0.1, T=400), np.random.default_rng(0))
        np.testing.assert_allclose(rec.theta[-1], envs.stable_point(spec), atol=1e-3)

    def test_dfo_on_zero_loss_is_pure_probe(self):
        # L == 0 everywhere: the internal iterate never moves
        spec = EnvironmentSpec(variant="linear", d=2, delta=0.5, A=np.zeros((2, 2)), b=np.zeros(2), sigma_err=0.0)
        rec = run(spec, cfg("dfo", perturbation=0.3), np.random.default_rng(0), opt_value=-1.0)
        assert np.all(rec.theta_internal == 0)
        np.testing.assert_allclose(np.linalg.norm(rec.theta, axis=1), 0.3)

    def test_dfo_reports_internal(self):
        rec = run(linear(), cfg("dfo"), np.random.default_rng(0))
        np.testing.assert_array_equal(rec.reported_loss, rec.loss_long_term_internal)
        assert rec.final_frac_opt == pytest.approx(rec.frac_opt_internal[-1])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_sphere(self, d, seed):
        assert np.linalg.norm(sample_sphere(d, np.random.default_rng(seed))) == pytest.approx(1.0)


class TestTolerance:
    @pytest.mark.parametrize("losses, opt, tol, expected", [
        ([0.0, -0.5, -0.96, -1.0], -1.0, 0.05, 3),
        ([0.0, -0.5], -1.0, 0.05, None),
        ([-1.0], -1.0, 0.0, 1),
        ([0.3, 0.21, 0.2], 0.2, 0.02, 3),
    ])
    def test_first_within(self, losses, opt, tol, expected):
        assert first_within_tolerance(losses, opt, tol) == expected

    def test_record_helper(self):
        rec = run(linear(sigma_err=0.0), cfg("rgd", lr=0.1, T=5), np.random.default_rng(0))
        assert deployments_to_tolerance(rec, 10.0) == 1
