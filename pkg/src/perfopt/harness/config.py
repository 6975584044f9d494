"""Experiment configuration: file format, built-in presets, grids and seeds.

A config file is YAML (JSON is accepted too, being a subset). Minimal example::

    preset: linear          # start from a built-in preset
    id: linear-k64
    trials: 3
    environment:
      k_settle: 64          # sets delta = 1 - 0.01 ** (1 / k_settle)
    methods: [spgd, rgd]
    grid:
      lr: [0.1, 0.0316]

Keys given in the file override the preset; nested mappings are merged.
Unknown keys are rejected. ``optimizers`` lists explicit runs; when it is
empty the grid is expanded instead.
"""

from __future__ import annotations

import copy
import itertools
import json
import math
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from perfopt.environments import EnvironmentSpec, Variant, delta_for_settle, random_psd_target
from perfopt.errors import InvalidInputError
from perfopt.optimizers import METHODS, OptimizerConfig

Horizon = Union[int, Literal["full"]]


class ConfigError(InvalidInputError):
    """Raised for unreadable or invalid configuration files."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvConfig(_Strict):
    """Environment constants. ``A`` may be a matrix, ``random_psd`` or ``identity``.

    For the named forms the matrix is ``-A_scale * P`` with ``P`` either the
    identity or ``G G^T / d + I`` drawn with ``A_seed``.
    """

    variant: Variant
    d: int = Field(gt=0)
    delta: Optional[float] = Field(default=None, gt=0, lt=1)
    k_settle: Optional[float] = Field(default=None, gt=0)
    A: Union[Literal["random_psd", "identity"], list[list[float]], None] = None
    A_scale: float = 0.8
    A_seed: int = 0
    b: Union[float, list[float], None] = None
    mu_orig: Optional[list[float]] = None
    mu_other: Optional[list[float]] = None
    spam_fraction: float = 0.5
    eps: float = 0.0
    alpha: Optional[float] = None
    ridge: float = Field(default=0.0, ge=0)
    mu0: Union[Literal["uniform"], list[float], None] = None
    Sigma: Optional[list[list[float]]] = None
    R: float = Field(default=5.0, gt=0)
    sigma_err: float = Field(default=1e-3, ge=0)
    observation: Literal["noise", "sample"] = "noise"
    n_samples: int = Field(default=1000, gt=0)
    mu_init: Optional[list[float]] = None

    @model_validator(mode="after")
    def _delta_source(self):
        if self.delta is not None and self.k_settle is not None:
            raise ValueError("give either delta or k_settle, not both")
        if self.delta is None and self.k_settle is None:
            raise ValueError("one of delta or k_settle is required")
        return self

    def resolved_delta(self) -> float:
        return self.delta if self.delta is not None else delta_for_settle(self.k_settle)

    def build(self) -> EnvironmentSpec:
        d = self.d
        A = self.A
        if A == "identity":
            A = -self.A_scale * np.eye(d)
        elif A == "random_psd":
            b = self._b_vector()
            A = random_psd_target(d, np.random.default_rng(self.A_seed), scale=self.A_scale, R=self.R, b=b)
        mu0 = self.mu0
        if mu0 == "uniform":
            mu0 = np.ones(d) / math.sqrt(d)
        return EnvironmentSpec(
            variant=self.variant,
            d=d,
            delta=self.resolved_delta(),
            A=A,
            b=self._b_vector(),
            mu_orig=self.mu_orig,
            mu_other=self.mu_other,
            spam_fraction=self.spam_fraction,
            eps=self.eps,
            alpha=self.alpha,
            ridge=self.ridge,
            mu0=mu0,
            Sigma=self.Sigma,
            R=self.R,
            sigma_err=self.sigma_err,
            observation=self.observation,
            n_samples=self.n_samples,
            mu_init=self.mu_init,
        )

    def _b_vector(self):
        if self.b is None:
            return None
        if isinstance(self.b, (int, float)):
            return np.full(self.d, float(self.b))
        return np.asarray(self.b, dtype=float)


class OptimizerEntry(_Strict):
    method: Literal[METHODS]  # type: ignore[valid-type]
    lr: float = Field(gt=0)
    perturbation: float = Field(default=0.0, ge=0)
    horizon: Optional[Horizon] = "full"
    wait: int = Field(default=1, ge=1)
    init_steps: Optional[int] = Field(default=None, ge=0)
    clip_norm: Optional[float] = Field(default=None, gt=0)
    fixed_anchor: Optional[bool] = None

    def build(self, T: int, clip_norm: float, mc_samples: int) -> OptimizerConfig:
        return OptimizerConfig(
            method=self.method,
            lr=self.lr,
            perturbation=self.perturbation,
            horizon=None if self.horizon in (None, "full") else int(self.horizon),
            wait=self.wait,
            init_steps=self.init_steps,
            clip_norm=self.clip_norm if self.clip_norm is not None else clip_norm,
            T=T,
            fixed_anchor=self.fixed_anchor,
            mc_samples=mc_samples,
        )


def _decade_halves(ks) -> list[float]:
    return [10.0 ** (-k / 2) for k in ks]


class GridSpec(_Strict):
    """Per-method hyperparameter grids; ``None`` horizons are derived from ``d``.

    Defaults: ``lr`` in ``10^{-k/2}, k = 1..6``; ``wait`` in ``{1, 5, 10, 20}``;
    DFO radius in ``10^{-k/2}, k = 0..3``; SPGD perturbation in
    ``{0} U 10^{-k/2}, k = 0..3``; PerfGD horizon ``d..2d`` plus full; SPGD
    horizon ``2d..3d`` plus full. BSPGD reuses the SPGD grid with horizon
    ``(d+1)..(2d+1)`` plus full, the same offsets from its regressor count.
    PerfGD's perturbation is not searched (``perfgd_ps``).
    """

    lr: list[float] = Field(default_factory=lambda: _decade_halves(range(1, 7)), min_length=1)
    wait: list[int] = Field(default_factory=lambda: [1, 5, 10, 20], min_length=1)
    dfo_ps: list[float] = Field(default_factory=lambda: _decade_halves(range(0, 4)), min_length=1)
    spgd_ps: list[float] = Field(default_factory=lambda: [0.0] + _decade_halves(range(0, 4)), min_length=1)
    perfgd_ps: list[float] = Field(default_factory=lambda: [1.0], min_length=1)
    pgd_H: Optional[list[Horizon]] = None
    spgd_H: Optional[list[Horizon]] = None
    bspgd_H: Optional[list[Horizon]] = None

    @field_validator("lr", "dfo_ps")
    @classmethod
    def _positive(cls, v):
        if any(x <= 0 for x in v):
            raise ValueError("values must be positive")
        return v

    @field_validator("wait")
    @classmethod
    def _wait(cls, v):
        if any(x < 1 for x in v):
            raise ValueError("waits must be >= 1")
        return v

    def horizons(self, method: str, d: int) -> list[Horizon]:
        given = {"perfgd": self.pgd_H, "spgd": self.spgd_H, "bspgd": self.bspgd_H}[method]
        if given is not None:
            return list(given)
        lo = {"perfgd": d, "spgd": 2 * d, "bspgd": d + 1}[method]
        return list(range(lo, lo + d + 1)) + ["full"]

    def cells(self, method: str, d: int) -> list[OptimizerEntry]:
        """All grid cells for ``method`` in a fixed, documented order."""
        if method == "rgd":
            return [OptimizerEntry(method="rgd", lr=lr) for lr in self.lr]
        if method == "dfo":
            return [OptimizerEntry(method="dfo", lr=lr, perturbation=ps, wait=w)
                    for lr, w, ps in itertools.product(self.lr, self.wait, self.dfo_ps)]
        if method == "perfgd":
            return [OptimizerEntry(method="perfgd", lr=lr, perturbation=ps, wait=w, horizon=H)
                    for lr, w, H, ps in itertools.product(self.lr, self.wait, self.horizons(method, d),
                                                          self.perfgd_ps)]
        return [OptimizerEntry(method=method, lr=lr, perturbation=ps, horizon=H)
                for lr, ps, H in itertools.product(self.lr, self.spgd_ps, self.horizons(method, d))]


class MetricsConfig(_Strict):
    tol_fracs: list[float] = Field(default_factory=lambda: [0.02, 0.05])


class OutputConfig(_Strict):
    out_dir: str = "results"
    format: Literal["csv", "json", "both"] = "both"
    rows: Literal["all", "best"] = "all"


class ExperimentConfig(_Strict):
    id: str = "experiment"
    preset: Optional[str] = None
    environment: EnvConfig
    methods: list[Literal[METHODS]] = Field(min_length=1)  # type: ignore[valid-type]
    optimizers: list[OptimizerEntry] = Field(default_factory=list)
    grid: GridSpec = Field(default_factory=GridSpec)
    trials: int = Field(default=5, ge=1)
    master_seed: int = Field(default=0, ge=0)
    T: int = Field(default=50, ge=1)
    clip_norm: float = Field(default=10.0, gt=0)
    mc_samples: int = Field(default=10_000, ge=1)
    k_list: Optional[list[float]] = None
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def _check(self):
        if self.k_list is not None and (not self.k_list or min(self.k_list) <= 0):
            raise ValueError("k_list must be a nonempty list of positive numbers")
        for entry in self.optimizers:
            if entry.method not in self.methods:
                raise ValueError(f"optimizer method {entry.method!r} is not listed in methods")
        return self

    def build_spec(self) -> EnvironmentSpec:
        return self.environment.build()

    def with_k(self, k: float) -> "ExperimentConfig":
        env = self.environment.model_copy(update={"k_settle": float(k), "delta": None})
        return self.model_copy(update={"environment": env, "id": f"{self.id}-k{k:g}"})

    def entries(self, method: str, use_grid: bool) -> list[OptimizerEntry]:
        explicit = [e for e in self.optimizers if e.method == method]
        if explicit and not use_grid:
            return explicit
        return self.grid.cells(method, self.environment.d)

    def optimizer_configs(self, method: str, use_grid: bool) -> list[OptimizerConfig]:
        return [e.build(self.T, self.clip_norm, self.mc_samples) for e in self.entries(method, use_grid)]


# ----------------------------------------------------------------------------
# presets
# ----------------------------------------------------------------------------

_LINEAR_ENV = {"variant": "linear", "d": 5, "R": 5.0, "A": "random_psd", "A_scale": 0.8, "A_seed": 0,
               "b": 2.0, "sigma_err": 1e-3, "k_settle": 8}

PRESETS: dict[str, dict[str, Any]] = {
    "linear": {
        "id": "linear",
        "environment": dict(_LINEAR_ENV),
        "methods": ["spgd", "rgd", "perfgd", "dfo"],
        "trials": 5,
        "T": 50,
        "k_list": [1, 2, 4, 8, 16, 32, 64],
    },
    "linear-extended": {
        "id": "linear-extended",
        "environment": dict(_LINEAR_ENV),
        "methods": ["spgd", "rgd", "perfgd", "dfo"],
        "trials": 5,
        "T": 50,
        "k_list": [1, 2, 4, 8, 16, 32, 64, 128, 256, 512],
    },
    "nonlinear": {
        "id": "nonlinear",
        "environment": {"variant": "nonlinear", "d": 5, "R": 5.0, "A": "identity", "A_scale": 0.8,
                        "b": 2.0, "sigma_err": 1e-3, "delta": 0.684},
        "methods": ["spgd", "rgd", "perfgd", "dfo"],
        "trials": 50,
        "T": 50,
        "clip_norm": 10.0,
    },
    "spam": {
        "id": "spam",
        "environment": {"variant": "spam", "d": 2, "R": 3.0, "mu_orig": [2.0, 1.0], "mu_other": [1.0, 2.0],
                        "spam_fraction": 0.5, "eps": -2.0, "alpha": -2.0, "ridge": 0.1, "delta": 0.25,
                        "sigma_err": 1e-3},
        "methods": ["spgd", "rgd", "perfgd", "dfo"],
        "trials": 50,
        "T": 50,
    },
    "bottleneck": {
        "id": "bottleneck",
        "environment": {"variant": "bottleneck", "d": 5, "mu0": "uniform", "ridge": 1.0, "delta": 0.5,
                        "sigma_err": 1e-3},
        "methods": ["spgd", "bspgd"],
        "trials": 10,
        "T": 50,
    },
    "oscillating": {
        "id": "oscillating",
        "environment": dict(_LINEAR_ENV, variant="oscillating", k_settle=None, delta=0.134),
        "methods": ["spgd", "rgd", "perfgd", "dfo"],
        "trials": 5,
        "T": 50,
    },
}

PRESET_NOTES = {
    "linear": "affine mean map, A = -0.8 x random PSD, b = 2 x ones, d = 5",
    "linear-extended": "linear preset swept to slower settling (k up to 512)",
    "nonlinear": "state-dependent mixing weight delta^(mu_i^2), A = -0.8 I, 50 trials",
    "spam": "strategic spam classification, d = 2, ridge 0.1, 50 trials",
    "bottleneck": "shift through the scalar score theta . mu, lambda = 1",
    "oscillating": "mean map with a negative state coefficient, delta = 0.134",
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _drop_none_delta(env: dict) -> dict:
    # an override giving delta replaces a preset's k_settle and vice versa
    env = {k: v for k, v in env.items() if v is not None}
    return env


def resolve(raw: dict) -> dict:
    """Fill defaults from the named preset (if any) without validating."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    name = raw.get("preset")
    if name is None:
        return dict(raw)
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = copy.deepcopy(PRESETS[name])
    env_over = raw.get("environment", {}) or {}
    if isinstance(env_over, dict) and ("delta" in env_over or "k_settle" in env_over):
        base["environment"].pop("delta", None)
        base["environment"].pop("k_settle", None)
    merged = _merge(base, raw)
    if isinstance(merged.get("environment"), dict):
        merged["environment"] = _drop_none_delta(merged["environment"])
    return merged


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(resolve(raw))
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None
    except InvalidInputError as err:
        raise ConfigError(str(err)) from None


def preset_config(name: str) -> ExperimentConfig:
    return config_from_dict({"preset": name})


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read a config file, or ``preset:<name>`` for a built-in preset.

    A JSON summary written by :func:`perfopt.harness.emit.emit_summary_json`
    is accepted as well; its embedded ``config`` block is used.
    """
    text_path = str(path)
    if text_path.startswith("preset:"):
        return preset_config(text_path.split(":", 1)[1])
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror or err}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: parse error: {err}") from None
    if isinstance(raw, dict) and "config" in raw and "methods" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]
    try:
        return config_from_dict(raw if raw is not None else {})
    except ConfigError as err:
        raise ConfigError(f"{path}: {err}") from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved config as plain data.

    ``preset`` is dropped since everything is explicit, and so is ``output``,
    which only says where results go and must not change their bytes.
    """
    out = json.loads(cfg.model_dump_json())
    out.pop("preset", None)
    out.pop("output", None)
    return out


# ----------------------------------------------------------------------------
# seeds
# ----------------------------------------------------------------------------

_ENV_STREAM, _OPT_STREAM = 0, 1


def env_seed(master_seed: int, trial: int) -> np.random.SeedSequence:
    """Environment noise stream; shared by every method and cell of a trial."""
    return np.random.SeedSequence(master_seed, spawn_key=(_ENV_STREAM, trial))


def trial_seed(master_seed: int, method: str, cell: int, trial: int) -> np.random.SeedSequence:
    """Optimizer stream, a pure function of ``(master_seed, method, cell, trial)``."""
    return np.random.SeedSequence(master_seed, spawn_key=(_OPT_STREAM, METHODS.index(method), cell, trial))
