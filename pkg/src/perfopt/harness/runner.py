"""Seeded multi-trial execution and aggregation."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from perfopt import environments as envs
from perfopt.environments import EnvironmentSpec, EnvState
from perfopt.errors import PerfOptError
from perfopt.harness.config import ExperimentConfig, env_seed, trial_seed
from perfopt.optimizers import OptimizerConfig, RunRecord, first_within_tolerance, run

logger = logging.getLogger(__name__)


class ExperimentError(PerfOptError):
    """Every trial of some grid cell failed."""


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def _mean_se(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = rows.mean(axis=0)
    if rows.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, rows.std(axis=0, ddof=1) / np.sqrt(rows.shape[0])


@dataclass
class CellResult:
    """All trials of one (method, grid cell). Failed trials are ``None``."""

    method: str
    cell: int
    config: OptimizerConfig
    records: list[Optional[RunRecord]]

    @property
    def ok(self) -> list[RunRecord]:
        return [r for r in self.records if r is not None]

    @property
    def failures(self) -> int:
        return sum(r is None for r in self.records)

    def _stack(self, attr: str) -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.ok])

    def curve(self, attr: str) -> tuple[np.ndarray, np.ndarray]:
        """Mean and standard error over trials of a per-step quantity."""
        return _mean_se(self._stack(attr))

    @property
    def final_loss(self) -> tuple[float, float]:
        mean, se = self.curve("reported_loss")
        return float(mean[-1]), float(se[-1])

    @property
    def final_frac_opt(self) -> tuple[float, float]:
        finals = np.array([r.final_frac_opt for r in self.ok])
        mean, se = _mean_se(finals[:, None])
        return float(mean[0]), float(se[0])

    def deployments_to_tolerance(self, tol_frac: float) -> dict:
        """First deployment within ``tol_frac`` of OPT on the mean curve, plus per trial."""
        opt = self.ok[0].opt_value
        mean, _ = self.curve("reported_loss")
        return {
            "mean_curve": first_within_tolerance(mean, opt, tol_frac),
            "per_trial": [None if r is None else first_within_tolerance(r.reported_loss, opt, tol_frac)
                          for r in self.records],
        }


@dataclass
class AggregateResult:
    experiment: str
    spec: EnvironmentSpec
    opt_theta: np.ndarray
    opt_value: float
    opt_provenance: str
    master_seed: int
    trials: int
    T: int
    cells: list[CellResult]
    best: dict[str, CellResult] = field(default_factory=dict)
    tol_fracs: tuple[float, ...] = (0.02, 0.05)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(c.method for c in self.cells))

    def cells_for(self, method: str) -> list[CellResult]:
        return [c for c in self.cells if c.method == method]


def select_best(cells: list[CellResult]) -> dict[str, CellResult]:
    """Per method, the cell with the lowest mean final long-term loss (first wins ties)."""
    best: dict[str, CellResult] = {}
    for cell in cells:
        if not cell.ok:
            continue
        cur = best.get(cell.method)
        if cur is None or cell.final_loss[0] < cur.final_loss[0]:
            best[cell.method] = cell
    return best


def _run_job(job) -> Optional[RunRecord]:
    spec, cfg, method, cell, trial, master_seed, opt_value = job
    rng = np.random.default_rng(trial_seed(master_seed, method, cell, trial))
    theta0 = np.zeros(spec.d) if cfg.theta0 is None else np.asarray(cfg.theta0)
    lo, hi = spec.bounds()
    env = EnvState(spec, np.random.default_rng(env_seed(master_seed, trial)), theta0=np.clip(theta0, lo, hi))
    try:
        with np.errstate(over="raise", invalid="raise"):
            record = run(spec, cfg, rng, env=env, opt_value=opt_value)
    except (PerfOptError, ArithmeticError, np.linalg.LinAlgError) as err:
        logger.warning("%s cell %d trial %d failed: %s", method, cell, trial, err)
        return None
    if not np.all(np.isfinite(record.reported_loss)):
        logger.warning("%s cell %d trial %d produced non-finite losses", method, cell, trial)
        return None
    record.seed = {"master_seed": master_seed, "method": method, "cell": cell, "trial": trial}
    return record


def run_cells(spec: EnvironmentSpec, plan: list[tuple[str, list[OptimizerConfig]]], trials: int,
              master_seed: int, opt_value: float, threads: int = 1) -> list[CellResult]:
    """Run every (method, cell, trial) job and regroup by cell in plan order.

    Results do not depend on ``threads``: each job seeds itself from its
    coordinates and results are collected in submission order.
    """
    jobs, index = [], []
    for method, configs in plan:
        for c, cfg in enumerate(configs):
            for trial in range(trials):
                jobs.append((spec, cfg, method, c, trial, master_seed, opt_value))
                index.append((method, c))
    if threads > 1 and len(jobs) > 1:
        chunk = max(1, len(jobs) // (threads * 8))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_job, jobs, chunksize=chunk))
    else:
        results = [_run_job(job) for job in jobs]
    cells = []
    pos = 0
    for method, configs in plan:
        for c, cfg in enumerate(configs):
            recs = results[pos:pos + trials]
            pos += trials
            cell = CellResult(method, c, cfg, recs)
            if cell.failures:
                logger.warning("%s cell %d: %d of %d trials failed", method, c, cell.failures, trials)
            if not cell.ok:
                raise ExperimentError(f"all {trials} trials of {method} cell {c} ({cfg.label()}) failed")
            cells.append(cell)
    return cells


def run_experiment(cfg: ExperimentConfig, use_grid: bool = False, threads: int = 1,
                   opt: tuple | None = None) -> AggregateResult:
    """Run every configured method over its cells and trials, then pick best cells.

    ``use_grid`` forces the full grid even when explicit optimizers are listed.
    """
    spec = cfg.build_spec()
    if opt is None:
        opt = envs.opt_reference(spec)
    theta_opt, opt_value, provenance = opt
    plan = [(m, cfg.optimizer_configs(m, use_grid)) for m in cfg.methods]
    for method, configs in plan:
        for oc in configs:
            oc.check_for(spec)
    cells = run_cells(spec, plan, cfg.trials, cfg.master_seed, opt_value, threads)
    return AggregateResult(
        experiment=cfg.id,
        spec=spec,
        opt_theta=np.asarray(theta_opt),
        opt_value=float(opt_value),
        opt_provenance=provenance,
        master_seed=cfg.master_seed,
        trials=cfg.trials,
        T=cfg.T,
        cells=cells,
        best=select_best(cells),
        tol_fracs=tuple(cfg.metrics.tol_fracs),
    )


def drop_non_best(result: AggregateResult) -> AggregateResult:
    """Free the per-trial records of every cell that is not a best cell."""
    keep = {id(c) for c in result.best.values()}
    for cell in result.cells:
        if id(cell) not in keep:
            cell.records = [None if r is None else _Summary.of(r) for r in cell.records]
    return result


@dataclass
class _Summary:
    """Stand-in for a RunRecord that keeps only what aggregation reads."""

    reported_loss: np.ndarray
    loss_long_term: np.ndarray
    loss_instantaneous: np.ndarray
    final_frac_opt: float
    opt_value: float

    @classmethod
    def of(cls, r: RunRecord) -> "_Summary":
        return cls(r.reported_loss, r.loss_long_term, r.loss_instantaneous, r.final_frac_opt, r.opt_value)


@dataclass
class SweepPoint:
    k: float
    delta: float
    result: AggregateResult


def run_sweep(cfg: ExperimentConfig, k_list, use_grid: bool = True, threads: int = 1) -> list[SweepPoint]:
    """One experiment per settle count ``k`` (``delta = 1 - 0.01 ** (1 / k)``)."""
    points = []
    for k in k_list:
        sub = cfg.with_k(k)
        res = drop_non_best(run_experiment(sub, use_grid=use_grid, threads=threads))
        points.append(SweepPoint(float(k), res.spec.delta, res))
        logger.info("k=%g done: %s", k, {m: round(c.final_frac_opt[0], 4) for m, c in res.best.items()})
    return points
