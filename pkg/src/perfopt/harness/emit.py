"""CSV and JSON emission.

Floats are written with ``repr``, the shortest decimal string that reads
back to the same double, so files are byte-stable and lossless.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from perfopt.errors import PerfOptError
from perfopt.harness.runner import AggregateResult, CellResult, SweepPoint


class EmitError(PerfOptError, OSError):
    """Writing an output file failed."""


def fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _open(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open("w", newline="")
    except OSError as err:
        raise EmitError(f"{path}: {err.strerror or err}") from None


def csv_header(d: int, extra: Iterable[str] = ()) -> list[str]:
    return ([*extra, "experiment", "method", "cell", "trial", "step"]
            + [f"theta_{i}" for i in range(d)] + [f"mu_hat_{i}" for i in range(d)]
            + ["loss_instantaneous", "loss_long_term", "frac_opt", "loss_long_term_internal"])


def _cell_rows(experiment: str, cell: CellResult, prefix: list[str]):
    for trial, rec in enumerate(cell.records):
        if rec is None:
            continue
        frac = rec.frac_opt
        internal = rec.loss_long_term_internal
        for t in range(len(rec)):
            yield (prefix + [experiment, cell.method, str(cell.cell), str(trial), str(t + 1)]
                   + [fmt(v) for v in rec.theta[t]] + [fmt(v) for v in rec.mu_hat[t]]
                   + [fmt(rec.loss_instantaneous[t]), fmt(rec.loss_long_term[t]), fmt(frac[t]),
                      fmt(None if internal is None else internal[t])])


def _selected_cells(result: AggregateResult, rows: str) -> list[CellResult]:
    if rows == "best":
        return [result.best[m] for m in result.methods if m in result.best]
    return result.cells


def emit_csv(result: AggregateResult, path, rows: str = "all") -> Path:
    """Per-step rows for every (method, cell, trial), or for best cells only.

    ``frac_opt`` is ``loss_long_term / L*_OPT`` of the deployed model;
    DFO additionally fills ``loss_long_term_internal``.
    """
    path = Path(path)
    with _open(path) as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(csv_header(result.spec.d))
        for cell in _selected_cells(result, rows):
            writer.writerows(_cell_rows(result.experiment, cell, []))
    return path


def emit_sweep_csv(points: list[SweepPoint], path) -> Path:
    """Per-step rows of every best cell, one block per settle count ``k``."""
    path = Path(path)
    d = points[0].result.spec.d if points else 0
    with _open(path) as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(csv_header(d, extra=["k_settle"]))
        for p in points:
            for m in p.result.methods:
                if m in p.result.best:
                    writer.writerows(_cell_rows(p.result.experiment, p.result.best[m], [fmt(p.k)]))
    return path


def cell_summary(cell: CellResult, tol_fracs) -> dict:
    frac, frac_se = cell.final_frac_opt
    loss, loss_se = cell.final_loss
    return {
        "cell": cell.cell,
        "label": cell.config.label(),
        "config": cell.config.to_dict(),
        "final_frac_opt": {"mean": frac, "se": frac_se},
        "final_loss_long_term": {"mean": loss, "se": loss_se},
        "deployments_to_tolerance": {fmt(t): cell.deployments_to_tolerance(t) for t in tol_fracs},
        "failed_trials": cell.failures,
    }


def summarize(result: AggregateResult, oracle_reports: Optional[list] = None, config: Optional[dict] = None) -> dict:
    methods = {}
    for m in result.methods:
        cells = result.cells_for(m)
        best = result.best.get(m)
        methods[m] = {
            "best": None if best is None else cell_summary(best, result.tol_fracs),
            "cells": [{"cell": c.cell, "label": c.config.label(),
                       "final_loss_long_term": c.final_loss[0], "final_frac_opt": c.final_frac_opt[0]}
                      for c in cells],
        }
    out = {
        "experiment": result.experiment,
        "master_seed": result.master_seed,
        "trials": result.trials,
        "T": result.T,
        "environment": result.spec.to_dict(),
        "opt": {"theta": result.opt_theta, "loss_long_term": result.opt_value,
                "provenance": result.opt_provenance},
        "frac_opt_definition": "loss_long_term / L*(theta_OPT); 1.0 is optimal",
        "methods": methods,
        "validation": [r.to_dict() if hasattr(r, "to_dict") else r for r in (oracle_reports or [])],
    }
    if config is not None:
        out["config"] = config
    return _jsonable(out)


def _write_json(obj: dict, path: Path) -> Path:
    with _open(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, allow_nan=False)
        fh.write("\n")
    return path


def emit_summary_json(result: AggregateResult, oracle_reports, path, config: Optional[dict] = None) -> Path:
    """Machine-readable summary: best cell per method, OPT with provenance, validation block."""
    return _write_json(summarize(result, oracle_reports, config), Path(path))


def summarize_sweep(points: list[SweepPoint], config: Optional[dict] = None) -> dict:
    rows = []
    for p in points:
        for m in p.result.methods:
            best = p.result.best.get(m)
            if best is None:
                continue
            entry = {"k_settle": p.k, "delta": p.delta, "method": m}
            entry.update(cell_summary(best, p.result.tol_fracs))
            rows.append(entry)
    out = {"sweep": rows}
    if points:
        first = points[0].result
        out["opt"] = {"theta": first.opt_theta, "loss_long_term": first.opt_value,
                      "provenance": first.opt_provenance}
    if config is not None:
        out["config"] = config
    return _jsonable(out)


def emit_sweep_json(points: list[SweepPoint], path, config: Optional[dict] = None) -> Path:
    return _write_json(summarize_sweep(points, config), Path(path))


def load_summary(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as err:
        raise EmitError(f"{path}: {err.strerror or err}") from None
