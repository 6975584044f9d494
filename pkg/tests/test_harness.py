import csv
import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from perfopt.harness import emit
from perfopt.harness.cli import main
from perfopt.harness.config import (
    PRESETS,
    ConfigError,
    GridSpec,
    config_from_dict,
    config_to_dict,
    env_seed,
    load_config,
    preset_config,
    trial_seed,
)
from perfopt.harness.runner import CellResult, run_experiment, select_best

SMALL_GRID = {"lr": [0.1, 0.0316], "wait": [1, 5], "dfo_ps": [0.1], "spgd_ps": [0.1], "perfgd_ps": [1.0],
              "spgd_H": [10, "full"], "pgd_H": ["full"]}


def small(preset="linear", **kw):
    raw = {"preset": preset, "trials": 2, "T": 12, "grid": SMALL_GRID, **kw}
    return config_from_dict(raw)


class TestConfig:
    def test_presets_validate(self):
        for name in PRESETS:
            cfg = preset_config(name)
            cfg.build_spec()

    def test_linear_preset_values(self):
        cfg = preset_config("linear")
        assert cfg.environment.d == 5 and cfg.environment.R == 5.0
        assert cfg.trials == 5 and cfg.T == 50
        assert cfg.k_list == [1, 2, 4, 8, 16, 32, 64]
        spec = cfg.build_spec()
        assert np.allclose(spec.b, 2.0) and spec.sigma_err == 1e-3
        assert np.all(np.linalg.eigvalsh(spec.A) < 0)

    def test_nonlinear_preset(self):
        spec = preset_config("nonlinear").build_spec()
        assert spec.delta == pytest.approx(0.684)
        np.testing.assert_array_equal(spec.A, -0.8 * np.eye(5))

    def test_spam_preset(self):
        spec = preset_config("spam").build_spec()
        np.testing.assert_array_equal(spec.mu_orig, [2.0, 1.0])
        assert spec.eps == -2.0 and spec.ridge == 0.1 and spec.delta == 0.25

    @pytest.mark.parametrize("raw, field", [
        ({"preset": "linear", "trials": 0}, "trials"),
        ({"preset": "linear", "bogus": 1}, "bogus"),
        ({"preset": "linear", "environment": {"delta": 1.5}}, "delta"),
        ({"preset": "linear", "methods": ["adam"]}, "methods"),
        ({"preset": "linear", "grid": {"lr": [-1.0]}}, "grid.lr"),
        ({"preset": "nope"}, "preset"),
    ])
    def test_errors_name_the_field(self, raw, field):
        with pytest.raises(ConfigError, match=field):
            config_from_dict(raw)

    def test_delta_and_k_exclusive(self):
        with pytest.raises(ConfigError):
            config_from_dict({"preset": "linear", "environment": {"delta": 0.5, "k_settle": 4}})

    def test_override_replaces_settle(self):
        cfg = config_from_dict({"preset": "linear", "environment": {"delta": 0.3}})
        assert cfg.build_spec().delta == 0.3

    def test_with_k(self):
        cfg = preset_config("linear").with_k(4)
        assert cfg.id.endswith("-k4")
        assert (1 - cfg.build_spec().delta) ** 4 == pytest.approx(0.01)

    def test_yaml_round_trip(self, tmp_path):
        cfg = small()
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(config_to_dict(cfg)))
        assert config_to_dict(load_config(path)) == config_to_dict(cfg)

    def test_load_preset_string(self):
        assert load_config("preset:spam").environment.variant == "spam"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.yaml")


class TestGrid:
    def test_default_counts(self):
        g = GridSpec()
        d = 5
        assert len(g.cells("rgd", d)) == 6
        assert len(g.cells("dfo", d)) == 6 * 4 * 4
        assert len(g.cells("perfgd", d)) == 6 * 4 * (d + 2)
        assert len(g.cells("spgd", d)) == 6 * 5 * (d + 2)
        assert g.horizons("spgd", d) == [10, 11, 12, 13, 14, 15, "full"]
        assert g.horizons("bspgd", d)[0] == 6

    def test_lr_values(self):
        np.testing.assert_allclose(GridSpec().lr, [10 ** (-k / 2) for k in range(1, 7)])


class TestSeeds:
    def test_pure(self):
        a = np.random.default_rng(trial_seed(3, "spgd", 2, 1)).random(4)
        b = np.random.default_rng(trial_seed(3, "spgd", 2, 1)).random(4)
        np.testing.assert_array_equal(a, b)

    def test_distinct_coordinates(self):
        draws = {np.random.default_rng(trial_seed(0, m, c, t)).random()
                 for m in ("spgd", "rgd") for c in range(3) for t in range(3)}
        assert len(draws) == 18

    def test_env_stream_shared_across_methods(self):
        a = np.random.default_rng(env_seed(0, 1)).random()
        assert a != np.random.default_rng(env_seed(0, 2)).random()


@pytest.fixture(scope="module")
def result():
    return run_experiment(small(methods=["spgd", "rgd", "dfo"]), use_grid=True)


class TestRunner:
    def test_cell_counts(self, result):
        counts = {m: len(result.cells_for(m)) for m in result.methods}
        assert counts == {"spgd": 4, "rgd": 2, "dfo": 4}
        assert all(len(c.records) == 2 for c in result.cells)

    def test_best_is_argmin(self, result):
        for m, best in result.best.items():
            assert best.final_loss[0] == min(c.final_loss[0] for c in result.cells_for(m))

    def test_same_env_noise_across_cells(self, result):
        # cells differ only in step size, so the first deployment sees the same population draw
        for m in ("spgd", "rgd"):
            a, b = result.cells_for(m)[:2]
            np.testing.assert_array_equal(a.records[1].mu_hat[0], b.records[1].mu_hat[0])

    def test_reproducible(self, result):
        again = run_experiment(small(methods=["spgd", "rgd", "dfo"]), use_grid=True)
        for a, b in zip(result.cells, again.cells):
            for ra, rb in zip(a.records, b.records):
                np.testing.assert_array_equal(ra.theta, rb.theta)

    def test_csv_rows(self, result, tmp_path):
        path = emit.emit_csv(result, tmp_path / "r.csv")
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == emit.csv_header(5)
        assert len(rows) - 1 == 10 * 2 * 12
        assert path.read_bytes().count(b"\r\n") == len(rows)

    def test_csv_best_only(self, result, tmp_path):
        path = emit.emit_csv(result, tmp_path / "b.csv", rows="best")
        with path.open(newline="") as fh:
            assert len(list(csv.reader(fh))) - 1 == 3 * 2 * 12

    def test_csv_matches_json(self, result, tmp_path):
        csv_path = emit.emit_csv(result, tmp_path / "r.csv")
        js = emit.summarize(result)
        with csv_path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        for m, info in js["methods"].items():
            best = info["best"]
            finals = [float(r["frac_opt"]) for r in rows
                      if r["method"] == m and int(r["cell"]) == best["cell"] and r["step"] == "12"]
            if m == "dfo":
                finals = [float(r["loss_long_term_internal"]) / result.opt_value for r in rows
                          if r["method"] == m and int(r["cell"]) == best["cell"] and r["step"] == "12"]
            assert np.mean(finals) == pytest.approx(best["final_frac_opt"]["mean"], rel=1e-12)

    def test_summary_round_trips_into_config(self, result, tmp_path):
        cfg = small(methods=["spgd", "rgd", "dfo"])
        path = emit.emit_summary_json(result, [], tmp_path / "s.json", config=config_to_dict(cfg))
        assert config_to_dict(load_config(path)) == config_to_dict(cfg)
        data = json.loads(path.read_text())
        assert data["opt"]["provenance"] == "closed-form"

    def test_header_only_csv(self, tmp_path):
        path = tmp_path / "h.csv"
        with path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\r\n").writerow(emit.csv_header(2))
        assert path.read_text().count("\n") == 1


class _FakeCell(CellResult):
    def __init__(self, method, cell, loss):
        super().__init__(method, cell, None, [])
        self._loss = loss

    @property
    def ok(self):
        return [1]

    @property
    def final_loss(self):
        return self._loss, 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8), st.integers(0, 2**32 - 1))
def test_best_cell_invariant_to_order(losses, seed):
    cells = [_FakeCell("spgd", i, x) for i, x in enumerate(losses)]
    perm = np.random.default_rng(seed).permutation(len(cells))
    a = select_best(cells)["spgd"]
    b = select_best([cells[i] for i in perm])["spgd"]
    assert a._loss == b._loss == min(losses)


class TestCli:
    def test_presets(self, capsys):
        assert main(["presets"]) == 0
        assert "linear" in capsys.readouterr().out

    def test_missing_config(self, tmp_path):
        assert main(["run", str(tmp_path / "none.yaml")]) == 2

    def test_bad_flag(self):
        assert main(["run"]) == 2

    def test_bad_trials(self, tmp_path):
        assert main(["run", "preset:linear", "--trials", "0", "--out-dir", str(tmp_path)]) == 2

    def test_unknown_check(self):
        assert main(["validate", "--only", "99"]) == 2

    def test_run_writes_files(self, tmp_path, capsys):
        path = tmp_path / "c.yaml"
        cfg = config_to_dict(small(methods=["spgd", "rgd"]))
        cfg["optimizers"] = [{"method": "spgd", "lr": 0.1, "perturbation": 0.1}, {"method": "rgd", "lr": 0.1}]
        cfg["id"] = "tiny"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["run", str(path), "--out-dir", str(tmp_path), "--threads", "1"]) == 0
        assert (tmp_path / "tiny.csv").exists() and (tmp_path / "tiny.json").exists()
        with (tmp_path / "tiny.csv").open(newline="") as fh:
            assert len(list(csv.reader(fh))) == 1 + 2 * 2 * 12

    def test_seed_precedence(self, tmp_path, monkeypatch):
        path = tmp_path / "c.yaml"
        cfg = config_to_dict(small(methods=["rgd"]))
        cfg["optimizers"] = [{"method": "rgd", "lr": 0.1}]
        path.write_text(yaml.safe_dump(cfg))
        monkeypatch.setenv("PERFOPT_SEED", "7")
        main(["run", str(path), "--out-dir", str(tmp_path / "env"), "--threads", "1", "--format", "json"])
        main(["run", str(path), "--out-dir", str(tmp_path / "flag"), "--threads", "1", "--format", "json",
              "--seed", "9"])
        assert json.loads((tmp_path / "env" / f"{cfg['id']}.json").read_text())["master_seed"] == 7
        assert json.loads((tmp_path / "flag" / f"{cfg['id']}.json").read_text())["master_seed"] == 9

    def test_sweep_counts(self, tmp_path):
        path = tmp_path / "c.yaml"
        cfg = config_to_dict(small(methods=["spgd", "rgd"]))
        cfg["id"] = "sw"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["sweep", str(path), "--k-list", "1,8,64", "--out-dir", str(tmp_path), "--threads", "1"]) == 0
        data = json.loads((tmp_path / "sw-sweep.json").read_text())
        assert sorted({row["k_settle"] for row in data["sweep"]}) == [1.0, 8.0, 64.0]
        assert len(data["sweep"]) == 3 * 2
        with (tmp_path / "sw-sweep.csv").open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * 2 * 2 * 12
        assert sorted({r["k_settle"] for r in rows}) == ["1.0", "64.0", "8.0"]

    def test_bad_k_list(self):
        assert main(["sweep", "preset:linear", "--k-list", "0,1"]) == 2
