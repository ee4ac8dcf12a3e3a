import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fujita_lab.cli import main
from fujita_lab.config import Controls, default_p_grid, load_config, parse_config
from fujita_lab.errors import ConfigError
from fujita_lab.fieldio import load_field, save_field
from fujita_lab.groups import make_group
from fujita_lab.harness import (
    ROW_FIELDS,
    SweepTable,
    certify_abstract,
    emit_report,
    load_report,
    run_sweep,
)
from fujita_lab.heat import GridField
from fujita_lab.mild import Nonlinearity, existence_condition, small_data_generator

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

EUCLID = {
    "seed": 7,
    "group": {"kind": "euclidean", "n": 1, "points": 2048, "extent": 240.0},
    "nonlinearity": {"p": [2.0, 4.0]},
    "data": {"family": "kernel", "eps": [0.5], "gamma": [1.0]},
}
TORUS = {
    "group": {"kind": "torus", "n": 1, "points": 32},
    "nonlinearity": {"p": [2.0, 3.0, 4.0]},
    "data": {"family": "constant", "eps": [0.5]},
}


def with_out(raw, tmp_path):
    return {**raw, "output": {"dir": str(tmp_path)}}


class TestConfig:
    def test_minimal_torus_defaults(self):
        cfg = parse_config(TORUS)
        assert cfg.controls.T_max == 100.0 and cfg.controls.tol == 1e-8
        assert cfg.controls == Controls()

    def test_no_straddle_warns(self):
        cfg = parse_config({**EUCLID, "nonlinearity": {"p": [2.0]}})
        assert cfg.warnings and "3" in cfg.warnings[0]

    def test_straddle_no_warning(self):
        assert parse_config(EUCLID).warnings == ()

    @pytest.mark.parametrize(
        "raw",
        [
            {**EUCLID, "data": {"family": "kernel", "eps": [-0.1]}},
            {**EUCLID, "data": {"family": "kernel", "eps": []}},
            {k: v for k, v in EUCLID.items() if k != "data"},
            {**EUCLID, "controls": {"tol": 0.0}},
            {**EUCLID, "controls": {"T_max": -1.0}},
            {**EUCLID, "nonlinearity": {"p": [1.0]}},
            {**EUCLID, "bogus": 1},
            {**EUCLID, "data": {"family": "file", "file": "/nonexistent/u0.bin"}},
            {**EUCLID, "output": {"format": "xml"}},
        ],
    )
    def test_validation_errors(self, raw):
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_default_p_grid(self):
        assert default_p_grid(3.0) == pytest.approx((2.0, 2.7, 3.0, 3.3, 4.5))
        assert all(p > 1 for p in default_p_grid(1.5))

    def test_cells_sorted(self):
        cfg = parse_config({**EUCLID, "nonlinearity": {"p": [4.0, 2.0]}, "data": {"eps": [0.5, 0.1], "gamma": [2.0, 1.0]}})
        assert cfg.cells() == sorted(cfg.cells()) and len(cfg.cells()) == 8

    def test_echo(self, tmp_path):
        src = tmp_path / "c.toml"
        src.write_text('[group]\nkind = "torus"\nn = 1\npoints = 32\n[data]\nfamily = "constant"\neps = 0.5\n')
        load_config(src, out_dir=tmp_path / "o")
        echoed = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
        assert echoed["controls"]["T_max"] == 100.0

    def test_parse_error_names_line(self, tmp_path):
        src = tmp_path / "bad.toml"
        src.write_text("[group]\nkind = \n")
        with pytest.raises(ConfigError, match="line 2"):
            load_config(src, echo=False)

    @pytest.mark.parametrize("name", ["euclidean_dichotomy", "torus_constant", "heisenberg_kernel", "abstract_profile"])
    def test_shipped_configs_load(self, name, tmp_path):
        load_config(CONFIGS / f"{name}.toml", out_dir=tmp_path)


class TestSweep:
    def test_euclidean_dichotomy(self, tmp_path):
        table = run_sweep(parse_config(with_out(EUCLID, tmp_path)))
        lo, hi = table.row(2.0), table.row(4.0)
        assert table.p_F == 3.0
        assert lo["classification"] == "blowup" and lo["T_star"] < 200
        assert hi["classification"] == "global_so_far" and hi["certificate"] == "satisfied"
        assert (hi["picard"], hi["sandwich"], hi["decay"]) == ("converged", "pass", "pass")
        assert all(r["status"] == "ok" for r in table.rows)

    def test_torus_all_blowup(self, tmp_path):
        table = run_sweep(parse_config(with_out(TORUS, tmp_path)))
        assert table.column("classification") == ["blowup"] * 3
        for r in table.rows:
            assert r["T_star"] == pytest.approx(0.5 ** (1 - r["p"]) / (r["p"] - 1), rel=0.02)

    def test_certificate_coherence_and_eps_monotonicity(self, tmp_path):
        raw = {**EUCLID, "nonlinearity": {"p": [3.5, 4.0, 5.0]}, "data": {"eps": [0.05, 0.5, 2.0, 4.0], "gamma": [1.0]}}
        table = run_sweep(parse_config(with_out(raw, tmp_path)), workers=2)
        assert all(r["status"] == "ok" for r in table.rows)
        for r in table.rows:
            if r["certificate"] == "satisfied":
                assert r["classification"] != "blowup"
        for p in (3.5, 4.0, 5.0):
            rows = sorted((r for r in table.rows if r["p"] == p), key=lambda r: r["eps"])
            seen_global = False
            for r in reversed(rows):
                seen_global |= r["classification"] == "global_so_far"
                if seen_global:
                    assert r["classification"] != "blowup"

    def test_per_cell_errors_captured(self, tmp_path):
        raw = with_out({**TORUS, "nonlinearity": {"p": [2.0]}, "controls": {"dt0": 1e-2, "dt_min": 0.5}}, tmp_path)
        table = run_sweep(parse_config(raw))
        assert len(table.rows) == 1 and table.rows[0]["classification"] in ("blowup", "inconclusive")

    def test_parallel_matches_serial(self, tmp_path):
        cfg = parse_config(with_out(TORUS, tmp_path))
        assert run_sweep(cfg, workers=1).rows == run_sweep(cfg, workers=3).rows


class TestCertifyAbstract:
    def test_critical_divergent(self):
        assert certify_abstract({"a": 4, "b": 4}, 1.5, 1.0, 1.0, 0.1, C=1.0).verdict == "divergent"

    def test_closed_form_bound(self):
        cert = certify_abstract({"a": 4, "b": 4}, 1.6, 1.0, 1.0, 0.3, C=2.0)
        assert cert.verdict == "finite-bound"
        assert abs(cert.bound - 5 * 0.3**0.6 * 2.0) <= 1e-12 * cert.bound

    def test_exponential_finite(self):
        cert = certify_abstract({"profile": "exponential", "d": 3}, 2.0, 1.0, 1.0, 0.1, C=1.0)
        assert cert.verdict == "finite-bound" and math.isfinite(cert.bound)

    def test_small_time_part(self):
        cert = certify_abstract({"a": 4, "b": 2}, 2.0, 0.25, 1.0, 1.0, C=1.0)
        assert cert.bound == pytest.approx(math.log(4.0) + 1.0, rel=1e-14)

    @pytest.mark.parametrize("a", [1.0, 2.0, 4.0])
    def test_verdict_iff_exponent(self, a):
        for p in np.linspace(1.05, 4.0, 60):
            cert = certify_abstract({"a": a, "b": a}, float(p), 1.0, 1.0, 0.1, C=1.0)
            assert (cert.verdict == "divergent") == (a * (p - 1) / 2 <= 1)
        for d in (1, 2, 3):
            for p in np.linspace(1.05, 4.0, 60):
                cert = certify_abstract({"profile": "exponential", "d": d}, float(p), 1.0, 1.0, 0.1, C=1.0)
                assert (cert.verdict == "finite-bound") == (d * (p - 1) / 2 > 1)

    def test_needs_C_or_model(self):
        with pytest.raises(ValueError):
            certify_abstract({"a": 4, "b": 4}, 2.0, 1.0, 1.0, 0.1)
        with pytest.raises(ValueError):
            certify_abstract({"a": 4, "b": 4}, 2.0, 0.0, 1.0, 0.1, C=1.0)

    def test_agrees_with_existence_condition(self, wide_line):
        for p in (2.0, 2.5, 3.0, 3.5, 4.0, 6.0):
            for gamma in (0.5, 1.0, 2.0):
                for eps in (0.05, 0.5, 3.0):
                    nl = Nonlinearity(p)
                    num = existence_condition(wide_line, small_data_generator(wide_line, gamma, eps), nl)
                    ab = certify_abstract({"a": 1, "b": 1}, p, gamma, 1.0, eps, g=wide_line)
                    assert (ab.verdict == "divergent") == (num.verdict == "divergent")
                    if ab.satisfied:
                        assert num.verdict == "satisfied"


class TestReports:
    def test_single_row_csv(self, tmp_path):
        path = emit_report([{"p": 2.0, "x": 1.0 / 3.0}], tmp_path, "csv", name="one")
        lines = path.read_text().splitlines()
        assert lines == ["p,x", "2,0.333333333333"]

    def test_deterministic_bytes(self, tmp_path):
        rows = [{"p": 2.0, "v": math.pi, "w": math.inf, "s": "ok"}]
        a = emit_report(rows, tmp_path / "a", "json", name="r").read_bytes()
        b = emit_report(rows, tmp_path / "b", "json", name="r").read_bytes()
        assert a == b

    def test_json_round_trip(self, tmp_path):
        table = SweepTable([{k: None for k in ROW_FIELDS} | {"p": 2.0, "eps": 0.5, "gamma": 1.0, "T_star": math.inf}], 3.0)
        doc = load_report(emit_report(table, tmp_path, "json", name="sweep"))
        assert doc["schema"] == "fujita_lab.sweep/1"
        assert doc["rows"][0]["T_star"] == math.inf and doc["meta"]["p_F"] == 3.0

    def test_csv_round_trip(self, tmp_path):
        rows = [{"p": 2.5, "verdict": "divergent", "flag": True}]
        assert load_report(emit_report(rows, tmp_path, "csv", name="x"))["rows"] == rows

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([{"p": 1}], tmp_path, "xml")

    def test_field_io_round_trip(self, tmp_path):
        g = make_group("euclidean", n=2, points=(8, 12), extent=(2.0, 3.0))
        u = GridField(np.random.default_rng(5).random(g.points), g, time=0.25)
        v = load_field(save_field(tmp_path / "u", u))
        assert np.array_equal(u.values, v.values) and v.model == g and v.time == 0.25


class TestCli:
    def test_config_error_exit(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text('[group]\nkind = "torus"\nn = 1\npoints = 32\n[data]\neps = [-1.0]\n')
        assert main(["sweep", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert main(["sweep", "--config", str(tmp_path / "missing.toml")]) == 1

    def test_bad_seed(self, tmp_path):
        assert main(["sweep", "--config", str(CONFIGS / "torus_constant.toml"), "--out", str(tmp_path), "--seed", "-3"]) == 1

    def test_invariant_exit(self, tmp_path, monkeypatch):
        from fujita_lab import harness
        from fujita_lab.errors import NonMonotoneIterates

        def broken(*a, **k):
            raise NonMonotoneIterates("forced")

        monkeypatch.setattr(harness, "picard_solve", broken)
        assert main(["sweep", "--config", str(CONFIGS / "euclidean_dichotomy.toml"), "--out", str(tmp_path)]) == 2

    @pytest.mark.parametrize("cmd", ["certify", "solve", "blowup"])
    def test_subcommands(self, cmd, tmp_path):
        assert main([cmd, "--config", str(CONFIGS / "euclidean_dichotomy.toml"), "--out", str(tmp_path), "--format", "json"]) == 0
        assert any(tmp_path.glob("*.json"))

    def test_kernel_check(self, tmp_path):
        assert main(["kernel-check", "--config", str(CONFIGS / "heisenberg_kernel.toml"), "--out", str(tmp_path)]) == 0
        rows = load_report(tmp_path / "kernel_bounds.json")["rows"]
        assert rows[0]["passed"] is True

    def test_abstract_certify(self, tmp_path):
        assert main(["certify", "--config", str(CONFIGS / "abstract_profile.toml"), "--out", str(tmp_path)]) == 0
        rows = load_report(tmp_path / "abstract_certificates.csv")["rows"]
        assert [r["verdict"] for r in rows] == ["divergent", "finite-bound", "finite-bound"]

    def test_module_entry_point(self, tmp_path):
        r = subprocess.run(
            [sys.executable, "-m", "fujita_lab", "sweep", "--config", str(CONFIGS / "torus_constant.toml"), "--out", str(tmp_path)],
            capture_output=True, text=True,
        )
        assert r.returncode == 0 and (tmp_path / "sweep.csv").exists()
