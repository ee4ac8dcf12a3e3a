"""Sweeps over (p, eps, gamma), abstract-profile certificates and report files."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .blowup import ap_monitor, integrate_nonlinear
from .config import ExperimentConfig
from .errors import InvariantViolation, LabError
from .fieldio import load_field, save_field
from .groups import GroupModel, VolumeProfile, group_from_spec
from .heat import GridField, default_operator
from .mild import (
    Nonlinearity,
    decay_envelope_check,
    existence_condition,
    kernel_profile,
    picard_solve,
    sandwich_check,
    small_data_generator,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ROW_FIELDS = (
    "p", "eps", "gamma", "classification", "t_end", "T_star", "fit_residual", "terminating",
    "certificate", "I", "C", "picard", "iterations", "residual", "sandwich", "decay",
    "ap_verdict", "ap_max_ratio", "T_star_refined_change", "status",
)


@dataclass
class SweepTable:
    rows: list[dict]
    p_F: float
    meta: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def row(self, p: float, eps: float | None = None, gamma: float | None = None) -> dict:
        for r in self.rows:
            if r["p"] == p and (eps is None or r["eps"] == eps) and (gamma is None or r["gamma"] == gamma):
                return r
        raise KeyError((p, eps, gamma))


# ---------------------------------------------------------------- cells

def operator_for(g: GroupModel, scheme: str | None):
    return default_operator(g, scheme)


def initial_data(cfg: ExperimentConfig, g: GroupModel, eps: float, gamma: float, op=None) -> GridField:
    if cfg.family == "kernel":
        return small_data_generator(g, gamma, eps, op)
    if cfg.family == "constant":
        return GridField(np.full(g.points, eps), g)
    u = load_field(cfg.file)
    if tuple(u.model.points) != tuple(g.points):
        raise LabError(f"field file lattice {u.model.points} does not match group lattice {g.points}")
    return GridField(u.values, g)


def _refined(g: GroupModel) -> GroupModel:
    spec = g.spec()
    spec["points"] = [2 * N for N in g.points]
    return group_from_spec(spec)


def run_cell(cfg: ExperimentConfig, cell: tuple[float, float, float]) -> dict:
    """Evaluate one (p, eps, gamma) cell; failures are recorded, never raised."""
    p, eps, gamma = cell
    ctl = cfg.controls
    row = {k: None for k in ROW_FIELDS}
    row.update(p=p, eps=eps, gamma=gamma, classification="inconclusive", status="ok",
               certificate="skipped", picard="skipped", sandwich="skipped", decay="skipped")
    try:
        g = cfg.model()
        op = operator_for(g, cfg.scheme)
        nl = Nonlinearity(p, cfg.K1, cfg.K2)
        u0 = initial_data(cfg, g, eps, gamma, op)

        cert = existence_condition(g, u0, nl, S_cut=ctl.S_cut, op=op)
        row.update(certificate=cert.verdict, I=cert.value, C=cert.C)
        if cert.verdict == "satisfied":
            try:
                sol = picard_solve(g, u0, nl, ctl.T_max, ctl.steps, ctl.tol, ctl.k_max, op=op)
                row.update(picard="converged", iterations=sol.iterations, residual=sol.residual)
                sw = sandwich_check(sol, cert, strict=False)
                row["sandwich"] = "pass" if sw.passed else "fail"
                if cfg.family == "kernel":
                    env = decay_envelope_check(sol, gamma, eps * cert.C, op=op)
                    row["decay"] = "pass" if env.passed else "fail"
                if ctl.dump_fields:
                    save_field(Path(cfg.out_dir) / "fields" / f"u_p{p:g}_eps{eps:g}_gamma{gamma:g}", sol.snapshot(-1))
            except InvariantViolation:
                raise
            except LabError as exc:
                row["picard"] = f"failed: {type(exc).__name__}"

        sup0 = float(np.max(u0.values))
        kw = dict(dt0=ctl.dt0, dt_min=ctl.dt_min, M_max=ctl.M_max_factor * sup0 if sup0 > 0 else 1.0,
                  T_max=ctl.T_max, safety=ctl.safety)
        rep = integrate_nonlinear(g, u0, nl, **kw)
        row.update(
            classification=rep.classification,
            t_end=rep.T_star if rep.classification == "blowup" else rep.t_end,
            T_star=rep.T_star,
            fit_residual=rep.fit_residual,
            terminating=rep.terminating,
        )
        for _ in range(ctl.refine):
            gf = _refined(g)
            uf = initial_data(cfg, gf, eps, gamma, operator_for(gf, cfg.scheme))
            kw["dt0"] *= 0.5
            rf = integrate_nonlinear(gf, uf, nl, **kw)
            if rep.classification == "blowup" and rf.classification == "blowup":
                row["T_star_refined_change"] = abs(rf.T_star / rep.T_star - 1.0)
            g = gf

        if cfg.K2 is not None and sup0 > 0:
            probes = np.geomspace(ctl.T_max * 1e-4, ctl.T_max, ctl.ap_probes)
            mon = ap_monitor(cfg.model(), u0, nl, probes, ctl.monitor_slack, op)
            row.update(ap_verdict=mon.verdict, ap_max_ratio=mon.max_ratio)
    except InvariantViolation as exc:
        row["status"] = f"invariant: {type(exc).__name__}: {exc}"
    except Exception as exc:  # per-cell failures never abort the sweep
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    return row


def _jensen_probe(cfg: ExperimentConfig) -> dict:
    """Random Jensen checks e^{-tL}(F^p) >= (e^{-tL}F)^p on the configured model."""
    rng = np.random.default_rng(cfg.seed)
    g = cfg.model()
    op = operator_for(g, cfg.scheme)
    worst = math.inf
    for _ in range(cfg.controls.jensen_probes):
        F = rng.random(g.points)
        p = float(rng.uniform(1.1, 5.0))
        t = float(rng.uniform(0.01, 1.0))
        worst = min(worst, float(np.min(op.apply(F**p, t) - op.apply(F, t) ** p)))
    return {"probes": cfg.controls.jensen_probes, "min_gap": worst}


def run_sweep(cfg: ExperimentConfig, workers: int = 1) -> SweepTable:
    cells = cfg.cells()
    if not cells:
        raise LabError("the sweep has no cells")
    t0 = time.perf_counter()
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, [cfg] * len(cells), cells))
    else:
        rows = [run_cell(cfg, c) for c in cells]
    rows.sort(key=lambda r: (r["p"], r["eps"], r["gamma"]))
    g = cfg.model()
    meta = {
        "version": __version__,
        "group": g.spec(),
        "scheme": cfg.scheme,
        "family": cfg.family,
        "controls": dataclasses.asdict(cfg.controls),
        "seed": cfg.seed,
        "warnings": list(cfg.warnings),
    }
    if cfg.controls.jensen_probes:
        meta["jensen"] = _jensen_probe(cfg)
    timings = {"wall_seconds": time.perf_counter() - t0, "workers": workers, "cells": len(cells)}
    return SweepTable(rows, g.fujita_exponent, meta, timings)


# ---------------------------------------------------------------- abstract certificates

@dataclass
class AbstractCertificate:
    profile: dict
    p: float
    gamma: float
    K1: float
    eps: float
    C: float
    verdict: str  # finite-bound | divergent
    bound: float
    threshold: float
    satisfied: bool
    eps_max: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _power_integral(lo: float, hi: float, beta: float) -> float:
    """int_lo^hi s^-beta ds (hi may be inf)."""
    if math.isinf(hi):
        return math.inf if beta <= 1 else lo ** (1 - beta) / (beta - 1)
    if lo >= hi:
        return 0.0
    if beta == 1:
        return math.log(hi / lo)
    return (hi ** (1 - beta) - lo ** (1 - beta)) / (1 - beta)


def certify_abstract(
    profile: VolumeProfile | dict,
    p: float,
    gamma: float,
    K1: float,
    eps: float,
    C: float | None = None,
    g: GroupModel | None = None,
) -> AbstractCertificate:
    """Closed-form bound on int_0^inf ||e^{-sL}(eps h_gamma)||^(p-1) ds.

    Polynomial (a, b):  eps^(p-1) C (int_{min(gamma,1)}^1 s^(-b(p-1)/2) ds + int_1^inf s^(-a(p-1)/2) ds)
    Exponential (d):    eps^(p-1) C gamma^(1-beta) / (beta-1), beta = d(p-1)/2

    C bounds sup h_s^(p-1) against the power law.  Without an explicit C, a
    GroupModel must be attached: C is then (2 C_fit)^(p-1) with C_fit the
    largest envelope constant of the fitted kernel profile.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if not p > 1:
        raise ValueError("p must exceed 1")
    if isinstance(profile, VolumeProfile):
        prof = {"profile": "exponential", "d": profile.d} if profile.exponential else {
            "profile": "polynomial", "a": profile.a, "b": profile.b}
    else:
        kind = profile.get("profile", "polynomial")
        keys = ("d",) if kind == "exponential" else ("a", "b")
        prof = {"profile": kind, **{k: profile[k] for k in keys}}
    if C is None:
        if g is None:
            raise ValueError("C must be supplied when no GroupModel is attached")
        fitted = kernel_profile(g)
        C_fit = max(v for pair in (fitted.small, fitted.large) for v in pair if math.isfinite(v))
        C = (2.0 * C_fit) ** (p - 1)
    threshold = 1.0 / (K1 * (p - 1))
    if prof["profile"] == "exponential":
        beta = prof["d"] * (p - 1) / 2.0
        integral = math.inf if beta <= 1 else gamma ** (1 - beta) / (beta - 1)
    else:
        a, b = float(prof["a"]), float(prof["b"])
        ba, bb = a * (p - 1) / 2.0, b * (p - 1) / 2.0
        large = _power_integral(1.0, math.inf, ba)
        integral = math.inf if math.isinf(large) else _power_integral(min(gamma, 1.0), 1.0, bb) + large
    if math.isinf(integral):
        return AbstractCertificate(prof, p, gamma, K1, eps, C, "divergent", math.inf, threshold, False, 0.0)
    bound = eps ** (p - 1) * C * integral
    eps_max = (threshold / (C * integral)) ** (1.0 / (p - 1)) if integral > 0 else math.inf
    return AbstractCertificate(prof, p, gamma, K1, eps, C, "finite-bound", bound, threshold, bound < threshold, eps_max)


# ---------------------------------------------------------------- reports

def _fmt(v):
    if isinstance(v, bool) or v is None or isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return _Num("%.12g" % v)
    if isinstance(v, dict):
        return {str(k): _fmt(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_fmt(x) for x in v]
    return str(v)


class _Num(str):
    """Preformatted number emitted verbatim into JSON."""


def _dump_json(obj, indent=2, level=0) -> str:
    pad, inner = " " * (indent * level), " " * (indent * (level + 1))
    if isinstance(obj, _Num):
        return str(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(k)}: {_dump_json(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(x, (dict, list)) for x in obj):
            return "[" + ", ".join(_dump_json(x, indent, level + 1) for x in obj) + "]"
        items = [inner + _dump_json(x, indent, level + 1) for x in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    return json.dumps(obj)


def _csv_cell(v) -> str:
    v = _fmt(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _normalize(results, kind: str | None):
    if isinstance(results, SweepTable):
        return "sweep", results.rows, {"p_F": results.p_F, **results.meta}
    if dataclasses.is_dataclass(results) and not isinstance(results, type):
        d = results.to_dict() if hasattr(results, "to_dict") else dataclasses.asdict(results)
        return kind or type(results).__name__.lower(), [d], {}
    if isinstance(results, dict):
        return kind or "report", [results], {}
    rows = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in results]
    return kind or "rows", rows, {}


def emit_report(results, out_dir, fmt: str = "csv", name: str | None = None, kind: str | None = None) -> Path:
    """Write ``results`` as ``<name>.csv`` or ``<name>.json`` and return the path.

    Output is byte-identical for identical inputs: fixed key order, floats
    as %.12g, no timestamps.  Sweep timings go to a separate file.
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    kind, rows, meta = _normalize(results, kind)
    if not rows:
        raise ValueError("nothing to report")
    name = name or kind
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.{fmt}"
    if fmt == "json":
        doc = {"schema": f"fujita_lab.{kind}/{SCHEMA_VERSION}", "meta": meta, "rows": rows}
        path.write_text(_dump_json(_fmt(doc)) + "\n")
    else:
        cols = list(ROW_FIELDS) if kind == "sweep" else list(dict.fromkeys(k for r in rows for k in r))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_csv_cell(r.get(c)) if not isinstance(r.get(c), (dict, list)) else
                        _dump_json(_fmt(r.get(c)), indent=0).replace("\n", " ") for c in cols])
        path.write_text(buf.getvalue())
    if isinstance(results, SweepTable) and results.timings:
        (out / f"{name}.timings.json").write_text(json.dumps(results.timings, indent=2, sort_keys=True) + "\n")
    return path


def _parse(v):
    if isinstance(v, dict):
        return {k: _parse(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_parse(x) for x in v]
    if v in ("inf", "-inf", "nan"):
        return float(v)
    return v


def load_report(path) -> dict:
    """Read a report written by emit_report into {"schema", "meta", "rows"}."""
    path = Path(path)
    if path.suffix == ".json":
        return _parse(json.loads(path.read_text()))
    with open(path, newline="") as fh:
        rows = [{k: _scalar(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    return {"schema": None, "meta": {}, "rows": rows}


def _scalar(text: str):
    if text == "":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return {"true": True, "false": False}.get(text, text)
