"""Command line entry point: ``fujita-lab <command> --config exp.toml``.

Exit codes: 0 completed, 1 configuration error, 2 invariant violation.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .blowup import integrate_nonlinear
from .config import ExperimentConfig, echo_config, load_config
from .errors import ConfigError, InvariantViolation
from .fieldio import save_field
from .harness import certify_abstract, emit_report, initial_data, operator_for, run_sweep
from .heat import check_resolved, kernel_sup_curve, verify_kernel_bounds
from .mild import Nonlinearity, decay_envelope_check, existence_condition, picard_solve, sandwich_check

log = logging.getLogger("fujita_lab")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2


def _default_kernel_times(cfg: ExperimentConfig) -> list[float]:
    g = cfg.model()
    t0 = max(4.0 * max(g.spacing) ** 2, 0.1)
    return [float(t) for t in np.geomspace(t0, 4.0 * t0, 5)]


def cmd_kernel_check(cfg: ExperimentConfig, args) -> int:
    g = cfg.model()
    op = operator_for(g, cfg.scheme)
    times = cfg.kernel.get("times") or _default_kernel_times(cfg)
    for t in times:
        check_resolved(g, t)
    radii = cfg.kernel.get("radii") or [float(r) for r in np.linspace(0.5, 2.0, 4) * math.sqrt(min(times))]
    rep = verify_kernel_bounds(g, times, radii, cfg.kernel.get("slack", 2.0), op, cfg.kernel.get("shell"))
    ts, sups, masses = kernel_sup_curve(g, times, op)
    curve = [{"t": t, "sup_norm": s, "mass": m} for t, s, m in zip(ts, sups, masses)]
    emit_report(curve, args.out, args.format, name="kernel_curve", kind="kernel_curve")
    emit_report(rep, args.out, args.format, name="kernel_bounds", kind="kernel_bounds")
    print(f"kernel bounds: {'pass' if rep.passed else 'fail'} (ratio {rep.violation_ratio:.4g}, slack {rep.slack:g})")
    return EXIT_OK


def cmd_certify(cfg: ExperimentConfig, args) -> int:
    g = cfg.model()
    op = operator_for(g, cfg.scheme)
    rows = []
    for p, eps, gamma in cfg.cells():
        nl = Nonlinearity(p, cfg.K1, cfg.K2)
        cert = existence_condition(g, initial_data(cfg, g, eps, gamma, op), nl, cfg.controls.S_cut, op=op)
        rows.append({"p": p, "eps": eps, "gamma": gamma, **cert.to_dict()})
    emit_report(rows, args.out, args.format, name="certificates", kind="certificates")
    if cfg.abstract is not None:
        ab = cfg.abstract
        K1 = cfg.K1 if cfg.K1 is not None else 1.0
        certs = [
            certify_abstract(ab, p, gamma if gamma > 0 else 1.0, K1, eps, C=ab.get("C"), g=None if "C" in ab else g)
            for p, eps, gamma in cfg.cells()
        ]
        emit_report(certs, args.out, args.format, name="abstract_certificates", kind="abstract_certificates")
    for r in rows:
        print(f"p={r['p']:g} eps={r['eps']:g} gamma={r['gamma']:g}: {r['verdict']} (I={r['value']:.6g})")
    return EXIT_OK


def cmd_solve(cfg: ExperimentConfig, args) -> int:
    g = cfg.model()
    op = operator_for(g, cfg.scheme)
    ctl = cfg.controls
    rows = []
    for p, eps, gamma in cfg.cells():
        nl = Nonlinearity(p, cfg.K1, cfg.K2)
        u0 = initial_data(cfg, g, eps, gamma, op)
        cert = existence_condition(g, u0, nl, ctl.S_cut, op=op)
        row = {"p": p, "eps": eps, "gamma": gamma, "certificate": cert.verdict}
        if cert.verdict == "satisfied":
            sol = picard_solve(g, u0, nl, ctl.T_max, ctl.steps, ctl.tol, ctl.k_max, op=op)
            row.update(iterations=sol.iterations, residual=sol.residual)
            row["sandwich"] = sandwich_check(sol, cert, strict=False).passed
            if cfg.family == "kernel":
                row["decay"] = decay_envelope_check(sol, gamma, eps * cert.C, op=op).passed
            tag = f"p{p:g}_eps{eps:g}_gamma{gamma:g}"
            emit_report(sol, Path(args.out) / "solutions", "json", name=f"solution_{tag}", kind="mild_solution")
            if ctl.dump_fields:
                save_field(Path(args.out) / "fields" / f"u_{tag}", sol.snapshot(-1))
        rows.append(row)
    emit_report(rows, args.out, args.format, name="solve", kind="solve")
    return EXIT_OK


def cmd_blowup(cfg: ExperimentConfig, args) -> int:
    g = cfg.model()
    ctl = cfg.controls
    rows = []
    for p, eps, gamma in cfg.cells():
        nl = Nonlinearity(p, cfg.K1, cfg.K2)
        u0 = initial_data(cfg, g, eps, gamma, operator_for(g, cfg.scheme))
        sup0 = float(np.max(u0.values))
        rep = integrate_nonlinear(
            g, u0, nl, dt0=ctl.dt0, dt_min=ctl.dt_min, T_max=ctl.T_max, safety=ctl.safety,
            M_max=ctl.M_max_factor * sup0 if sup0 > 0 else None,
        )
        tag = f"p{p:g}_eps{eps:g}_gamma{gamma:g}"
        traces = Path(args.out) / "traces"
        traces.mkdir(parents=True, exist_ok=True)
        (traces / f"trace_{tag}.csv").write_text(rep.trace_csv())
        rows.append({"p": p, "eps": eps, "gamma": gamma, **rep.to_dict()})
        print(f"p={p:g} eps={eps:g} gamma={gamma:g}: {rep.classification} ({rep.terminating}, T*={rep.T_star:.6g})")
    emit_report(rows, args.out, args.format, name="blowup", kind="blowup")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    table = run_sweep(cfg, workers=args.workers)
    path = emit_report(table, args.out, args.format, name="sweep")
    bad = [r for r in table.rows if str(r["status"]).startswith("invariant")]
    for r in table.rows:
        print(f"p={r['p']:g} eps={r['eps']:g} gamma={r['gamma']:g}: {r['classification']}, "
              f"certificate {r['certificate']}, status {r['status']}")
    print(f"wrote {path}")
    return EXIT_INVARIANT if bad else EXIT_OK


COMMANDS = {
    "kernel-check": cmd_kernel_check,
    "certify": cmd_certify,
    "solve": cmd_solve,
    "blowup": cmd_blowup,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fujita-lab", description="Semilinear heat equation laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", required=True, help="experiment config (TOML)")
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("--format", choices=("csv", "json"), default=None, help="report format")
        p.add_argument("--workers", type=int, default=1, help="parallel sweep cells")
        p.add_argument("--seed", type=int, default=None, help="seed for randomized probes (u64)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, out_dir=args.out, echo=False)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        echo_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out = cfg.out_dir
    args.format = args.format or cfg.format
    try:
        return COMMANDS[args.command](cfg, args)
    except InvariantViolation as exc:
        print(f"invariant violation: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
