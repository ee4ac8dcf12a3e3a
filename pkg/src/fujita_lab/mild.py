"""Mild solutions by Picard iteration, the explicit barrier omega(t), and the
global-existence certificate

    I(u0, p) = int_0^inf ||e^{-sL} u0||_inf^(p-1) ds  <  1 / (K1 (p-1)).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import (
    BarrierBlowup,
    EnvelopeViolated,
    InsufficientSamples,
    KernelUnderResolved,
    NegativeData,
    NoConvergence,
    NonMonotoneIterates,
    ProfileUnfitted,
    SandwichViolated,
)
from .groups import GroupModel, VolumeProfile, fit_profile
from .heat import (
    GridField,
    HeatOperator,
    default_operator,
    heat_kernel,
    kernel_series,
    kernel_sup_curve,
    mass,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Nonlinearity:
    """f with K2 u^p <= f(u) <= K1 u^p.  Without ``func``, f(u) = K u^p."""

    p: float
    K1: float | None = 1.0
    K2: float | None = 1.0
    func: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not (self.p > 1 and math.isfinite(self.p)):
            raise ValueError(f"exponent p must satisfy 1 < p < inf, got {self.p}")
        if self.K1 is None and self.K2 is None:
            raise ValueError("at least one of K1, K2 is required")
        for name in ("K1", "K2"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.K1 is not None and self.K2 is not None and self.K2 > self.K1:
            raise ValueError(f"K2={self.K2} exceeds K1={self.K1}")
        probe = np.linspace(0.0, 10.0, 201)
        fv = np.asarray(self(probe), dtype=float)
        if np.any(fv < 0) or np.any(np.diff(fv) < -1e-12 * np.abs(fv[1:])):
            raise ValueError("f must be nonnegative and nondecreasing on [0, inf)")

    @property
    def K(self) -> float:
        return self.K1 if self.K1 is not None else self.K2

    @property
    def is_power(self) -> bool:
        return self.func is None

    @property
    def A_p(self) -> float:
        """(K2 (p-1))^(-1/(p-1))."""
        if self.K2 is None:
            raise ValueError("A_p needs the lower constant K2")
        return (self.K2 * (self.p - 1)) ** (-1.0 / (self.p - 1))

    def __call__(self, u):
        u = np.maximum(u, 0.0)
        if self.func is not None:
            return self.func(u)
        return self.K * u**self.p


class Curve(NamedTuple):
    times: np.ndarray
    values: np.ndarray

    def at(self, t):
        return np.interp(t, self.times, self.values)


@dataclass
class ExistenceCertificate:
    numeric: float
    tail_bound: float
    threshold: float
    verdict: str  # satisfied | violated | divergent
    C: float
    p: float
    K1: float
    fujita_exponent: float
    S_cut: float
    times: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    integrand: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def value(self) -> float:
        return self.numeric + self.tail_bound

    def partial_integrals(self) -> Curve:
        """t -> int_0^t ||e^{-sL}u0||^(p-1) ds on the certificate's own grid."""
        return Curve(self.times, _cumtrapz(self.integrand, self.times))

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "numeric": self.numeric,
            "tail_bound": self.tail_bound,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "C": self.C,
            "p": self.p,
            "K1": self.K1,
            "fujita_exponent": self.fujita_exponent,
            "S_cut": self.S_cut,
        }


def _cumtrapz(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(np.asarray(t, dtype=float))
    if len(t) > 1:
        out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


def _require_nonnegative(u: GridField, what: str = "u0") -> None:
    if not u.is_nonnegative():
        raise NegativeData(f"{what} must be nonnegative (min {u.values.min():.3g})")


def kernel_profile(g: GroupModel, times: Sequence[float] | None = None, op: HeatOperator | None = None) -> VolumeProfile:
    """Fit a VolumeProfile to the simulated heat kernel of ``g``."""
    if times is None:
        times = np.geomspace(0.1, 10.0, 13)
    try:
        ts, sups, _ = kernel_sup_curve(g, times, op)
        return fit_profile(g, (ts, sups))
    except (KernelUnderResolved, InsufficientSamples) as exc:
        raise ProfileUnfitted(f"cannot fit a kernel profile on this lattice: {exc}") from exc


def _semigroup_curve(g: GroupModel, u0: GridField, times: np.ndarray, op: HeatOperator) -> np.ndarray:
    """||e^{-sL} u0||_inf at increasing ``times`` (first entry may be 0)."""
    out = np.empty(len(times))
    cur, now = u0.values, 0.0
    for i, s in enumerate(times):
        cur = op.apply(cur, s - now)
        now = s
        out[i] = np.max(np.abs(cur))
    return out


def existence_condition(
    g: GroupModel,
    u0: GridField,
    nl: Nonlinearity,
    S_cut: float = 100.0,
    profile: VolumeProfile | None = None,
    n_grid: int = 400,
    op: HeatOperator | None = None,
) -> ExistenceCertificate:
    """Evaluate the global-existence integral with a certified tail.

    The integral on [0, S_cut] uses the composite trapezoid rule on a
    geometric grid.  Beyond S_cut, ||e^{-sL}u0||_inf <= C_fit mass(u0)
    s^(-D/2), with C_fit taken from the kernel profile; the tail bound is
    twice the resulting closed-form integral.
    """
    _require_nonnegative(u0)
    if nl.K1 is None:
        raise ValueError("existence condition needs the upper constant K1")
    if S_cut < 1.0:
        raise ValueError("S_cut must reach past the crossover t = 1")
    p, K1 = nl.p, nl.K1
    threshold = 1.0 / (K1 * (p - 1))
    pF = g.fujita_exponent
    op = op or default_operator(g)
    times = np.concatenate([[0.0], np.geomspace(S_cut * 1e-6, S_cut, n_grid)])
    m0 = mass(u0)
    if m0 == 0.0:
        zeros = np.zeros_like(times)
        return ExistenceCertificate(0.0, 0.0, threshold, "satisfied", 1.0, p, K1, pF, S_cut, times, zeros)

    integrand = _semigroup_curve(g, u0, times, op) ** (p - 1)
    numeric = float(_cumtrapz(integrand, times)[-1])
    beta = (g.D or 0) * (p - 1) / 2.0
    if beta <= 1.0:
        return ExistenceCertificate(numeric, math.inf, threshold, "divergent", math.inf, p, K1, pF, S_cut, times, integrand)

    if profile is None:
        profile = kernel_profile(g, op=op)
    C_fit = profile.large_time_constant(g.D)
    tail = 2.0 * (C_fit * m0) ** (p - 1) * S_cut ** (1.0 - beta) / (beta - 1.0)
    value = numeric + tail
    if value < threshold:
        C = (1.0 - K1 * (p - 1) * value) ** (-1.0 / (p - 1))
        verdict = "satisfied"
    else:
        C, verdict = math.inf, "violated"
    return ExistenceCertificate(numeric, tail, threshold, verdict, C, p, K1, pF, S_cut, times, integrand)


def critical_epsilon(
    g: GroupModel,
    gamma: float,
    nl: Nonlinearity,
    S_cut: float = 100.0,
    rtol: float = 1e-6,
    op: HeatOperator | None = None,
) -> float:
    """Largest eps for which eps*h_gamma passes the existence test (bisection)."""
    base = small_data_generator(g, gamma, 1.0, op)

    def ok(eps):
        return existence_condition(g, base.scaled(eps), nl, S_cut, op=op).verdict == "satisfied"

    if not ok(1e-12):
        return 0.0
    lo, hi = 1e-12, 1.0
    while ok(hi):
        lo, hi = hi, hi * 2.0
        if hi > 1e12:
            return math.inf
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


def omega_curve(cert: ExistenceCertificate, partial_integrals: Curve | None = None) -> Curve:
    """omega(t) = (1 - K1 (p-1) P(t))^(-1/(p-1)) for partial integrals P.

    Defined wherever the bracket stays positive, whatever the verdict; a
    non-positive bracket raises BarrierBlowup.
    """
    if partial_integrals is None:
        partial_integrals = cert.partial_integrals()
    t, P = (np.asarray(v, dtype=float) for v in partial_integrals)
    if np.any(np.diff(P) < -1e-14 * np.maximum(np.abs(P[1:]), 1.0)):
        raise ValueError("partial integrals must be nondecreasing")
    bracket = 1.0 - cert.K1 * (cert.p - 1) * P
    if np.any(bracket <= 0):
        bad = t[np.argmax(bracket <= 0)]
        raise BarrierBlowup(f"barrier bracket vanishes at t={bad:.6g}; certificate inputs inconsistent")
    return Curve(t, bracket ** (-1.0 / (cert.p - 1)))


@dataclass
class MildSolution:
    model: GroupModel
    times: np.ndarray
    snapshots: np.ndarray = field(repr=False)
    linear: np.ndarray = field(repr=False)  # e^{-tL} u0 at each snapshot
    iterations: int
    residual: float
    gaps: list[float]
    barrier_ratios: list[float]
    partial: np.ndarray = field(repr=False)  # int_0^t ||e^{-sL}u0||^(p-1) on the snapshot grid
    p: float
    K1: float | None
    omega: np.ndarray | None = field(default=None, repr=False)  # discrete barrier per snapshot

    def snapshot(self, j: int) -> GridField:
        return GridField(self.snapshots[j], self.model, time=float(self.times[j]))

    def index_of(self, t: float, rtol: float = 1e-12) -> int | None:
        j = int(np.argmin(np.abs(self.times - t)))
        return j if abs(self.times[j] - t) <= rtol * max(1.0, abs(t)) else None

    def upper_envelope(self, omega: Curve | None = None) -> np.ndarray:
        w = self.omega if omega is None else omega.at(self.times)
        return w.reshape((-1,) + (1,) * self.model.n) * self.linear

    def to_dict(self) -> dict:
        cv = self.model.cell_volume
        axes = tuple(range(1, self.model.n + 1))
        return {
            "group": self.model.spec(),
            "p": self.p,
            "K1": self.K1,
            "iterations": self.iterations,
            "residual": self.residual,
            "gaps": list(self.gaps),
            "snapshots": [
                {"t": float(t), "min": float(lo), "max": float(hi), "mass": float(m)}
                for t, lo, hi, m in zip(
                    self.times,
                    self.snapshots.min(axis=axes),
                    self.snapshots.max(axis=axes),
                    self.snapshots.sum(axis=axes) * cv,
                )
            ],
        }


def time_grid(T: float, steps: int, kind: str = "graded") -> np.ndarray:
    """Snapshot grid on [0, T]; ``graded`` clusters points quadratically at 0."""
    s = np.linspace(0.0, 1.0, steps + 1)
    if kind == "uniform":
        return T * s
    if kind == "graded":
        return T * s**2
    raise ValueError(f"unknown grid kind {kind!r}")


def discrete_barrier(times: np.ndarray, a: np.ndarray, p: float) -> np.ndarray:
    """Barrier consistent with the trapezoid Duhamel sum.

    Solves w_j = 1 + sum_i c_ji a_i w_i^p with trapezoid weights c_ji, i.e.
    the trapezoid discretisation of w' = a(t) w^p, w(0) = 1, whose exact
    solution is omega(t) when a = K1 ||e^{-tL}u0||^(p-1).  Because the
    propagator is positive, w_j e^{-t_j L}u0 dominates every Picard iterate
    on the same grid exactly, not only up to quadrature error.  Entries after
    the scalar equation loses its root are inf.
    """
    w = np.full(len(times), np.inf)
    w[0] = 1.0
    for j in range(1, len(times)):
        c = 0.5 * (times[j] - times[j - 1])
        rhs = w[j - 1] + c * a[j - 1] * w[j - 1] ** p
        if not np.isfinite(rhs):
            break
        if c * a[j] == 0.0:
            w[j] = rhs
            continue
        # smallest root of w - c a_j w^p = rhs; it lies below the maximiser of the left side
        k = c * a[j]
        w_star = (1.0 / (k * p)) ** (1.0 / (p - 1))
        if w_star - k * w_star**p < rhs:
            break
        w[j] = brentq(lambda x: x - k * x**p - rhs, rhs, w_star, xtol=1e-16 * rhs, rtol=1e-15)
    return w


def _duhamel(op: HeatOperator, times: np.ndarray, forcing: np.ndarray) -> np.ndarray:
    """Trapezoid Duhamel integrals J_j = int_0^{t_j} e^{-(t_j-s)L} F(s) ds.

    Uses J_j = e^{-dL}(J_{j-1} + d/2 F_{j-1}) + d/2 F_j, which is the
    composite trapezoid rule written recursively (semigroup property).
    """
    out = np.zeros_like(forcing)
    for j in range(1, len(times)):
        d = times[j] - times[j - 1]
        out[j] = op.apply(out[j - 1] + 0.5 * d * forcing[j - 1], d) + 0.5 * d * forcing[j]
    return out


def picard_solve(
    g: GroupModel,
    u0: GridField,
    nl: Nonlinearity,
    T: float,
    steps: int = 200,
    tol: float = 1e-8,
    k_max: int = 50,
    grid: str | Sequence[float] = "graded",
    op: HeatOperator | None = None,
) -> MildSolution:
    """Picard iteration v_{k+1} = F v_k for the Duhamel map F, from v_0 = e^{-tL}u0.

    Iterates must be pointwise nondecreasing in k; a decrease beyond
    round-off means the propagator is not positive and is fatal.
    """
    _require_nonnegative(u0)
    if not (T > 0 and tol > 0):
        raise ValueError("T and tol must be positive")
    op = op or default_operator(g)
    times = np.asarray(grid, dtype=float) if not isinstance(grid, str) else time_grid(T, steps, grid)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must start at 0 and increase strictly")

    linear = np.empty((len(times),) + tuple(g.points))
    cur, now = u0.values, 0.0
    for j, t in enumerate(times):
        cur = op.apply(cur, t - now)
        now = t
        linear[j] = cur
    lin_sup = np.max(np.abs(linear.reshape(len(times), -1)), axis=1)
    partial = _cumtrapz(lin_sup ** (nl.p - 1), times)

    scale = max(float(np.max(linear)), 1e-300)
    slack = 1e-12 * scale
    barrier = None
    omega = None
    if nl.K1 is not None:
        omega = discrete_barrier(times, nl.K1 * lin_sup ** (nl.p - 1), nl.p)
        barrier = omega.reshape((-1,) + (1,) * g.n) * linear

    def ratio_to_barrier(v):
        if barrier is None:
            return math.nan
        finite = np.isfinite(barrier) & (barrier > slack)
        return float(np.max(v[finite] / barrier[finite])) if finite.any() else math.nan

    v = linear.copy()
    gaps, ratios = [], [ratio_to_barrier(v)]
    for k in range(1, k_max + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = linear + _duhamel(op, times, nl(v))
        if not np.all(np.isfinite(nxt)):
            raise NoConvergence(f"iterate {k} overflowed; no global mild solution on [0, {T}]")
        drop = float(np.max(v - nxt))
        if drop > slack + 1e-12 * float(np.max(nxt)):
            raise NonMonotoneIterates(f"iterate {k} decreased by {drop:.3g}; propagator not positive")
        gap = float(np.max(np.abs(nxt - v)))
        gaps.append(gap)
        ratios.append(ratio_to_barrier(nxt))
        v = nxt
        if gap < tol:
            break
    else:
        raise NoConvergence(f"Picard gap {gaps[-1]:.3g} above tol {tol:.3g} after {k_max} iterations")

    check = linear + _duhamel(op, times, nl(v))
    residual = float(np.max(np.abs(check - v)))
    log.debug("picard converged in %d iterations, residual %.3g", len(gaps), residual)
    return MildSolution(g, times, v, linear, len(gaps), residual, gaps, ratios, partial, nl.p, nl.K1, omega)


@dataclass
class EnvelopeReport:
    passed: bool
    max_ratio: float
    worst_time: float
    worst_index: tuple
    violation: float
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_ratio": self.max_ratio,
            "worst_time": self.worst_time,
            "worst_index": list(self.worst_index),
            "violation": self.violation,
            **self.detail,
        }


def _worst(sol: MildSolution, excess: np.ndarray):
    flat = int(np.argmax(excess))
    idx = np.unravel_index(flat, excess.shape)
    return float(excess[idx]), float(sol.times[idx[0]]), tuple(int(i) for i in idx[1:])


def sandwich_check(
    sol: MildSolution,
    cert: ExistenceCertificate,
    omega: Curve | None = None,
    rel_slack: float = 1e-9,
    strict: bool = True,
) -> EnvelopeReport:
    """e^{-tL}u0 <= u(t) <= omega(t) e^{-tL}u0 <= C e^{-tL}u0 at every snapshot.

    Without an explicit ``omega`` the solver's discrete barrier is used; its
    largest deviation from the closed-form omega is reported.  The last link
    is checked only when the certificate supplies a finite C.
    """
    slack = rel_slack * max(float(np.max(sol.snapshots)), 1e-300)
    detail = {"slack": slack}
    if omega is None:
        w_t = sol.omega
        bracket = 1.0 - cert.K1 * (cert.p - 1) * sol.partial
        ok = (bracket > 0) & np.isfinite(w_t)
        if ok.any():
            closed = bracket[ok] ** (-1.0 / (cert.p - 1))
            detail["omega_closed_form_dev"] = float(np.max(np.abs(w_t[ok] / closed - 1.0)))
    else:
        w_t = omega.at(sol.times)
    w = w_t.reshape((-1,) + (1,) * sol.model.n)
    with np.errstate(invalid="ignore"):
        upper = np.where(sol.linear > 0, w * sol.linear, 0.0)
    excess = np.maximum(sol.linear - sol.snapshots, sol.snapshots - upper)
    if math.isfinite(cert.C):
        excess = np.maximum(excess, upper - cert.C * sol.linear)
        detail["C"] = cert.C
    worst, t_w, idx = _worst(sol, excess)
    sig = sol.linear > slack
    ratio = float(np.max(sol.snapshots[sig] / sol.linear[sig])) if sig.any() else 1.0
    detail["omega_max"] = float(np.max(w_t))
    rep = EnvelopeReport(
        passed=worst <= slack,
        max_ratio=ratio,
        worst_time=t_w,
        worst_index=idx,
        violation=max(worst, 0.0),
        detail=detail,
    )
    if strict and not rep.passed:
        raise SandwichViolated(f"sandwich violated by {worst:.3g} at t={t_w:.6g}, index {idx}")
    return rep


def small_data_generator(g: GroupModel, gamma: float, eps: float, op: HeatOperator | None = None) -> GridField:
    """eps * h_gamma."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    k = heat_kernel(g, gamma, op)
    return GridField(eps * k.values, g, time=None)


def decay_envelope_check(
    sol: MildSolution,
    gamma: float,
    C_env: float,
    rel_slack: float = 1e-9,
    strict: bool = False,
    op: HeatOperator | None = None,
) -> EnvelopeReport:
    """u(t_j) <= C_env h_{t_j + gamma} pointwise at every snapshot."""
    g = sol.model
    kernels = np.stack([k.values for k in kernel_series(g, sol.times + gamma, op)])
    slack = rel_slack * max(float(np.max(sol.snapshots)), 1e-300)
    excess = sol.snapshots - C_env * kernels
    worst, t_w, idx = _worst(sol, excess)
    sig = kernels > 1e-12 * float(np.max(kernels))
    ratio = float(np.max(sol.snapshots[sig] / kernels[sig]))
    rep = EnvelopeReport(
        passed=worst <= slack,
        max_ratio=ratio,
        worst_time=t_w,
        worst_index=idx,
        violation=max(worst, 0.0),
        detail={"C_env": C_env, "gamma": gamma, "slack": slack},
    )
    if strict and not rep.passed:
        raise EnvelopeViolated(f"decay envelope violated by {worst:.3g} at t={t_w:.6g}")
    return rep
