"""Discrete heat semigroup, heat kernels and Gaussian-bound verification.

Every propagator offered here is elementwise nonnegative with row sums at
most one, so the discrete semigroup is substochastic.  The FFT propagator is
exact in time; stencil propagators sub-step with a step that respects their
positivity cap.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

from .errors import (
    CflViolation,
    FitFailure,
    KernelUnderResolved,
    SchemeUnsupported,
    UnsupportedModel,
)
from .groups import GroupModel, PERIODIC, distance_field, sublaplacian, volume_growth

SCHEMES = ("spectral", "crank_nicolson", "explicit_substochastic")


@dataclass(frozen=True, eq=False)
class GridField:
    """Sampled function on the lattice of ``model``.

    ``lost_mass`` records mass that left through Dirichlet walls while this
    field was produced by the semigroup.
    """

    values: np.ndarray
    model: GroupModel
    time: float | None = None
    lost_mass: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != tuple(self.model.points):
            raise ValueError(f"field shape {v.shape} does not match lattice {self.model.points}")
        object.__setattr__(self, "values", v)

    def is_nonnegative(self, rel_eps: float = 1e-12) -> bool:
        top = float(np.max(np.abs(self.values))) if self.values.size else 0.0
        return bool(np.min(self.values) >= -rel_eps * top)

    def scaled(self, factor: float) -> "GridField":
        return GridField(self.values * factor, self.model, self.time)


def mass(u: GridField) -> float:
    """Haar-weighted l1 sum."""
    return float(np.sum(np.abs(u.values)) * u.model.cell_volume)


def sup_norm(u: GridField) -> float:
    return float(np.max(np.abs(u.values)))


def coset_order(g: GroupModel) -> int:
    """Number of decoupled sublattices of the H^1 stencil (1 if none).

    When c = hx hy / (2 hz) is an integer, a horizontal step shifts the
    z-index by c times the other horizontal index, so k + c i j mod 2c is
    conserved and the walk splits into 2c cosets.
    """
    if g.kind != "heisenberg1":
        return 1
    hx, hy, hz = g.spacing
    c = hx * hy / (2 * hz)
    return 2 * round(c) if abs(c - round(c)) < 1e-9 and round(c) >= 1 else 1


def delta_field(g: GroupModel) -> GridField:
    """Unit mass at the identity.

    On H^1 lattices whose stencil decouples into cosets, the mass is spread
    over z-offsets -c..c with trapezoid weights so that every coset carries
    an equal share (spread width hx*hy in z).
    """
    v = np.zeros(g.points)
    m = coset_order(g)
    if m == 1:
        v[g.identity_index] = 1.0 / g.cell_volume
        return GridField(v, g, time=0.0)
    c = m // 2
    i0, j0, k0 = g.identity_index
    for dk in range(-c, c + 1):
        w = 0.5 if abs(dk) == c else 1.0
        v[i0, j0, (k0 + dk) % g.points[2]] += w / m / g.cell_volume
    return GridField(v, g, time=0.0)


def wavenumbers(g: GroupModel) -> list[np.ndarray]:
    return [2 * np.pi * np.fft.fftfreq(N, d=h) for N, h in zip(g.points, g.spacing)]


def laplacian_symbol(g: GroupModel, symbol: str = "exact") -> np.ndarray:
    """Eigenvalues lambda_k >= 0 of -L on a fully periodic abelian lattice.

    ``exact`` uses |k|^2; ``lattice`` uses the 3-point symbol
    sum_i 4/h_i^2 sin^2(k_i h_i / 2), whose semigroup is the continuous-time
    random walk and is therefore exactly positive.
    """
    ks = wavenumbers(g)
    parts = []
    for k, h in zip(ks, g.spacing):
        if symbol == "exact":
            parts.append(k**2)
        elif symbol == "lattice":
            parts.append(4.0 / h**2 * np.sin(k * h / 2) ** 2)
        else:
            raise ValueError(f"unknown symbol {symbol!r}")
    grids = np.meshgrid(*parts, indexing="ij")
    return np.sum(grids, axis=0)


@dataclass(frozen=True, eq=False)
class HeatOperator:
    model: GroupModel
    scheme: str
    dt: float
    symbol: str = "exact"
    eigenvalues: np.ndarray | None = field(default=None, repr=False)
    generator: sp.csr_matrix | None = field(default=None, repr=False)
    certificate: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def multipliers(self) -> np.ndarray:
        """Per-mode factors exp(-dt lambda_k) of one step (spectral only)."""
        if self.eigenvalues is None:
            raise SchemeUnsupported(f"{self.scheme} has no Fourier multipliers")
        return np.exp(-self.dt * self.eigenvalues)

    def step_matrix(self, tau: float) -> sp.csr_matrix:
        """Explicit one-step matrix I + tau*G (tau must respect the cap)."""
        key = ("explicit", tau)
        if key not in self._cache:
            n = self.generator.shape[0]
            self._cache[key] = (sp.identity(n, format="csr") + tau * self.generator).tocsr()
        return self._cache[key]

    def _cn(self, tau: float):
        key = ("cn", tau)
        if key not in self._cache:
            n = self.generator.shape[0]
            eye = sp.identity(n, format="csc")
            lu = spla.splu((eye - 0.5 * tau * self.generator).tocsc())
            self._cache[key] = (lu, (eye + 0.5 * tau * self.generator).tocsr())
        return self._cache[key]

    def apply(self, values: np.ndarray, t: float) -> np.ndarray:
        """e^{t L} applied to ``values``; a leading batch axis is allowed."""
        if t < 0:
            raise ValueError(f"diffusion time must be >= 0, got {t}")
        values = np.asarray(values, dtype=float)
        if t == 0:
            return values.copy()
        n = self.model.n
        if self.scheme == "spectral":
            axes = tuple(range(-n, 0))
            spec = np.fft.fftn(values, axes=axes)
            spec *= np.exp(-t * self.eigenvalues)
            return np.fft.ifftn(spec, axes=axes).real
        if self.dt <= 0:
            raise CflViolation("stencil operator built with dt = 0 can only apply t = 0")
        batch = values.shape[:-n]
        flat = values.reshape(int(np.prod(batch, dtype=int)), -1).T
        steps = max(1, math.ceil(t / self.dt - 1e-12))
        tau = t / steps
        if self.scheme == "explicit_substochastic":
            P = self.step_matrix(tau)
            for _ in range(steps):
                flat = P @ flat
        else:
            lu, B = self._cn(tau)
            for _ in range(steps):
                flat = lu.solve(np.ascontiguousarray(B @ flat))
        return flat.T.reshape(values.shape)


def positivity_cap(g: GroupModel, scheme: str) -> float:
    """Largest step for which the stencil propagator stays nonnegative."""
    G, _ = sublaplacian(g)
    worst = float(np.max(-G.diagonal()))
    if scheme == "explicit_substochastic":
        return 1.0 / worst
    if scheme == "crank_nicolson":
        # keeps I + dt/2 G nonnegative; (I - dt/2 G)^{-1} is an M-matrix inverse
        return 2.0 / worst
    raise SchemeUnsupported(scheme)


def build_propagator(g: GroupModel, dt: float, scheme: str = "spectral", symbol: str = "exact") -> HeatOperator:
    if scheme not in SCHEMES:
        raise SchemeUnsupported(f"unknown scheme {scheme!r}")
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    if scheme == "spectral":
        if g.kind == "heisenberg1" or not g.fully_periodic:
            raise SchemeUnsupported("spectral propagator needs a fully periodic abelian lattice")
        lam = laplacian_symbol(g, symbol)
        mult = np.exp(-dt * lam)
        cert = {
            "max_multiplier": float(mult.max()),
            "zero_modes": int(np.count_nonzero(lam == 0)),
        }
        return HeatOperator(g, scheme, dt, symbol, eigenvalues=lam, certificate=cert)

    G, clipped = sublaplacian(g)
    cap = positivity_cap(g, scheme)
    if dt > cap * (1 + 1e-12):
        hint = "" if scheme == "explicit_substochastic" else "; use explicit_substochastic"
        raise CflViolation(f"dt={dt:.6g} exceeds positivity cap {cap:.6g} for {scheme}{hint}")
    op = HeatOperator(g, scheme, dt, generator=G)
    cert = {"clipped_weight": clipped, "cap": cap}
    if scheme == "explicit_substochastic" and dt > 0:
        P = op.step_matrix(dt)
        cert["min_weight"] = float(P.data.min())
        cert["max_row_sum"] = float(np.max(P.sum(axis=1)))
    object.__setattr__(op, "certificate", cert)
    return op


@functools.lru_cache(maxsize=32)
def default_operator(g: GroupModel, scheme: str | None = None) -> HeatOperator:
    """Spectral on periodic abelian lattices, explicit substochastic otherwise."""
    if scheme is None:
        scheme = "spectral" if (g.kind != "heisenberg1" and g.fully_periodic) else "explicit_substochastic"
    if scheme == "spectral":
        return build_propagator(g, 0.0, "spectral")
    # half the cap keeps a positive diagonal; at the cap the explicit walk is
    # periodic and leaves every other site at exactly zero
    return build_propagator(g, 0.5 * positivity_cap(g, scheme), scheme)


def apply_semigroup(g: GroupModel, u0: GridField, t: float, op: HeatOperator | None = None) -> GridField:
    """e^{-tL} u0 (the heat flow u_t = L u run for time t)."""
    if op is None:
        op = default_operator(g)
    out = op.apply(u0.values, t)
    lost = 0.0 if g.fully_periodic else max(mass(u0) - float(np.sum(out)) * g.cell_volume, 0.0)
    time = None if u0.time is None else u0.time + t
    return GridField(out, g, time=time, lost_mass=u0.lost_mass + lost)


def check_resolved(g: GroupModel, t: float) -> None:
    if not t > 0:
        raise KernelUnderResolved(f"kernel time must be positive, got {t}")
    if math.sqrt(t) < 2 * max(g.spacing):
        raise KernelUnderResolved(
            f"sqrt(t)={math.sqrt(t):.4g} below twice the largest spacing {max(g.spacing):.4g}"
        )


def heat_kernel(g: GroupModel, t: float, op: HeatOperator | None = None) -> GridField:
    """Semigroup applied to the discrete delta at the identity."""
    check_resolved(g, t)
    k = apply_semigroup(g, delta_field(g), t, op)
    return GridField(k.values, g, time=t, lost_mass=k.lost_mass)


def kernel_series(g: GroupModel, times: Sequence[float], op: HeatOperator | None = None):
    """Yield heat kernels at increasing ``times``, reusing earlier solves."""
    times = sorted(float(t) for t in times)
    for t in times:
        check_resolved(g, t)
    current, now = delta_field(g), 0.0
    for t in times:
        current = apply_semigroup(g, current, t - now, op)
        now = t
        yield GridField(current.values, g, time=t, lost_mass=current.lost_mass)


def kernel_sup_curve(g: GroupModel, times: Sequence[float], op: HeatOperator | None = None):
    """(times, sup_norm, mass) arrays of the heat kernel."""
    ts, sups, masses = [], [], []
    for k in kernel_series(g, times, op):
        ts.append(k.time)
        sups.append(sup_norm(k))
        masses.append(mass(k))
    return np.array(ts), np.array(sups), np.array(masses)


def group_convolve(g: GroupModel, a: GridField, b: GridField) -> GridField:
    """(a * b)(x) = sum_y a(y) b(x - y) dmu(y) on an abelian lattice."""
    if g.kind not in ("euclidean", "torus"):
        raise UnsupportedModel("explicit convolution only on abelian models; use apply_semigroup on H^1")
    if a.model != g or b.model != g:
        raise ValueError("fields live on different lattices")
    c = g.identity_index
    if g.fully_periodic:
        out = np.fft.ifftn(np.fft.fftn(a.values) * np.fft.fftn(b.values)).real
        out = np.roll(out, shift=[-s for s in c], axis=tuple(range(g.n)))
    elif all(bd != PERIODIC for bd in g.boundary):
        from scipy.signal import fftconvolve

        full = fftconvolve(a.values, b.values, mode="full")
        out = full[tuple(slice(s, s + N) for s, N in zip(c, g.points))]
    else:
        raise UnsupportedModel("mixed periodic/Dirichlet convolution is not supported")
    return GridField(out * g.cell_volume, g)


@dataclass
class BoundReport:
    """Fitted two-sided Gaussian envelope for h_t(x) V(sqrt t).

    C_low V^-1 exp(-c_low rho^2/t) <= h_t(x) <= C_up V^-1 exp(-c_up rho^2/t)
    holds at every probe.  ``violation_ratio`` measures how far the
    prefactors drift with t: the worst ratio between the per-time envelope
    constants at the fitted exponents (1 means perfectly time-uniform).
    """

    times: list[float]
    radii: list[float]
    C_low: float
    c_low: float
    C_up: float
    c_up: float
    violation_ratio: float
    slack: float
    passed: bool
    probes: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _hull_line(q: np.ndarray, y: np.ndarray, upper: bool) -> tuple[float, float]:
    """Line A - c q lying above (upper) or below all points, tight on average."""
    scale = float(np.max(q)) or 1.0
    qs = q / scale
    sign = 1.0 if upper else -1.0
    # variables (A, c'); constraint sign*(A - c' qs) >= sign*y
    A_ub = -sign * np.column_stack([np.ones_like(qs), -qs])
    b_ub = -sign * y
    cost = sign * np.array([len(qs), -qs.sum()])
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None), (None, None)], method="highs")
    if not res.success:
        raise FitFailure(f"envelope fit failed: {res.message}")
    A, cs = res.x
    return float(A), float(cs / scale)


def verify_kernel_bounds(
    g: GroupModel,
    times: Sequence[float],
    radii: Sequence[float],
    slack: float = 2.0,
    op: HeatOperator | None = None,
    shell: float | None = None,
) -> BoundReport:
    """Fit the constants of a two-sided Gaussian bound to the discrete kernel.

    Probes are the lattice points whose quasi-distance lies within ``shell``
    (default half the smallest spacing) of each requested radius.
    """
    rho = distance_field(g)
    width = 0.5 * min(g.spacing) if shell is None else shell
    masks = [np.abs(rho - r) <= width for r in radii]
    pick = np.logical_or.reduce(masks)
    if not pick.any():
        raise FitFailure("no lattice points near the requested radii")
    rho_p = rho[pick]
    qs, ys, tags = [], [], []
    for k in kernel_series(g, times, op):
        vals = k.values[pick]
        if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
            raise FitFailure(f"nonpositive kernel value at t={k.time}; propagator not positive")
        qs.append(rho_p**2 / k.time)
        ys.append(np.log(vals * volume_growth(g, math.sqrt(k.time))))
        tags.append(np.full(vals.shape, k.time))
    q, y, tag = np.concatenate(qs), np.concatenate(ys), np.concatenate(tags)
    if np.ptp(q) <= 0:
        raise FitFailure("probes do not separate Gaussian exponents (all rho^2/t equal)")
    A_up, c_up = _hull_line(q, y, upper=True)
    A_low, c_low = _hull_line(q, y, upper=False)

    up_t, low_t = [], []
    for t in sorted(set(tag.tolist())):
        sel = tag == t
        up_t.append(np.max(y[sel] + c_up * q[sel]))
        low_t.append(np.min(y[sel] + c_low * q[sel]))
    ratio = float(math.exp(max(np.ptp(up_t), np.ptp(low_t))))
    C_up, C_low = math.exp(A_up), math.exp(A_low)
    finite = all(math.isfinite(v) for v in (C_up, C_low, c_up, c_low, ratio))
    tol = 1e-9 * max(1.0, abs(c_low))
    passed = finite and c_up >= -tol and c_up <= c_low + tol and ratio <= slack
    return BoundReport(
        times=[float(t) for t in sorted(times)],
        radii=[float(r) for r in radii],
        C_low=C_low,
        c_low=c_low,
        C_up=C_up,
        c_up=c_up,
        violation_ratio=ratio,
        slack=float(slack),
        passed=bool(passed),
        probes=int(q.size),
    )
