"""Concrete group geometries and abstract volume-growth profiles.

Three lattice models are supported:

``euclidean``
    R^n realised as a large box (periodic by default so that the FFT
    propagator applies).  d = D = n.
``torus``
    The flat torus T^n.  Compact, so d = n and D = 0.
``heisenberg1``
    The first Heisenberg group H^1 in exponential coordinates (x, y, z) with
    left-invariant frame X1 = d/dx - (y/2) d/dz, X2 = d/dy + (x/2) d/dz.
    Homogeneous dimension 4, so d = D = 4.  The lattice is Dirichlet in
    x and y and periodic in z.

Lattice coordinates are ``index * h - offset`` with ``offset = (N // 2) * h``,
so the group identity sits on the lattice point with index ``N // 2`` on
every axis.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    BallExceedsDomain,
    InsufficientSamples,
    InvalidLattice,
    NonMonotoneCurve,
    UnsupportedKind,
)

KINDS = ("euclidean", "torus", "heisenberg1")
PERIODIC = "periodic"
DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class GroupModel:
    kind: str
    n: int
    d: int
    D: int | None
    extents: tuple[float, ...]
    points: tuple[int, ...]
    boundary: tuple[str, ...]
    gauge: str
    exponential: bool = False

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / N for L, N in zip(self.extents, self.points))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def total_mass(self) -> float:
        return float(np.prod([N * h for N, h in zip(self.points, self.spacing)]))

    @property
    def offsets(self) -> tuple[float, ...]:
        return tuple((N // 2) * h for N, h in zip(self.points, self.spacing))

    @property
    def identity_index(self) -> tuple[int, ...]:
        return tuple(N // 2 for N in self.points)

    @property
    def fully_periodic(self) -> bool:
        return all(b == PERIODIC for b in self.boundary)

    @property
    def fujita_exponent(self) -> float:
        """p_F = 1 + 2/D; infinite when D = 0 (no critical exponent)."""
        if self.exponential or self.D is None:
            return math.nan
        return math.inf if self.D == 0 else 1.0 + 2.0 / self.D

    def axes(self) -> list[np.ndarray]:
        return [np.arange(N) * h - off for N, h, off in zip(self.points, self.spacing, self.offsets)]

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def spec(self) -> dict:
        """Plain-data description, enough to rebuild the model with make_group."""
        return {
            "kind": self.kind,
            "n": self.n,
            "extent": list(self.extents),
            "points": list(self.points),
            "boundary": list(self.boundary),
            "gauge": self.gauge,
        }


@dataclass(frozen=True)
class LatticePoint:
    index: tuple[int, ...]

    def coords(self, g: GroupModel) -> np.ndarray:
        if len(self.index) != g.n:
            raise InvalidLattice(f"index {self.index} has wrong rank for n={g.n}")
        for i, N in zip(self.index, g.points):
            if not 0 <= i < N:
                raise InvalidLattice(f"index {self.index} outside lattice {g.points}")
        return np.array([i * h - off for i, h, off in zip(self.index, g.spacing, g.offsets)])


@dataclass(frozen=True)
class VolumeProfile:
    """Power-law description of sup_x h_t(x) ~ t^(-b/2) (t<1), t^(-a/2) (t>=1).

    ``small`` and ``large`` hold (lower, upper) envelope constants for the
    sampled curve, computed with the fitted exponents.
    """

    a: float | None
    b: float
    small: tuple[float, float] = (math.nan, math.nan)
    large: tuple[float, float] = (math.nan, math.nan)
    exponential: bool = False
    d: int | None = None
    times: tuple[float, ...] = field(default=(), repr=False)
    sups: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.exponential:
            if self.a is not None:
                raise ValueError("exponential profile carries no large-time exponent a")
            if self.d is None or self.d <= 0:
                raise ValueError("exponential profile needs a local dimension d > 0")
        elif self.a is None or not (math.isfinite(self.a) and self.a >= 0):
            raise ValueError(f"large-time exponent must be finite and >= 0, got {self.a}")
        if not (math.isfinite(self.b) and self.b >= 0):
            raise ValueError(f"small-time exponent must be finite and >= 0, got {self.b}")
        for lo, up in (self.small, self.large):
            if math.isfinite(lo) and math.isfinite(up) and lo > up * (1 + 1e-12):
                raise ValueError("lower envelope constant exceeds upper constant")

    def large_time_constant(self, exponent: float) -> float:
        """max over sampled t >= 1 of sup h_t * t^(exponent/2)."""
        t = np.asarray(self.times)
        s = np.asarray(self.sups)
        mask = t >= 1.0
        if not mask.any():
            raise InsufficientSamples("profile has no samples with t >= 1")
        return float(np.max(s[mask] * t[mask] ** (exponent / 2)))


def _broadcast(value, n: int, name: str) -> tuple:
    if value is None:
        return (None,) * n
    if np.isscalar(value):
        return (value,) * n
    value = tuple(value)
    if len(value) != n:
        raise InvalidLattice(f"{name} has {len(value)} entries, expected {n}")
    return value


def make_group(
    kind: str,
    n: int | None = None,
    points: int | Sequence[int] = 64,
    extent: float | Sequence[float] | None = None,
    spacing: float | Sequence[float] | None = None,
    boundary: str | Sequence[str] | None = None,
    gauge: str | None = None,
) -> GroupModel:
    """Build and validate a lattice model.

    Exactly one of ``extent`` (box length per axis) or ``spacing`` may be
    given; the other follows from ``points``.  Scalars broadcast to every
    axis.
    """
    if kind not in KINDS:
        raise UnsupportedKind(f"unsupported group kind {kind!r}; expected one of {KINDS}")
    if kind == "heisenberg1":
        if n not in (None, 3):
            raise InvalidLattice("heisenberg1 has topological dimension 3")
        n = 3
    elif n is None or int(n) < 1:
        raise InvalidLattice(f"dimension n must be a positive integer, got {n}")
    n = int(n)

    pts = tuple(int(N) for N in _broadcast(points, n, "points"))
    if extent is not None and spacing is not None:
        raise InvalidLattice("give either extent or spacing, not both")
    if spacing is not None:
        hs = _broadcast(spacing, n, "spacing")
        exts = tuple(float(h) * N for h, N in zip(hs, pts))
    elif extent is not None:
        exts = tuple(float(L) for L in _broadcast(extent, n, "extent"))
    else:
        exts = (2 * math.pi,) * n if kind == "torus" else tuple(float(N) * 0.1 for N in pts)

    if boundary is None:
        bnd = (DIRICHLET, DIRICHLET, PERIODIC) if kind == "heisenberg1" else (PERIODIC,) * n
    else:
        bnd = tuple(str(b) for b in _broadcast(boundary, n, "boundary"))
    if kind == "torus" and any(b != PERIODIC for b in bnd):
        raise InvalidLattice("torus axes must all be periodic")

    for L, N, b in zip(exts, pts, bnd):
        if b not in (PERIODIC, DIRICHLET):
            raise InvalidLattice(f"unknown boundary rule {b!r}")
        if not (N >= 8):
            raise InvalidLattice(f"every axis needs at least 8 points, got {N}")
        if not (math.isfinite(L) and L > 0):
            raise InvalidLattice(f"non-positive spacing (extent {L}, points {N})")
        if b == PERIODIC and N % 2:
            raise InvalidLattice(f"periodic axis needs an even number of points, got {N}")

    if kind == "euclidean":
        d, D = n, n
    elif kind == "torus":
        d, D = n, 0
    else:
        d, D = 4, 4
    if gauge is None:
        gauge = "koranyi" if kind == "heisenberg1" else "euclidean"
    if gauge not in ("euclidean", "koranyi"):
        raise InvalidLattice(f"unknown gauge {gauge!r}")
    if (gauge == "koranyi") != (kind == "heisenberg1"):
        raise InvalidLattice(f"gauge {gauge!r} does not apply to {kind}")
    return GroupModel(kind, n, d, D, exts, pts, bnd, gauge)


def heisenberg_lattice(points: int | Sequence[int] = 64, h: float = 0.5, z_refine: int = 1) -> GroupModel:
    """H^1 lattice with z-spacing h^2 / (2 z_refine).

    With this choice every shift along the integral lines of X1 and X2 lands
    on a lattice point, so the sub-Laplacian stencil needs no interpolation
    in z (a discrete Heisenberg group).  Interpolating in z would add an
    artificial z-diffusion that survives refinement.
    """
    pts = tuple(int(N) for N in _broadcast(points, 3, "points"))
    if int(z_refine) < 1:
        raise InvalidLattice(f"z_refine must be a positive integer, got {z_refine}")
    return make_group("heisenberg1", points=pts, spacing=(h, h, h * h / (2 * int(z_refine))))


def group_from_spec(spec: dict) -> GroupModel:
    return make_group(
        spec["kind"],
        n=spec.get("n"),
        points=spec.get("points", 64),
        extent=spec.get("extent"),
        spacing=spec.get("spacing"),
        boundary=spec.get("boundary"),
        gauge=spec.get("gauge"),
    )


def _wrap(g: GroupModel, coords: np.ndarray) -> np.ndarray:
    coords = np.array(coords, dtype=float, copy=True)
    for ax, (L, b) in enumerate(zip(g.extents, g.boundary)):
        if b == PERIODIC and (g.kind != "heisenberg1"):
            coords[..., ax] -= L * np.round(coords[..., ax] / L)
    return coords


def group_multiply(g: GroupModel, a, b) -> np.ndarray:
    """Group product of coordinate arrays (last axis = coordinates).

    H^1 in exponential coordinates: (x, y, z)(x', y', z') =
    (x + x', y + y', z + z' + (x y' - y x') / 2).  Abelian models add.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = a + b
    if g.kind == "heisenberg1":
        out[..., 2] += 0.5 * (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
    return out


def group_inverse(g: GroupModel, a) -> np.ndarray:
    return -np.asarray(a, dtype=float)


def quasi_distance(g: GroupModel, x) -> np.ndarray | float:
    """Distance from the identity.

    Euclidean and torus models use the shortest periodic representative.  On
    H^1 the Koranyi gauge ((x^2+y^2)^2 + 16 z^2)^(1/4) replaces the
    Carnot-Caratheodory distance (they are equivalent up to constants).
    Accepts a LatticePoint or an array of coordinates with trailing axis n.
    """
    if isinstance(x, LatticePoint):
        x = x.coords(g)
    c = np.asarray(x, dtype=float)
    if c.shape[-1] != g.n:
        raise InvalidLattice(f"point has {c.shape[-1]} coordinates, model has n={g.n}")
    if g.kind == "heisenberg1":
        r2 = c[..., 0] ** 2 + c[..., 1] ** 2
        out = (r2**2 + 16.0 * c[..., 2] ** 2) ** 0.25
    else:
        out = np.sqrt(np.sum(_wrap(g, c) ** 2, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


@functools.lru_cache(maxsize=16)
def _distance_field(g: GroupModel) -> np.ndarray:
    return quasi_distance(g, np.stack(g.mesh(), axis=-1))


def distance_field(g: GroupModel) -> np.ndarray:
    """quasi_distance evaluated at every lattice point (read-only array)."""
    out = _distance_field(g)
    out.flags.writeable = False
    return out


def ball_volume(g: GroupModel, r: float) -> float:
    """Haar-weighted count of lattice points with quasi_distance < r."""
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    if g.kind != "torus":
        half = [N // 2 * h for N, h in zip(g.points, g.spacing)]
        reach = [r] * g.n
        if g.kind == "heisenberg1":
            reach[2] = r * r / 4.0
        for ax, (need, have) in enumerate(zip(reach, half)):
            if need > have:
                raise BallExceedsDomain(
                    f"ball of radius {r} needs half-width {need:.4g} on axis {ax}, lattice has {have:.4g}"
                )
    count = np.count_nonzero(distance_field(g) < r)
    return count * g.cell_volume


def volume_growth(g: GroupModel, r: float) -> float:
    """Continuum ball volume V(r) used for Gaussian-envelope normalisation."""
    if g.kind == "heisenberg1":
        # Koranyi ball: pi/2 * int_0^{r^2} sqrt(r^4 - w^2) dw
        return math.pi**2 * r**4 / 8.0
    unit = math.pi ** (g.n / 2) / math.gamma(g.n / 2 + 1)
    v = unit * r**g.n
    if g.kind == "torus":
        v = min(v, g.total_mass)
    return v


def fit_profile(g: GroupModel, kernel_sup_curve) -> VolumeProfile:
    """Fit t^(-b/2) (t < 1) and t^(-a/2) (t >= 1) to a sampled ||h_t||_inf curve.

    ``kernel_sup_curve`` is a pair (times, sups).  Exponents come from
    least-squares lines in log-log coordinates; envelope constants are the
    min/max of sup * t^(exponent/2) on each side of t = 1.
    """
    times, sups = (np.asarray(v, dtype=float) for v in kernel_sup_curve)
    order = np.argsort(times)
    times, sups = times[order], sups[order]
    if times.size < 8:
        raise InsufficientSamples(f"need at least 8 samples, got {times.size}")
    if times[0] > 0.1 * (1 + 1e-12) or times[-1] < 10.0 * (1 - 1e-12):
        raise InsufficientSamples("curve must span at least one decade on each side of t=1")
    small, large = times < 1.0, times >= 1.0
    if small.sum() < 2 or large.sum() < 2:
        raise InsufficientSamples("need at least two samples on each side of t=1")
    if np.any(sups <= 0) or np.any(np.diff(sups) > 1e-10 * sups[:-1]):
        raise NonMonotoneCurve("kernel sup-norm curve must be positive and nonincreasing")

    def exponent(mask):
        slope = np.polyfit(np.log(times[mask]), np.log(sups[mask]), 1)[0]
        return max(-2.0 * slope, 0.0)

    b, a = exponent(small), exponent(large)

    def envelope(mask, e):
        scaled = sups[mask] * times[mask] ** (e / 2)
        return float(scaled.min()), float(scaled.max())

    return VolumeProfile(
        a=a,
        b=b,
        small=envelope(small, b),
        large=envelope(large, a),
        d=g.d,
        times=tuple(times.tolist()),
        sups=tuple(sups.tolist()),
    )


def _flat(g: GroupModel, idx: Sequence[np.ndarray]) -> np.ndarray:
    return np.ravel_multi_index(tuple(idx), g.points)


@functools.lru_cache(maxsize=16)
def sublaplacian(g: GroupModel) -> tuple[sp.csr_matrix, float]:
    """Assembled generator matrix G with (G u)(x) ~ (L u)(x), plus clipped weight.

    Euclidean/torus: 3-point second differences per axis.  H^1: each X_i^2 is
    a second difference along the straight integral line of X_i,
    [f(p + s X_i) - 2 f(p) + f(p - s X_i)] / s^2 with s the lattice spacing of
    the horizontal axis i; the off-lattice z coordinate is linearly
    interpolated (exact, with no interpolation, on the lattices built by
    heisenberg_lattice).  All off-diagonal weights are nonnegative, rows sum to 0 in
    the interior and to < 0 next to a Dirichlet wall.  Negative off-diagonal
    weights, if any appear, are clipped to zero and their total is returned.
    """
    grids = np.meshgrid(*[np.arange(N) for N in g.points], indexing="ij")
    idx = [a.ravel() for a in grids]
    size = int(np.prod(g.points))
    rows, cols, vals = [], [], []
    diag = np.zeros(size)

    def add(target, weight, scale):
        ok = np.ones(size, dtype=bool)
        fixed = []
        for ax, (t, N, b) in enumerate(zip(target, g.points, g.boundary)):
            if b == PERIODIC:
                t = np.mod(t, N)
            else:
                ok &= (t >= 0) & (t < N)
            fixed.append(t)
        fixed = [t[ok] for t in fixed]
        rows.append(np.flatnonzero(ok))
        cols.append(_flat(g, fixed))
        vals.append(np.broadcast_to(weight, ok.shape)[ok] * scale)

    h = g.spacing
    if g.kind != "heisenberg1":
        for ax in range(g.n):
            for step in (1, -1):
                target = [a.copy() for a in idx]
                target[ax] = target[ax] + step
                add(target, 1.0, 1.0 / h[ax] ** 2)
            diag -= 2.0 / h[ax] ** 2
    else:
        x, y = (idx[0] * h[0] - g.offsets[0]), (idx[1] * h[1] - g.offsets[1])
        # z-displacement (in z-index units) of one step along X1 resp. X2
        shifts = (-y * h[0] / 2.0 / h[2], x * h[1] / 2.0 / h[2])
        for ax in (0, 1):
            for step in (1, -1):
                kf = idx[2] + step * shifts[ax]
                near = np.round(kf)
                kf = np.where(np.abs(kf - near) < 1e-9, near, kf)
                k0 = np.floor(kf)
                theta = kf - k0
                k0 = k0.astype(np.int64)
                for dk, w in ((0, 1.0 - theta), (1, theta)):
                    target = [a.copy() for a in idx]
                    target[ax] = target[ax] + step
                    target[2] = k0 + dk
                    add(target, w, 1.0 / h[ax] ** 2)
            diag -= 2.0 / h[ax] ** 2

    rows.append(np.arange(size))
    cols.append(np.arange(size))
    vals.append(diag)
    G = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    )
    G.sum_duplicates()
    d = G.diagonal()
    off = (G - sp.diags(d)).tocoo()
    negative = off.data < 0
    clipped = float(-off.data[negative].sum())
    if clipped > 0:
        # clipping raises the row sum, so lower the diagonal by the same amount
        per_row = np.bincount(off.row[negative], weights=-off.data[negative], minlength=size)
        off.data[negative] = 0.0
        G = (off.tocsr() + sp.diags(d - per_row)).tocsr()
    G.eliminate_zeros()
    return G, clipped
