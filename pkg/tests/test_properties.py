import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fujita_lab.groups import group_multiply, heisenberg_lattice, make_group, quasi_distance
from fujita_lab.harness import certify_abstract
from fujita_lab.heat import GridField, apply_semigroup, build_propagator, default_operator, mass
from fujita_lab.mild import Curve, Nonlinearity, existence_condition, omega_curve

TORUS = make_group("torus", n=1, points=32)
LINE = make_group("euclidean", n=1, points=128, extent=20.0)
H1 = heisenberg_lattice((16, 16, 32), 0.5)

fields32 = arrays(np.float64, 32, elements=st.floats(0.0, 10.0, allow_nan=False))


@pytest.mark.parametrize(
    "g",
    [make_group("euclidean", n=3, points=8, extent=8.0), make_group("torus", n=2, points=8), H1],
    ids=["euclid3", "torus2", "h1"],
)
def test_triangle_inequality(g):
    rng = np.random.default_rng(11)
    scale = np.asarray(g.extents) / 2
    a = rng.uniform(-scale, scale, size=(10_000, g.n))
    b = rng.uniform(-scale, scale, size=(10_000, g.n))
    lhs = quasi_distance(g, group_multiply(g, a, b))
    rhs = quasi_distance(g, a) + quasi_distance(g, b)
    assert np.all(lhs <= rhs * (1 + 1e-12) + 1e-12)


H_T = TORUS.spacing[0]
LATTICE_OP = build_propagator(TORUS, 0.0, "spectral", symbol="lattice")


# the exact symbol rings below zero for t < 4h^2; the lattice symbol never does
@settings(max_examples=60, deadline=None)
@given(fields32, st.one_of(st.floats(4 * H_T**2, 5.0), st.just(0.0)), st.booleans())
def test_torus_mass_and_positivity(values, t, lattice):
    u = GridField(values, TORUS)
    out = apply_semigroup(TORUS, u, t, LATTICE_OP if lattice else None)
    assert abs(mass(out) - mass(u)) <= 1e-10 * max(mass(u), 1e-300)
    assert out.values.min() >= -1e-12 * max(values.max(), 1e-300)
    assert out.values.max() <= values.max() * (1 + 1e-12) + 1e-300


@settings(max_examples=60, deadline=None)
@given(fields32, st.floats(1e-6, 1e-2))
def test_lattice_symbol_positive_at_short_times(values, t):
    out = LATTICE_OP.apply(values, t)
    assert out.min() >= -1e-12 * max(values.max(), 1e-300)


@settings(max_examples=60, deadline=None)
@given(fields32, st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_torus_semigroup_law(values, s, t):
    u = GridField(values, TORUS)
    two = apply_semigroup(TORUS, apply_semigroup(TORUS, u, s), t).values
    one = apply_semigroup(TORUS, u, s + t).values
    assert np.max(np.abs(two - one)) <= 1e-8 * max(values.max(), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.05, 5.0), st.integers(1, 20))
def test_heisenberg_jensen(seed, p, steps):
    op = default_operator(H1)
    F = np.random.default_rng(seed).random(H1.points)
    t = steps * op.dt
    assert np.min(op.apply(F**p, t) - op.apply(F, t) ** p) >= -1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(1.01, 6.0), st.floats(0.01, 10.0), st.floats(0.0, 10.0))
def test_abstract_bound_scales_like_eps_power(p, gamma, eps):
    c1 = certify_abstract({"a": 4, "b": 4}, p, gamma, 1.0, 1.0, C=1.0)
    c2 = certify_abstract({"a": 4, "b": 4}, p, gamma, 1.0, eps, C=1.0)
    if c1.verdict == "finite-bound":
        assert c2.bound == pytest.approx(eps ** (p - 1) * c1.bound, rel=1e-12, abs=1e-300)
        assert c2.satisfied == (eps < c1.eps_max)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 2.0), st.floats(1.2, 4.0))
def test_omega_constant_torus(c, p):
    cert = existence_condition(TORUS, GridField(np.full(32, c), TORUS), Nonlinearity(p), S_cut=1.0)
    T = 0.9 / ((p - 1) * c ** (p - 1))
    t = np.linspace(0.0, T, 25)
    w = omega_curve(cert, Curve(t, c ** (p - 1) * t))
    assert np.all(np.diff(w.values) >= 0)
    assert np.allclose(w.values, (1 - (p - 1) * c ** (p - 1) * t) ** (-1 / (p - 1)), rtol=1e-12)


def test_line_kernel_is_positive_at_resolved_times():
    op = default_operator(LINE)
    h = LINE.spacing[0]
    d = np.zeros(128)
    d[64] = 1 / h
    out = op.apply(d, 4 * h * h)
    assert out.min() >= -1e-12 * out.max()
    assert math.isclose(out.sum() * h, 1.0, rel_tol=1e-12)
