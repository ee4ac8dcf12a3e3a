import math

import numpy as np
import pytest

from fujita_lab.blowup import (
    ap_monitor,
    estimate_blowup_time,
    integrate_nonlinear,
    mass_growth_monitor,
    shifted_ap_monitor,
)
from fujita_lab.errors import FitDegenerate, NotCriticalExponent, NotSnapshot
from fujita_lab.groups import heisenberg_lattice, make_group
from fujita_lab.heat import GridField, apply_semigroup, heat_kernel
from fujita_lab.mild import Nonlinearity, picard_solve, small_data_generator

ZERO_F = Nonlinearity(2.0, func=lambda u: 0.0 * u)


def const(g, c):
    return GridField(np.full(g.points, float(c)), g)


def ode_sup(c, p, t, K=1.0):
    return (c ** (1 - p) - K * (p - 1) * t) ** (-1 / (p - 1))


class TestIntegrate:
    @pytest.mark.parametrize("c, T_star", [(1.0, 1.0), (2.0, 0.5)])
    def test_torus_ode_blowup_time(self, circle, c, T_star):
        rep = integrate_nonlinear(circle, const(circle, c), Nonlinearity(2.0), T_max=10.0)
        assert rep.classification == "blowup"
        assert rep.T_star == pytest.approx(T_star, rel=0.02)

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_torus_matches_ode_until_near_blowup(self, circle, p):
        c = 0.8
        T_star = c ** (1 - p) / (p - 1)
        rep = integrate_nonlinear(circle, const(circle, c), Nonlinearity(p), T_max=10 * T_star)
        sel = rep.times <= 0.9 * T_star
        assert np.all(np.abs(rep.sups[sel] / ode_sup(c, p, rep.times[sel]) - 1) <= 0.02)

    def test_zero_nonlinearity_is_heat_flow(self, line):
        u0 = small_data_generator(line, 0.5, 1.0)
        rep = integrate_nonlinear(line, u0, ZERO_F, T_max=4.0)
        assert rep.classification == "global_so_far"
        assert np.all(np.diff(rep.sups) <= 1e-15)
        flow = apply_semigroup(line, u0, 4.0).values
        assert rep.sups[-1] == pytest.approx(flow.max(), rel=1e-3)

    def test_zero_data_stays_zero(self, circle):
        rep = integrate_nonlinear(circle, const(circle, 0.0), Nonlinearity(2.0), T_max=5.0)
        assert rep.classification == "global_so_far" and rep.sups.max() == 0.0

    def test_trace_csv_header(self, circle):
        rep = integrate_nonlinear(circle, const(circle, 1.0), Nonlinearity(2.0), T_max=2.0)
        lines = rep.trace_csv().splitlines()
        assert lines[0] == "t,sup_norm,mass,dt,ap_value"
        assert len(lines) == rep.times.size + 1

    def test_euclidean_critical_p3_fit(self, wide_line):
        u0 = small_data_generator(wide_line, 0.5, 5.0)
        rep = integrate_nonlinear(wide_line, u0, Nonlinearity(3.0), T_max=10.0)
        assert rep.classification == "blowup"
        assert math.isfinite(rep.T_star) and rep.fit_residual < 0.05

    def test_refinement_stability(self):
        T = []
        for N, dt0 in ((1024, 1e-2), (2048, 5e-3)):
            g = make_group("euclidean", n=1, points=N, extent=240.0)
            u0 = small_data_generator(g, 0.5, 5.0)
            T.append(integrate_nonlinear(g, u0, Nonlinearity(3.0), dt0=dt0, T_max=10.0).T_star)
        assert abs(T[1] / T[0] - 1) < 0.05


@pytest.mark.slow
@pytest.mark.parametrize("p, expect", [(1.5, "blowup"), (2.0, "blowup"), (2.5, "blowup"), (4.0, "global_so_far"), (5.0, "global_so_far")])
def test_dichotomy_direction(p, expect):
    g = make_group("euclidean", n=1, points=2048, extent=400.0)
    u0 = small_data_generator(g, 1.0, 0.5)
    rep = integrate_nonlinear(g, u0, Nonlinearity(p), T_max=1000.0)
    assert rep.classification == expect


class TestEstimate:
    def test_synthetic_ode_trace(self):
        t = 1 - np.geomspace(1.0, 1e-6, 200)
        fit = estimate_blowup_time(t, 1 / (1 - t), 2.0)
        assert fit.T_star == pytest.approx(1.0, abs=1e-3)

    def test_truncated_trace(self):
        t = np.linspace(0, 0.1, 50)
        with pytest.raises(FitDegenerate):
            estimate_blowup_time(t, 1 / (1 - t), 2.0)

    def test_too_few_points(self):
        with pytest.raises(FitDegenerate):
            estimate_blowup_time([0.0, 0.5, 0.9], [1.0, 2.0, 10.0], 2.0)


class TestApMonitor:
    def test_ap_p2(self):
        assert Nonlinearity(2.0).A_p == 1.0

    @pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
    def test_torus_sharpness(self, circle, c):
        rep = ap_monitor(circle, const(circle, c), Nonlinearity(2.0), np.linspace(0.05, 3 / c, 40))
        assert rep.verdict == "necessary-condition-violated"
        assert rep.crossing == pytest.approx(1 / c, rel=0.02)
        assert np.allclose(rep.values, c * rep.times, rtol=1e-12)

    def test_euclidean_subcritical_violated(self, wide_line):
        u0 = small_data_generator(wide_line, 1.0, 0.5)
        rep = ap_monitor(wide_line, u0, Nonlinearity(2.0), np.geomspace(1.0, 400.0, 12))
        assert rep.verdict == "necessary-condition-violated"
        early = ap_monitor(wide_line, u0, Nonlinearity(2.0), [1.0, 2.0])
        assert early.verdict == "consistent"

    def test_consistent_with_converged_solve(self, wide_line):
        nl = Nonlinearity(4.0)
        u0 = small_data_generator(wide_line, 1.0, 0.5)
        picard_solve(wide_line, u0, nl, 100.0, steps=200)
        assert ap_monitor(wide_line, u0, nl, np.geomspace(0.1, 100.0, 25)).verdict == "consistent"


class TestShiftedMonitor:
    def test_tau_zero_matches(self, circle):
        nl = Nonlinearity(2.0)
        sol = picard_solve(circle, const(circle, 0.5), nl, 1.0, steps=50)
        times = np.linspace(0.1, 3.0, 10)
        a = shifted_ap_monitor(sol, 0.0, nl, times)
        b = ap_monitor(circle, const(circle, 0.5), nl, times)
        assert np.array_equal(a.values, b.values) and a.verdict == b.verdict

    def test_torus_remaining_horizon(self, circle):
        c, nl = 0.5, Nonlinearity(2.0)
        T_star = 1 / c
        sol = picard_solve(circle, const(circle, c), nl, 0.5 * T_star, steps=400, tol=1e-12)
        tau = float(sol.times[-1])
        rep = shifted_ap_monitor(sol, tau, nl, np.linspace(0.05, 2 * T_star, 80))
        assert rep.crossing == pytest.approx(T_star - tau, rel=0.02)

    def test_zero_nonlinearity_never_violated(self, line):
        u0 = small_data_generator(line, 1.0, 1.0)
        sol = picard_solve(line, u0, ZERO_F, 2.0, steps=10)
        nl = Nonlinearity(4.0)
        for tau in sol.times[::3]:
            assert shifted_ap_monitor(sol, tau, nl, np.geomspace(0.1, 50.0, 10)).verdict == "consistent"

    def test_not_snapshot(self, circle):
        sol = picard_solve(circle, const(circle, 0.5), Nonlinearity(2.0), 1.0, steps=10)
        with pytest.raises(NotSnapshot):
            shifted_ap_monitor(sol, 0.123456, Nonlinearity(2.0), [0.5])


class TestMassGrowth:
    def test_euclidean_critical(self, wide_line):
        rep = mass_growth_monitor(wide_line, Nonlinearity(3.0), np.geomspace(1.0, 100.0, 12))
        oracle = (4 * math.pi) ** -1 * 3**-0.5
        assert rep.passed and rep.growth == "logarithmic"
        assert np.all(np.abs(rep.products / oracle - 1) <= 0.05)

    def test_torus_super_logarithmic(self, circle):
        rep = mass_growth_monitor(circle, Nonlinearity(2.0), np.geomspace(1.0, 100.0, 8))
        assert rep.growth == "super-logarithmic"
        assert rep.slope == pytest.approx(1.0, abs=0.05)

    def test_not_critical(self, wide_line):
        with pytest.raises(NotCriticalExponent):
            mass_growth_monitor(wide_line, Nonlinearity(2.0), [1.0, 2.0])

    @pytest.mark.slow
    def test_heisenberg_flat(self):
        g = heisenberg_lattice((64, 64, 512), 0.7)
        rep = mass_growth_monitor(g, Nonlinearity(1.5), np.linspace(1.0, 20.0, 8), slack=0.10)
        assert rep.passed


def test_kernel_matches_closed_form_at_probe(line):
    assert heat_kernel(line, 1.0).values.max() == pytest.approx((4 * math.pi) ** -0.5, rel=1e-6)
