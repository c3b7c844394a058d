import numpy as np
import pytest

from helflow.geometry import FlowParams
from helflow.sphere_ode import (extinction_time_closed_form,
                                integrate_sphere_ode, sphere_energy,
                                sphere_ode_rhs, theory_bounds)

FOUR_PI = 4 * np.pi

# frozen closed-form oracles (separable integral of r^2 / (kappa r - 2 c0))
T_NEG1 = -1.5 + 4.0 * np.log(1.5)            # 0.121860432432658...
T_NEG2 = 0.25 * (-0.5 + np.log(2.0))         # 0.048286795139986...


def test_rhs_values():
    assert sphere_ode_rhs(1.0, FlowParams(2.0, 0.0)) == 0.0
    assert sphere_ode_rhs(1.0, FlowParams(-1.0, 0.0)) == -3.0
    assert sphere_ode_rhs(1.0, FlowParams(1.0, 0.5)) == 0.0
    with pytest.raises(ValueError):
        sphere_ode_rhs(0.0, FlowParams(1.0, 0.0))


def test_sphere_energy_values():
    assert sphere_energy(1.0, FlowParams(1.0, 0.5)) == pytest.approx(2 * np.pi)
    assert sphere_energy(1.0, FlowParams(2.0, 0.0)) == 0.0
    assert sphere_energy(1.0, FlowParams(-1.0, 0.0)) == pytest.approx(9 * np.pi)


def test_extinction_closed_forms():
    assert extinction_time_closed_form(1.0, FlowParams(-1.0, 0.0)) == \
        pytest.approx(T_NEG1, rel=1e-14)
    assert extinction_time_closed_form(1.0, FlowParams(-2.0, 0.0)) == \
        pytest.approx(T_NEG2, rel=1e-14)
    assert extinction_time_closed_form(1.0, FlowParams(1.0, 0.5)) is None
    # pure area penalty: d(r^2)/dt = -4 lam
    assert extinction_time_closed_form(1.0, FlowParams(0.0, 0.5)) == \
        pytest.approx(0.5)
    assert extinction_time_closed_form(2.0, FlowParams(0.0, 0.0)) is None
    with pytest.raises(ValueError):
        extinction_time_closed_form(-1.0, FlowParams(-1.0, 0.0))


def test_integration_extinction():
    sol = integrate_sphere_ode(1.0, FlowParams(-1.0, 0.0), horizon=1.0)
    assert sol.terminal == "extinct"
    assert sol.extinction_time == pytest.approx(T_NEG1, rel=1e-8)
    assert np.all(sol.radii > 0)


def test_integration_equilibrium():
    sol = integrate_sphere_ode(1.5, FlowParams(1.0, 0.5), horizon=50.0)
    assert sol.terminal == "equilibrium_reached"
    assert sol.radii[-1] == pytest.approx(1.0, rel=1e-6)
    assert sol.radius_at(50.0) == pytest.approx(1.0, rel=1e-9)
    # monotone approach from above
    assert np.all(np.diff(sol.radii) <= 1e-12)


def test_integration_stationary_constant_series():
    sol = integrate_sphere_ode(1.0, FlowParams(2.0, 0.0), horizon=5.0)
    assert sol.terminal == "equilibrium_reached"
    assert np.all(sol.radii == 1.0)
    assert sol.radius_at(3.0) == 1.0


def test_integration_growth_to_equilibrium():
    sol = integrate_sphere_ode(0.4, FlowParams(1.0, 0.5), horizon=50.0)
    assert sol.terminal == "equilibrium_reached"
    assert sol.radii[-1] == pytest.approx(1.0, rel=1e-6)


def test_integration_horizon():
    sol = integrate_sphere_ode(1.5, FlowParams(1.0, 0.5), horizon=1e-4)
    assert sol.terminal == "horizon"


def test_radius_at_extinction_tail():
    params = FlowParams(-1.0, 0.0)
    sol = integrate_sphere_ode(1.0, params, horizon=1.0)
    t_mid = 0.5 * sol.extinction_time
    r_mid = sol.radius_at(t_mid)
    # consistency: remaining time from r_mid equals T - t_mid
    assert extinction_time_closed_form(r_mid, params) == \
        pytest.approx(sol.extinction_time - t_mid, rel=1e-7)
    assert sol.radius_at(sol.extinction_time) == 0.0


def test_theory_bounds_shrinking():
    b = theory_bounds(FlowParams(-1.0, 0.0), e0=9 * np.pi)
    assert b.t_bound == pytest.approx(260.0, rel=1e-12)
    assert b.r_star is None
    assert not b.e0_inconsistent


def test_theory_bounds_equilibrium():
    b = theory_bounds(FlowParams(1.0, 0.5))
    assert b.r_star == pytest.approx(1.0)
    assert b.en_threshold == pytest.approx(FOUR_PI)
    assert b.beta_upper == pytest.approx(2 * np.pi)
    assert b.willmore_ctrl_factor == pytest.approx(2.0)
    assert b.en_threshold == pytest.approx(2 * b.beta_upper)


def test_theory_bounds_degenerate_lambda():
    b = theory_bounds(FlowParams(1.0, 0.0))
    assert b.en_threshold == 0.0           # threshold degenerates at lam = 0
    assert b.beta_upper == 0.0
    assert b.willmore_ctrl_factor is None


def test_theory_bounds_inconsistent_e0():
    b = theory_bounds(FlowParams(-1.0, 0.0), e0=2 * np.pi)
    assert b.e0_inconsistent
    assert b.t_bound is None


def test_energy_critical_point_matches_beta():
    for c0 in (0.5, 1.0, 2.5):
        for lam in (0.1, 0.5, 1.5):
            params = FlowParams(c0, lam)
            b = theory_bounds(params)
            assert sphere_energy(b.r_star, params) == \
                pytest.approx(b.beta_upper, rel=1e-10)


def test_closed_form_vs_integration_samples():
    rng = np.random.default_rng(5)
    for _ in range(10):
        r0 = float(rng.uniform(0.1, 3.0))
        params = FlowParams(float(rng.uniform(-3.0, -0.1)),
                            float(rng.uniform(0.0, 2.0)))
        t_exact = extinction_time_closed_form(r0, params)
        sol = integrate_sphere_ode(r0, params, horizon=10 * t_exact + 1)
        assert sol.extinction_time == pytest.approx(t_exact, rel=1e-8)


def test_ode_parabolic_rescaling_property():
    r0, tau, s = 1.2, 0.03, 3.0
    sol1 = integrate_sphere_ode(r0, FlowParams(-0.8, 0.4), horizon=tau)
    sol2 = integrate_sphere_ode(r0 / s, FlowParams(-0.8 * s, 0.4 * s * s),
                                horizon=tau / s ** 4)
    assert sol1.radius_at(tau) / s == pytest.approx(
        sol2.radius_at(tau / s ** 4), rel=1e-10)
