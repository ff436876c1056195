import math

import numpy as np
import pytest

from ncscatter import dynamics as dy
from ncscatter import problem
from ncscatter import scattering as sc


@pytest.fixture(scope="module")
def kepler_consts(kepler_setup):
    return problem.calibrate(kepler_setup)


def _flyby(setup, b=1.0, r0=50.0):
    """Incoming hyperbolic state with impact parameter ``b`` in the x-y plane."""
    v = math.sqrt(2 * (problem.potential(setup, [r0, 0, 0]) + setup.energy_H))
    return dy.State(0.0, [-math.sqrt(r0**2 - b**2), b, 0.0], [v, 0.0, 0.0])


def test_radial_escape(kepler_setup, kepler_consts):
    K = kepler_consts.K_radius
    st = dy.state_on_shell(kepler_setup, [1.5 * K, 0, 0], [1, 0, 0])
    tr = dy.integrate(kepler_setup, st, (0.0, 40.0), tol=1e-9)
    assert dy.radial_structure(tr, K).classification == "monotone increasing"
    assert np.max(np.abs(tr.energy_residual())) <= 1e-9
    # radial motion sweeps no angle
    assert dy.angular_speed_integral(tr, 0.0, 40.0) == pytest.approx(0.0, abs=1e-12)
    tb = dy.time_bounds_check(tr, kepler_consts)
    assert tb.passed
    tail = dy.tail_direction_bound(tr, 0.0, 20.0, 40.0, kepler_consts)
    assert tail.measured == pytest.approx(0.0, abs=1e-12) and tail.passed


def test_kepler_scattering_angle_matches_conic(kepler_setup):
    # start far out so that the finite-radius bend is below 1e-6
    r0, L = 1e4, 1.0
    v = math.sqrt(2 * (1 / r0 + 0.5))
    b = L / v
    st = dy.State(0.0, [-math.sqrt(r0**2 - b**2), b, 0.0], [v, 0.0, 0.0])
    tr = dy.integrate(kepler_setup, st, (0.0, 2 * r0 + 100), tol=1e-8)
    d = sc.asymptotic_directions(tr, fraction=0.05)
    angle = sc.direction_angle(d.xi_minus, d.xi_plus)
    assert angle == pytest.approx(math.pi / 2, abs=1e-6)
    assert sc.conic_direction_angle(1.0, 0.5, 1.0) == pytest.approx(math.pi / 2, abs=1e-15)


def test_angular_momentum_conserved_single_centre(kepler_setup):
    tr = dy.integrate(kepler_setup, _flyby(kepler_setup, b=2.0), (0.0, 120.0), tol=1e-9)
    A = np.cross(tr.x, tr.v)
    assert np.max(np.abs(A - A[0])) <= 1e-10


def test_energy_drift_two_centres(setup, consts):
    st = dy.state_on_shell(setup, [3 * consts.K_radius, 0.5, 0.3], [-1.0, 0.1, 0.05])
    tr = dy.integrate(setup, st, (0.0, 1e3), tol=1e-8)
    assert np.max(np.abs(tr.energy_residual())) <= 1e-8


def test_reversibility(setup, consts):
    st = dy.state_on_shell(setup, [2 * consts.K_radius, 0.7, 0.0], [-1.0, -0.2, 0.1])
    tol = 1e-8
    fwd = dy.integrate(setup, st, (0.0, 15.0), tol=tol)
    end = dy.State(0.0, fwd.x[-1], -fwd.v[-1])
    back = dy.integrate(setup, end, (0.0, 15.0), tol=tol)
    assert np.linalg.norm(back.x[-1] - st.x) <= 10 * tol
    assert np.linalg.norm(back.v[-1] + st.v) <= 10 * tol


def test_initial_energy_checked(setup):
    with pytest.raises(Exception):
        dy.integrate(setup, dy.State(0.0, [5, 0, 0], [10, 0, 0]), (0.0, 1.0))


def test_reverse_time(setup, consts):
    st = dy.state_on_shell(setup, [2 * consts.K_radius, 1.0, 0.0], [1.0, 0.2, 0.0])
    tr = dy.integrate(setup, st, (0.0, 5.0), tol=1e-9)
    rev = dy.reverse_time(tr)
    x, v = rev.evaluate([-2.5])
    x0, v0 = tr.evaluate([2.5])
    np.testing.assert_allclose(x, x0, atol=1e-14)
    np.testing.assert_allclose(v, -v0, atol=1e-14)


def test_symmetric_flyby_single_minimum(kepler_setup, kepler_consts):
    # incoming along -y with offset 4; the perihelion time is the symmetry time
    st = dy.state_on_shell(kepler_setup, [4.0, 30.0, 0.0], [0.0, -1.0, 0.0])
    tr = dy.integrate(kepler_setup, st, (0.0, 80.0), tol=1e-9)
    rs = dy.radial_structure(tr, 1.5)
    assert rs.classification == "single minimum"
    # r is symmetric about t*
    r = lambda t: float(np.linalg.norm(tr.evaluate([t])[0][0]))  # noqa: E731
    for dt in (1.0, 5.0, 10.0):
        assert r(rs.t_star - dt) == pytest.approx(r(rs.t_star + dt), rel=1e-8)


def test_deep_flyby_crossing_pair(setup, consts):
    K = consts.K_radius
    st = dy.state_on_shell(setup, [6 * K, 0.4, 0.2], [-1.0, 0.0, 0.0])
    tr = dy.integrate(setup, st, (0.0, 60.0), tol=1e-9)
    rs = dy.radial_structure(tr, K)
    assert rs.classification == "crossing pair"
    for t in (rs.t_minus, rs.t_plus):
        assert float(np.linalg.norm(tr.evaluate([t])[0][0])) == pytest.approx(K, abs=1e-10)


def test_time_bounds_degenerate(setup, consts):
    st = dy.state_on_shell(setup, [2 * consts.K_radius, 0, 0], [1, 0, 0])
    tr = dy.integrate(setup, st, (0.0, 5.0), tol=1e-9)
    rep = dy.time_bounds_check(tr, consts, 1.0, 1.0)
    assert rep.duration == 0.0 and rep.lower == 0.0 and rep.passed
    r1 = float(np.linalg.norm(tr.evaluate([1.0])[0][0]))
    assert rep.upper == pytest.approx(r1 / math.sqrt(2 * setup.energy_H))


def test_tail_bound_decays_like_inverse_time(setup, consts):
    K = consts.K_radius
    st = dy.state_on_shell(setup, [1.2 * K, 0.3, 0.0], [0.6, 1.0, 0.2])
    tr = dy.integrate(setup, st, (0.0, 400.0), tol=1e-9)
    a = dy.tail_direction_bound(tr, 0.0, 20.0, 400.0, consts)
    b = dy.tail_direction_bound(tr, 0.0, 40.0, 400.0, consts)
    assert a.passed and b.passed
    assert b.bound == pytest.approx(a.bound / 2, rel=1e-12)
    assert b.measured < a.measured


def test_monitors_pass_on_escape_and_flag_corruption(setup, consts):
    rng = np.random.default_rng(5)
    st = dy.random_escape_states(setup, consts, rng, 2)[1]
    tr = dy.integrate(setup, st, (0.0, 20 * consts.K_radius), tol=1e-9, consts=consts)
    rep = dy.monitor_suite(tr, consts)
    assert rep["passed"], rep
    bad = dy.Trajectory(tr.t, tr.x, 1.1 * tr.v, setup, 1e-8, (), None, "linear")
    mon = dy.virial_monitor(bad, consts)
    assert not mon.passed
    assert any(v["kind"] == "energy" for v in mon.violations)


def test_single_centre_angular_drift_vanishes(kepler_setup, kepler_consts):
    tr = dy.integrate(kepler_setup, _flyby(kepler_setup, b=5.0), (0.0, 100.0), tol=1e-9)
    mon = dy.virial_monitor(tr, kepler_consts)
    assert mon.passed
    assert mon.dA_max_excess <= -kepler_consts.C_plus + 1e-9


def test_convexity_second_difference(setup, consts):
    K = consts.K_radius
    st = dy.state_on_shell(setup, [2 * K, 0.0, 0.0], [0.3, 1.0, 0.0])
    tr = dy.integrate(setup, st, (0.0, 30.0), tol=1e-9)
    t = np.linspace(0.0, 30.0, 601)
    x, _ = tr.evaluate(t)
    assert np.all(np.linalg.norm(x, axis=1) >= K)
    I = 0.5 * (x * x).sum(axis=1)
    dt = t[1] - t[0]
    d2 = I[2:] - 2 * I[1:-1] + I[:-2]
    assert np.all(d2 >= 2 * setup.energy_H * dt**2 * (1 - 1e-6))


def test_csv_round_trip(tmp_path, setup, consts):
    st = dy.state_on_shell(setup, [2 * consts.K_radius, 0.5, 0.0], [1.0, 0.0, 0.1])
    tr = dy.integrate(setup, st, (0.0, 10.0), tol=1e-9)
    p = tmp_path / "traj.csv"
    dy.write_trajectory_csv(tr, p)
    assert p.read_text().splitlines()[0] == ",".join(dy.CSV_HEADER)
    back = dy.read_trajectory_csv(p, setup)
    np.testing.assert_array_equal(back.t, tr.t)
    np.testing.assert_array_equal(back.x, tr.x)
    np.testing.assert_array_equal(back.v, tr.v)
