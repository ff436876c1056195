import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from ncscatter import dynamics as dy
from ncscatter import problem
from ncscatter import regularized as rg
from ncscatter.errors import PreconditionError

XI = np.array([1.0, 2.0, 2.0]) / 3.0


@pytest.fixture(scope="module")
def kepler_collision():
    env = rg.KeplerEnv(1.0)
    return rg.integrate_through_collision(env, rg.collision_state(env, XI), (-1.0, 1.0))


@pytest.fixture(scope="module")
def perturbed_collision():
    env = rg.quadratic_env()
    return rg.integrate_through_collision(env, rg.collision_state(env, XI), (-1.0, 1.0))


def test_collision_datum_values():
    # (4/9)(81/4)^(1/3) - 1, evaluated independently
    oracle = 4 / 9 * math.exp(math.log(81 / 4) / 3) - 1
    assert rg.literal_collision_w(1.0) == pytest.approx(oracle, abs=1e-15)
    assert round(rg.literal_collision_w(1.0), 6) == 0.211414
    assert rg.collision_w(2.0) == 2.0
    assert rg.sperling_coefficient(1.0) == pytest.approx(4.5 ** (1 / 3))


def test_zero_energy_radial_solution(kepler_collision):
    t, q, _ = kepler_collision.physical()
    t0 = float(kepler_collision.at([0.0])[0, 9])
    tau = t - t0
    sel = tau > 0
    exact = rg.sperling_coefficient(1.0) * tau[sel, None] ** (2 / 3) * XI
    assert np.max(np.linalg.norm(q[sel] - exact, axis=1)) <= 1e-9 * max(1.0, np.abs(exact).max())


def test_parity_through_collision(perturbed_collision):
    par = rg.parity_defect(perturbed_collision)
    assert par["u"] <= 1e-8 and par["v"] <= 1e-8
    res = rg.reconstruction_residuals(perturbed_collision)
    assert res["n_checked"] > 0 and res["energy"] <= 1e-10


def test_literal_datum_is_reflected_but_off_shell():
    env = rg.KeplerEnv(1.0)
    tr = rg.integrate_through_collision(env, rg.collision_state(env, XI, literal=True), (-1.0, 1.0), check=False)
    par = rg.parity_defect(tr)
    assert par["u"] <= 1e-8
    # the alternative datum does not satisfy the zero-energy relation
    assert rg.reconstruction_residuals(tr)["energy"] > 1.0


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3),
    st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3),
)
def test_parity_for_any_zero_velocity_start(u0, w0):
    # u = w = 0 is a rest point of the regularized flow
    assume(np.linalg.norm(u0) > 1e-2 or np.linalg.norm(w0) > 1e-2)
    env = rg.quadratic_env()
    z0 = rg.RegState(u0, np.zeros(3), w0)
    tr = rg.integrate_through_collision(env, z0, (-0.5, 0.5), check=False)
    par = rg.parity_defect(tr, s_max=0.5)
    assert par["u"] <= 1e-8 and par["v"] <= 1e-8


def test_sundman_clock(perturbed_collision):
    tr = perturbed_collision
    assert np.all(np.diff(tr.t) > 0)
    s = np.linspace(-0.9, 0.9, 37)
    h = 1e-5
    dt = (tr.at(s + h)[:, 9] - tr.at(s - h)[:, 9]) / (2 * h)
    np.testing.assert_allclose(dt, np.linalg.norm(tr.at(s)[:, 0:3], axis=1), atol=1e-8)


def test_regularized_round_trip():
    env = rg.quadratic_env()
    q, qd = np.array([0.3, -0.1, 0.2]), np.array([0.4, 1.1, -0.3])
    z = rg.to_regularized(env, q, qd)
    q2, qd2 = rg.from_regularized(z)
    np.testing.assert_allclose(q2, q, atol=1e-15)
    np.testing.assert_allclose(qd2, qd, atol=1e-14)
    _, none = rg.from_regularized(rg.collision_state(env, XI))
    assert none is None
    with pytest.raises(PreconditionError):
        rg.to_regularized(env, np.zeros(3), qd)


def test_sperling_fit_exact_profile():
    c = rg.sperling_coefficient(1.0)
    t = np.concatenate([-np.geomspace(1e-2, 1e-5, 50), np.geomspace(1e-5, 1e-2, 50)])
    q = c * np.abs(t)[:, None] ** (2 / 3) * XI
    qd = (np.sign(t) * (2 / 3) * c * np.abs(t) ** (-1 / 3))[:, None] * XI
    fit = rg.sperling_fit(t, q, qd, 0.0, 1.0, 1e-2)
    np.testing.assert_allclose(fit.xi, XI, atol=1e-14)
    assert fit.residual_position <= 1e-15 and fit.residual_velocity <= 1e-12
    assert rg.reflection_check(t, q, 0.0, 1e-2, mu=1.0) <= 1e-15


def test_remainder_exponent(perturbed_collision):
    rep = rg.remainder_exponent(perturbed_collision)
    np.testing.assert_allclose(rep["xi"], XI, atol=1e-4)
    assert rep["position_exponent"] == pytest.approx(4 / 3, abs=0.2)
    assert rep["velocity_exponent"] == pytest.approx(1 / 3, abs=0.2)
    assert np.all(np.diff(rep["position_residuals"]) < 0)


def test_non_collision_arc_rejected():
    t = np.linspace(-1e-2, 1e-2, 101)
    q = np.column_stack([np.full_like(t, 0.5), t, np.zeros_like(t)])
    with pytest.raises(PreconditionError):
        rg.sperling_fit(t, q, np.gradient(q, t, axis=0), 0.0, 1.0, 1e-2)
    with pytest.raises(PreconditionError):
        rg.reflection_check(t, q, 0.0, 1e-2, mu=1.0)


def test_reflection_on_regularized_arc(perturbed_collision):
    assert rg.reflection_check_regularized(perturbed_collision, 0.05) <= 1e-9


def test_lem_pre_radius_positive():
    assert rg.lem_pre_radius(rg.quadratic_env()) > 0


def test_penalized_field_reduces_and_matches_gradient():
    env = rg.KeplerEnv(1.0)
    q = np.array([0.7, -0.4, 0.3])
    r = np.linalg.norm(q)
    np.testing.assert_allclose(rg.penalized_field(env, 0.0, q), -q / r**3, atol=1e-15)
    eps, h = 0.3, 1e-6
    pot = lambda x: 1 / np.linalg.norm(x) + eps / np.linalg.norm(x) ** 2  # noqa: E731
    fd = np.array([(pot(q + h * e) - pot(q - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(rg.penalized_field(env, eps, q), fd, atol=1e-6)


def test_penalized_energy_conserved():
    env = rg.quadratic_env()
    q0, v0 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.2, 0.3])
    sol = rg.integrate_penalized(env, 1e-2, q0, v0, (0.0, 5.0))
    e = [rg.penalized_energy(env, 1e-2, y[:3], y[3:]) for y in sol.y.T]
    assert np.max(np.abs(np.array(e) - e[0])) <= 1e-8


def test_penalized_limit_is_first_order():
    env = rg.quadratic_env()
    q0, v0 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.2, 0.3])
    T = 2.0
    ref = rg.integrate_penalized(env, 0.0, q0, v0, (0.0, T)).y[:3, -1]
    errs = [np.linalg.norm(rg.integrate_penalized(env, e, q0, v0, (0.0, T)).y[:3, -1] - ref) for e in (1e-3, 1e-4)]
    assert math.log10(errs[0] / errs[1]) == pytest.approx(1.0, abs=0.05)


def test_collision_angle_formula_and_measurement():
    assert rg.collision_angle(0.0) == pytest.approx(2 * math.pi)
    assert rg.collision_angle(3.0) == pytest.approx(4 * math.pi)
    rep = rg.measure_collision_angle(0.5)
    assert abs(rep["measured"] - 2 * math.pi * math.sqrt(1.5)) <= 1e-3
    with pytest.raises(PreconditionError):
        rg.collision_angle(-1.0)


def _near_centre_trajectory():
    s = problem.ProblemSetup(centres=[[-1, 0, 0], [1, 0, 0]], masses=[1, 1], alpha=1.5, energy_H=0.5)
    st_ = dy.state_on_shell(s, [1.3, 0.2, 0.0], [0.0, 1.0, 0.0])
    return s, dy.integrate(s, st_, (0.0, 2.0), tol=1e-9)


def test_blowup_identity_and_scaling():
    s, tr = _near_centre_trajectory()
    y = rg.blowup_rescale(tr, 1.0, 0.0, s.alpha, centre=np.zeros(3))
    np.testing.assert_array_equal(y.x, tr.x)
    np.testing.assert_array_equal(y.t, tr.t)
    energies, residuals = [], []
    for delta in (1e-1, 1e-2, 1e-3):
        y = rg.blowup_rescale(tr, delta, 0.0, s.alpha)
        energies.append(np.max(np.abs(rg.rescaled_energy(y, 1.0, s.alpha))))
        residuals.append(rg.rescaled_residual(s, y, delta, 1))
    assert energies[0] > energies[1] > energies[2]
    ratio = energies[0] / energies[1]
    assert ratio == pytest.approx(10**s.alpha, rel=1e-9)
    assert residuals[0] > residuals[1] > residuals[2]
    with pytest.raises(PreconditionError):
        rg.blowup_rescale(tr, 0.0, 0.0, s.alpha)


def test_regularized_csv(tmp_path, perturbed_collision):
    p = tmp_path / "reg.csv"
    rg.write_regularized_csv(perturbed_collision, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "s,t,u1,u2,u3,v1,v2,v3,w1,w2,w3"
    assert len(lines) == perturbed_collision.s.size + 1
