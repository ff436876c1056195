import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncscatter import maupertuis as mp
from ncscatter.errors import PreconditionError

from oracles import fd_gradient, fd_hessian, random_path

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])


def test_zero_field_closed_form():
    R, H = 7.0, 0.5
    path = mp.PathGrid.straight(R, -E1, E1, 32)
    field = mp.ZeroField(H)
    assert mp.maupertuis_value(field, path) == pytest.approx(4 * H * R**2, rel=1e-14)
    # speed R on [-1, 1]
    assert mp.omega(field, path) == pytest.approx(R / math.sqrt(2 * H), rel=1e-14)
    assert mp.omega(mp.ZeroField(4 * H), path) == pytest.approx(0.5 * mp.omega(field, path), rel=1e-14)
    assert mp.morse_index(mp.maupertuis_hessian(field, path)) == 0
    rep = mp.reparameterize(field, path)
    A = mp.action(field, rep.trajectory)
    assert A == pytest.approx(2 * R * math.sqrt(2 * H), rel=1e-12)
    assert math.sqrt(mp.maupertuis_value(field, path)) == pytest.approx(A / math.sqrt(2), rel=1e-12)


def test_constant_path_rejected():
    path = mp.PathGrid(3.0, E1, E1, np.tile(3.0 * E1, (9, 1)))
    with pytest.raises(PreconditionError):
        mp.omega(mp.ZeroField(0.5), path)


def test_path_validation_and_json(tmp_path):
    with pytest.raises(PreconditionError):
        mp.PathGrid(1.0, [2.0, 0, 0], E2, np.zeros((5, 3)))
    path = mp.PathGrid.straight(4.0, E1, E2, 8)
    p = tmp_path / "path.json"
    path.to_json(p)
    back = mp.PathGrid.from_json(p)
    np.testing.assert_array_equal(back.nodes, path.nodes)
    assert back.R == path.R


def test_cutoff_profile():
    d = 0.4
    psi, dpsi, _ = mp.cutoff(np.array([0.1, d, 1.5 * d, 2 * d, 3 * d]), d)
    np.testing.assert_allclose(psi, [1, 1, 0.5, 0, 0], atol=1e-15)
    assert dpsi[2] < 0


def test_gradient_and_hessian_against_fd(setup, consts):
    rng = np.random.default_rng(7)
    field = mp.PenalizedField(setup, mp.PenalizedPotentialParams(0.5, consts.delta_star))
    for _ in range(3):
        path = random_path(rng, 3.0, 12, setup.centres)
        g = mp.maupertuis_gradient(field, path).ravel()
        assert np.linalg.norm(g - fd_gradient(field, path)) <= 1e-6 * max(1.0, np.linalg.norm(g))
        hs = mp.maupertuis_hessian(field, path)
        assert np.abs(hs - hs.T).max() <= 1e-10 * max(1.0, np.abs(hs).max())
        assert np.abs(hs - fd_hessian(field, path)).max() <= 1e-5 * max(1.0, np.abs(hs).max())


def test_grid_refinement_order(setup):
    field = mp.PenalizedField(setup)
    xm, xp = E2, (E1 + E2) / math.sqrt(2)
    R = 6.0

    def curve(n):
        t = np.linspace(-1, 1, n + 1)
        ang = np.pi / 2 - np.pi / 8 * (t + 1)
        rad = R - 2.0 * (1 - t**2)
        nodes = np.column_stack([rad * np.cos(ang), rad * np.sin(ang), 0.5 * (1 - t**2)])
        return mp.PathGrid(R, xm, xp, nodes)

    vals = [mp.maupertuis_value(field, curve(n)) for n in (32, 64, 128)]
    rate = math.log2(abs(vals[0] - vals[1]) / abs(vals[1] - vals[2]))
    assert rate >= 1.8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_penalization_monotone(setup, consts, seed, beta):
    rng = np.random.default_rng(seed)
    path = random_path(rng, 3.0, 24, setup.centres, amp=1.5, clearance=0.05)
    d = consts.delta_star
    m0 = mp.maupertuis_value(mp.PenalizedField(setup), path)
    mb = mp.maupertuis_value(mp.PenalizedField(setup, mp.PenalizedPotentialParams(beta, d)), path)
    assert mb >= m0
    if path.min_distance(setup.centres).min() >= math.sqrt(2 * d):
        assert mb == m0


def test_cauchy_schwarz_and_random_path_residual(setup):
    rng = np.random.default_rng(11)
    field = mp.PenalizedField(setup)
    for _ in range(5):
        path = random_path(rng, 5.0, 40, setup.centres)
        assert math.sqrt(mp.maupertuis_value(field, path)) >= mp.length_functional(field, path) - 1e-12
    rep = mp.reparameterize(field, path)
    assert rep.ode_residual > 1e-2
    tr = rep.trajectory
    assert tr.t[0] == pytest.approx(-rep.omega) and tr.t[-1] == pytest.approx(rep.omega)
    np.testing.assert_allclose(tr.x[0], path.R * path.xi_minus, atol=1e-15)
    np.testing.assert_allclose(tr.x[-1], path.R * path.xi_plus, atol=1e-15)


@pytest.fixture(scope="module")
def far_chord(setup):
    """Newton-refined critical path joining two far points (index 0)."""
    field = mp.PenalizedField(setup)
    start = mp.PathGrid.straight(20.0, E2, (E1 + E2) / math.sqrt(2), 256)
    path, gn = mp.newton_refine(field, start, tol=1e-10)
    return field, path, gn


def test_refined_path_identity_and_residuals(far_chord):
    field, path, gn = far_chord
    assert gn <= 1e-10
    assert mp.morse_index(mp.maupertuis_hessian(field, path)) == 0
    assert mp.maupertuis_action_identity(field, path) <= 1e-6
    rep = mp.reparameterize(field, path)
    assert rep.ode_residual <= 1e-6 and rep.energy_residual <= 1e-6


def test_polish_recovers_true_solution(setup, far_chord):
    _, path, _ = far_chord
    sol = mp.polish(setup, path)
    assert sol.ode_residual <= 1e-6
    assert sol.endpoint_error <= 1e-8
    assert sol.energy_residual <= 1e-8
    assert mp.trajectory_identity_defect(mp.PenalizedField(setup), sol.trajectory) <= 1e-6


def test_far_straight_segment_action(setup):
    # endpoints far away: V is nearly zero along the chord
    R, H = 1e4, setup.energy_H
    field = mp.PenalizedField(setup)
    path = mp.PathGrid.straight(R, E2, E1, 64)
    rep = mp.reparameterize(field, path)
    A = mp.action(field, rep.trajectory)
    ell = np.linalg.norm(np.diff(path.nodes, axis=0), axis=1).sum()
    assert A == pytest.approx(ell * math.sqrt(2 * H), rel=1e-2)
    assert math.sqrt(mp.maupertuis_value(field, path)) == pytest.approx(ell * math.sqrt(H), rel=1e-2)
