import math

import numpy as np
import pytest

from ncscatter import maupertuis as mp
from ncscatter import minmax as mm
from ncscatter import problem
from ncscatter.errors import PreconditionError

from oracles import oracle_families as build_families, ray_degree

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
XM, XP = E2, (E1 + E2) / math.sqrt(2)


@pytest.fixture(scope="module")
def oracle_families(setup, consts):
    return build_families(setup, consts)


def test_degree_matches_ray_oracle(oracle_families):
    seen = set()
    for name, fam, points in oracle_families:
        for p in points:
            deg = mm.sphere_degree(fam, p)
            assert deg == ray_degree(fam, p, seed=1) == ray_degree(fam, p, seed=2), name
            seen.add(deg)
    # the families exercise several degrees of both signs
    assert {-1, 0, 1, 2}.issubset(seen) or {-2, -1, 0, 1}.issubset(seen)


def test_degree_properties(setup, consts, oracle_families):
    fams = dict((name, fam) for name, fam, _ in oracle_families)
    c0, c1 = setup.centres
    d = mm.sphere_degree(fams["initial"], c0)
    assert abs(d) == 1 and mm.sphere_degree(fams["initial"], c1) == 0
    assert mm.sphere_degree(fams["reversed"], c0) == -d
    assert mm.sphere_degree(fams["perturbed"], c0) == d
    assert mm.family_degrees(setup, fams["constant"]) == [0, 0]
    assert abs(mm.sphere_degree(fams["winding 2"], c0)) == 2


def test_admissibility(setup, consts, oracle_families):
    fams = dict((name, fam) for name, fam, _ in oracle_families)
    assert mm.admissible(setup, fams["initial"])
    assert not mm.admissible(setup, fams["initial"], designation=(1, 0))
    assert mm.admissible(setup, fams["initial, other designation"], designation=(1, 0))
    assert not mm.admissible(setup, fams["constant"])
    assert mm.default_designation(setup) == (0, 1)
    assert mm.meets_centre_segment(fams["initial"], *setup.centres)


def test_initial_family_preconditions(setup, consts):
    K = consts.K_radius
    with pytest.raises(PreconditionError):
        mm.initial_family(setup, consts, 0.9 * K, XM, XP)
    with pytest.raises(PreconditionError):
        mm.initial_family(setup, consts, 2 * K, XM, XM)
    one = problem.ProblemSetup(centres=[[0, 0, 0]], masses=[1], alpha=1.5, energy_H=0.5)
    with pytest.raises(PreconditionError):
        mm.default_designation(one)


def test_convex_surrogate_collapses_to_minimizer(setup):
    field = mp.ConvexBump(0.5, amplitude=-0.3, width=2.0)
    base = mp.PathGrid.straight(5.0, -E1, E2, 32)
    t = base.times
    nodes = [base.nodes + (1 - t**2)[:, None] * [0, 0, 0.5 * math.sin(2 * math.pi * j / 8)] for j in range(8)]
    res = mm.minmax_solve(setup, field, mm.LoopFamily(5.0, -E1, E2, np.array(nodes)), check_admissible=False)
    assert res.morse_index == 0
    assert res.gradient_norm <= 1e-8
    direct, _ = mp.newton_refine(field, base, tol=1e-10)
    assert res.c_value == pytest.approx(mp.maupertuis_value(field, direct), rel=1e-10)
    vals = [h["c_value"] for h in res.history if "c_value" in h and h.get("event") != "refined critical path"]
    assert np.all(np.diff(vals) <= 1e-12 * abs(vals[0]))


def test_branch_switch_leaves_symmetric_saddle():
    field = mp.ConvexBump(0.5, amplitude=1.0, width=1.0)
    path, _ = mp.newton_refine(field, mp.PathGrid.straight(5.0, -E1, E1, 64))
    # the straight path through the bump maximizes in both transverse directions
    assert mp.morse_index(mp.maupertuis_hessian(field, path)) == 2
    q, idx, note = mm.branch_switch(field, path)
    assert idx <= 1
    assert mp.maupertuis_value(field, q) < mp.maupertuis_value(field, path)
    assert np.linalg.norm(mp.maupertuis_gradient(field, q)) <= 1e-8
    assert "->" in note


def test_branch_switch_without_extra_modes_is_identity():
    flat = mp.PathGrid.straight(5.0, -E1, E1, 64)
    q, idx, _ = mm.branch_switch(mp.ZeroField(0.5), flat)
    assert idx == 0 and q is flat


def test_f_k_matches_closed_form():
    s = problem.ProblemSetup(centres=[[-1, 0, 0], [1, 0, 0]], masses=[1, 1], alpha=1.0, energy_H=0.5)
    c = problem.calibrate(s)
    for R in c.K_radius * np.array([1.0, 2.0, 8.0, 64.0]):
        fk = mm.f_k_quadrature(s, c, R)
        assert abs(fk - mm.f_k_closed_form_alpha1(s.m_total, s.energy_H, c.K_radius, R)) <= 1e-10
    with pytest.raises(PreconditionError):
        mm.f_k_quadrature(s, c, 0.5 * c.K_radius)


def test_level_bounds_edge(setup, consts):
    lb = mm.level_bounds_check(setup, consts, 0.0, consts.K_radius)
    assert lb.lower == 0.0 and lb.lower_ok and lb.f_k == 0.0


def test_slack_variation():
    mk = lambda R, s: mm.LevelBounds(R, 0.0, 0.0, True, 0.0, s)  # noqa: E731
    assert mm.slack_variation([mk(1, 5.0), mk(2, 10.0), mk(4, 10.0), mk(8, 9.0)]) == pytest.approx(0.1)


def test_maupertuis_lower_bound_on_family_members(setup, consts):
    fam = mm.initial_family(setup, consts, 3 * consts.K_radius, XM, XP, M=12, n=48)
    for member in fam.members():
        rep = mm.maupertuis_lower_bound(setup, consts, member)
        assert rep["enters_BK"] and rep["holds"]
