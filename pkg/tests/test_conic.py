from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from oracles import box_qp_active_set, box_qp_faces, kkt_residual, random_box_qp
from redispatch import conic
from redispatch.conic import ConicProblem, SocConstraint, Status
from redispatch.errors import ValidationError


def test_scalar_qp_with_bound():
    rep = conic.solve(ConicProblem.build(1, P=[[2.0]], lb=[3.0]))
    assert rep.status is Status.OPTIMAL
    assert rep.x[0] == pytest.approx(3.0, abs=1e-8) and rep.objective == pytest.approx(9.0, abs=1e-7)


def test_cone_minimum_is_minus_sqrt_three():
    cone = SocConstraint(sp.csr_matrix([[1.0], [0.0]]), np.array([0.0, 1.0]), sp.csr_matrix((1, 1)), 2.0)
    rep = conic.solve(ConicProblem.build(1, q=[1.0], cones=[cone]))
    assert rep.optimal and rep.x[0] == pytest.approx(-np.sqrt(3.0), abs=1e-8)


def test_projection_onto_unit_disc():
    cone = SocConstraint(sp.identity(2, format="csr"), np.zeros(2), sp.csr_matrix((1, 2)), 1.0)
    rep = conic.solve(ConicProblem.build(2, P=2 * np.eye(2), q=[-6.0, 0.0], cones=[cone], offset=9.0))
    np.testing.assert_allclose(rep.x, [1.0, 0.0], atol=1e-8)
    assert rep.objective == pytest.approx(4.0, abs=1e-8)


def test_epigraph_of_distance():
    # min t  s.t. ||(x - 1, x - 2)|| <= t
    cone = SocConstraint(sp.csr_matrix([[1.0, 0.0], [1.0, 0.0]]), np.array([-1.0, -2.0]),
                         sp.csr_matrix([[0.0, 1.0]]), 0.0)
    rep = conic.solve(ConicProblem.build(2, q=[0.0, 1.0], cones=[cone]))
    np.testing.assert_allclose(rep.x, [1.5, np.sqrt(0.5)], atol=1e-8)


def test_infeasible_equalities():
    A = sp.csr_matrix([[1.0, 1.0], [1.0, 1.0]])
    rep = conic.solve(ConicProblem.build(2, A_eq=A, b_eq=[1.0, 2.0]))
    assert rep.status is Status.INFEASIBLE and rep.x is None and not rep.optimal


def test_unbounded_linear_program():
    rep = conic.solve(ConicProblem.build(1, q=[1.0]))
    assert rep.status is Status.UNBOUNDED


def test_report_fields_and_determinism():
    rng = np.random.default_rng(0)
    P, q, lb, ub = random_box_qp(rng, 6)
    prob = ConicProblem.build(6, P=P, q=q, lb=lb, ub=ub)
    a, b = conic.solve(prob), conic.solve(prob)
    assert np.array_equal(a.x, b.x)
    assert a.iterations > 0 and a.wall_time > 0 and a.primal_residual <= 1e-8 * (1 + np.abs(ub).max())


def test_validation():
    with pytest.raises(ValidationError):
        ConicProblem.build(2, P=np.eye(3))
    with pytest.raises(ValidationError):
        ConicProblem.build(2, P=[[1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(ValidationError):
        ConicProblem.build(2, lb=[1.0, 0.0], ub=[0.0, 1.0])
    with pytest.raises(ValidationError):
        ConicProblem.build(2, G=np.ones((1, 2)), h=[1.0, 2.0])
    bad = SocConstraint(sp.csr_matrix(np.ones((2, 3))), np.zeros(2), sp.csr_matrix((1, 2)), 0.0)
    with pytest.raises(ValidationError):
        ConicProblem.build(2, cones=[bad])


def test_oracles_agree_with_each_other():
    rng = np.random.default_rng(1)
    for n in range(1, 6):
        P, q, lb, ub = random_box_qp(rng, n)
        a, b = box_qp_faces(P, q, lb, ub), box_qp_active_set(P, q, lb, ub)
        np.testing.assert_allclose(a, b, atol=1e-9)
        assert kkt_residual(P, q, lb, ub, b) < 1e-9


def test_random_box_qps_match_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = int(rng.integers(1, 21))
        P, q, lb, ub = random_box_qp(rng, n)
        rep = conic.solve(ConicProblem.build(n, P=P, q=q, lb=lb, ub=ub))
        ref = box_qp_active_set(P, q, lb, ub)
        assert rep.optimal
        np.testing.assert_allclose(rep.x, ref, atol=1e-6)


def test_objective_never_decreases_when_rows_are_added():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = 5
        P, q, lb, ub = random_box_qp(rng, n)
        prob = ConicProblem.build(n, P=P, q=q, lb=lb, ub=ub)
        before = conic.solve(prob)
        G = rng.normal(size=(2, n))
        h = G @ np.clip(np.zeros(n), lb, ub) + rng.uniform(0.0, 1.0, 2)  # keeps the origin's clip feasible
        after = conic.solve(prob.with_rows(G, h))
        assert after.objective >= before.objective - 1e-7


def test_primal_violation_measures_cones_and_rows():
    cone = SocConstraint(sp.identity(2, format="csr"), np.zeros(2), sp.csr_matrix((1, 2)), 1.0)
    prob = ConicProblem.build(2, A_eq=[[1.0, 0.0]], b_eq=[0.5], G=[[0.0, 1.0]], h=[0.25], cones=[cone])
    assert prob.primal_violation(np.array([0.5, 0.0])) == 0.0
    assert prob.primal_violation(np.array([0.5, 0.5])) == pytest.approx(0.25)
    assert prob.primal_violation(np.array([2.0, 0.0])) == pytest.approx(1.5)
