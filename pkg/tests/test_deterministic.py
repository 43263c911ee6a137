from __future__ import annotations

import numpy as np
import pytest

from builders import gen, random_network, ring3, two_bus
from redispatch import conic
from redispatch import deterministic as det
from redispatch.deterministic import OutageConstraint
from redispatch.errors import DimensionMismatch, Unbalanced
from redispatch.network import Demand, Network, Branch, compute_ptdf, net_injection


def base_of(net: Network):
    return net.p_set, np.zeros(len(net.res_units)), net.p_demand


def test_uncongested_network_needs_no_adjustment():
    net = ring3()
    sol = det.solve(net, base_of(net)[:2], net.p_demand)
    assert sol.report.optimal
    np.testing.assert_allclose(sol.adjustments, 0.0, atol=1e-6)
    assert sol.objective == pytest.approx(0.0, abs=1e-4)


def test_two_bus_matches_hand_optimum():
    # 40 MW overload: the cheap unit ramps down 40, peakers split by equal marginal cost 2x+5 = 6y+5
    net = two_bus()
    sol = det.solve(net, base_of(net)[:2], net.p_demand)
    np.testing.assert_allclose(sol.p_down, [40.0, 0.0, 0.0], atol=1e-5)
    np.testing.assert_allclose(sol.p_up, [0.0, 30.0, 10.0], atol=1e-5)
    assert sol.objective == pytest.approx(560.0 + 1050.0 + 350.0, abs=1e-3)
    np.testing.assert_allclose(sol.p_G, [60.0, 30.0, 10.0], atol=1e-5)


def test_objective_value_example_and_solver_agreement():
    net = two_bus()
    z = np.zeros(6)
    z[0] = 0.5  # 0.1 * 0.25 + 10 * 0.5
    assert det.objective_value(z, net) == pytest.approx(5.025)
    sol = det.solve(net, base_of(net)[:2], net.p_demand)
    assert det.objective_value(sol, net) == pytest.approx(sol.objective, rel=1e-12)
    # the QP reports 1/2 z'Pz + q'z, the same function
    assert sol.report.objective == pytest.approx(sol.objective, rel=1e-6)


def test_no_simultaneous_up_and_down_on_random_cases():
    for seed in (2, 3, 9):
        net = random_network(seed)
        ptdf = compute_ptdf(net)
        cons = [OutageConstraint(k, tuple(range(net.n_branch))) for k in range(net.n_branch)
                if k not in net.bridges][:4]
        sol = det.solve(net, base_of(net)[:2], net.p_demand, cons, ptdf)
        if not sol.report.optimal:
            continue
        assert np.all(np.minimum(sol.p_up, sol.p_down) < 1e-5)


def test_infeasible_case_and_diagnosis():
    # the cheap unit may only ramp down 20 MW while 40 MW must leave the line
    gens = (gen(1, p_max=300, down=20, p_set=100), gen(2, p_max=200))
    net = Network((1, 2), (Branch(1, 2, 0.1, 60.0),), gens, demands=(Demand(2, 100.0),), slack_bus=1)
    ptdf = compute_ptdf(net)
    sol = det.solve(net, base_of(net)[:2], net.p_demand, ptdf=ptdf)
    assert sol.report.status is conic.Status.INFEASIBLE
    assert np.isnan(sol.objective)
    problem = det.build_det_problem(net, ptdf, base_of(net)[:2], net.p_demand)
    diag = det.diagnose_infeasibility(problem)
    assert diag["total_slack"] == pytest.approx(20.0, abs=1e-5)
    assert len(diag["rows"]) == 1


def test_unbalanced_and_dimension_errors():
    net = two_bus()
    with pytest.raises(Unbalanced):
        det.solve(net, (net.p_set + 1.0, np.zeros(0)), net.p_demand)
    with pytest.raises(DimensionMismatch):
        det.solve(net, (net.p_set[:2], np.zeros(0)), net.p_demand)


def test_formulations_agree():
    for seed in (2, 3, 9, 10):
        net = random_network(seed)
        ptdf = compute_ptdf(net)
        cons = [OutageConstraint(k, tuple(range(net.n_branch))) for k in range(net.n_branch)
                if k not in net.bridges][:3]
        a = det.solve(net, base_of(net)[:2], net.p_demand, cons, ptdf, formulation="angle")
        b = det.solve(net, base_of(net)[:2], net.p_demand, cons, ptdf, formulation="ptdf")
        assert a.report.status == b.report.status
        if a.report.optimal:
            np.testing.assert_allclose(a.adjustments, b.adjustments, atol=1e-5)
            assert a.objective == pytest.approx(b.objective, rel=1e-6, abs=1e-5)
    with pytest.raises(ValueError):
        det.build_det_problem(ring3(), compute_ptdf(ring3()), base_of(ring3())[:2], ring3().p_demand,
                              formulation="dense")


def test_solution_conserves_power_and_respects_limits():
    net = random_network(3)
    ptdf = compute_ptdf(net)
    cons = [OutageConstraint(k, tuple(range(net.n_branch))) for k in range(net.n_branch) if k not in net.bridges]
    sol = det.solve(net, base_of(net)[:2], net.p_demand, cons, ptdf)
    assert sol.report.optimal
    assert abs(sol.p_G.sum() + sol.p_R.sum() - net.p_demand.sum()) < 1e-6
    inj = net_injection(sol.p_G, sol.p_R, net.p_demand, net.incidence)
    assert np.all(np.abs(ptdf.values @ inj) <= net.limits + 1e-5)
    for c in cons:
        f = det.flow_rows(net, ptdf, c.outage, c.branches) @ inj
        assert np.all(np.abs(f) <= net.limits[list(c.branches)] + 1e-5)
    data = det.adjustment_data(net)
    assert np.all(sol.adjustments >= -1e-7) and np.all(sol.adjustments <= data.upper + 1e-6)
