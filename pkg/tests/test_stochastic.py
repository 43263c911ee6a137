from __future__ import annotations

import numpy as np
import pytest

from builders import basis_1d, deterministic_pce, random_network, two_bus, two_bus_res
from redispatch import deterministic as det
from redispatch import pce
from redispatch import stochastic as sto
from redispatch.errors import DomainError, Unbalanced
from redispatch.network import compute_ptdf, net_injection
from redispatch.pce import BetaParams, PceBasis, PceCoefficients


def test_lambda_examples():
    assert sto.lambda_of_eps(0.05) == pytest.approx(np.sqrt(20.0))
    assert sto.lambda_of_eps(1.0) == 1.0
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(DomainError):
            sto.lambda_of_eps(bad)


def test_zero_variance_reduces_to_deterministic():
    net = two_bus()
    basis = basis_1d()
    base = (deterministic_pce(net.p_set, basis), deterministic_pce([], basis))
    s = sto.solve(net, base, net.p_demand, eps=0.05)
    d = det.solve(net, (net.p_set, np.zeros(0)), net.p_demand)
    np.testing.assert_allclose(s.mean_adjustments, d.adjustments, atol=1e-5)
    np.testing.assert_allclose(s.p_up[:, 1:], 0.0, atol=1e-6)
    assert s.expected_cost == pytest.approx(d.objective, rel=1e-6)


def test_two_bus_chance_constraint_is_binding():
    net, base = two_bus_res()
    eps = 0.05
    s = sto.solve(net, base, net.p_demand, eps)
    assert s.report.optimal
    f = s.P_f.values[0]
    lam = np.sqrt(1.0 / eps)
    assert abs(f[0]) + lam * np.linalg.norm(f[1:]) == pytest.approx(60.0, abs=1e-4)


def test_tighter_risk_costs_more():
    net, base = two_bus_res()
    costs = [sto.solve(net, base, net.p_demand, eps).expected_cost for eps in (0.2, 0.05, 0.01)]
    # recourse can cancel the flow variance here, so the ordering is only weak
    assert costs[0] <= costs[1] + 1e-6 and costs[1] <= costs[2] + 1e-6
    certain = (deterministic_pce(base[0].mean, base[0].basis), deterministic_pce(base[1].mean, base[1].basis))
    assert sto.solve(net, certain, net.p_demand, 0.2).expected_cost < costs[0] - 1.0


def test_expected_cost_matches_sample_average():
    net, base = two_bus_res()
    s = sto.solve(net, base, net.p_demand, 0.05)
    data = det.adjustment_data(net)
    omega = pce.sample(s.basis, 200_000, seed=4)
    phi = s.basis.phi(omega)
    Z = np.vstack([s.p_up, s.p_down, s.p_curt])
    z = phi @ Z.T
    cost = z * z @ data.quad + z @ data.lin
    se = cost.std() / np.sqrt(len(cost))
    assert abs(cost.mean() - s.expected_cost) < 3 * se


def test_flows_commute_with_evaluation():
    net, base = two_bus_res()
    s = sto.solve(net, base, net.p_demand, 0.05)
    H = compute_ptdf(net).values
    for w in pce.sample(s.basis, 20, seed=5):
        inj = net_injection(pce.evaluate(s.P_G, w), pce.evaluate(s.P_R, w), net.p_demand, net.incidence)
        np.testing.assert_allclose(pce.evaluate(s.P_f, w), H @ inj, atol=1e-9)


def test_conservation_holds_per_coefficient():
    net = random_network(3, n_res=3)
    basis = PceBasis.affine([BetaParams(2.0, 3.0, 0.0, 20.0), BetaParams(4.0, 2.0, 0.0, 20.0)])
    R = PceCoefficients(np.array([[10.0, 2.0, 0.5], [10.0, 0.0, 1.5], [10.0, 1.0, 1.0]]), basis)
    G = pce.market_clearing_pce(R, net, net.p_set)
    s = sto.solve(net, (G, R), net.p_demand, 0.1)
    assert s.report.optimal
    total = s.P_G.values.sum(axis=0) + s.P_R.values.sum(axis=0)
    total[0] -= net.p_demand.sum()
    np.testing.assert_allclose(total, 0.0, atol=1e-6)


def test_chebyshev_bound_is_conservative():
    net, base = two_bus_res(tail=6.0)
    eps = 0.1
    s = sto.solve(net, base, net.p_demand, eps)
    f = pce.evaluate(s.P_f, pce.sample(s.basis, 100_000, seed=6))[:, 0]
    assert np.mean(np.abs(f) > 60.0) <= eps


def test_recover_with_zero_adjustments_returns_base():
    net, base = two_bus_res()
    problem, layout = sto.build_stoch_problem(net, None, base, net.p_demand, 0.05)
    s = sto.solve(net, base, net.p_demand, 0.05)
    r = sto.recover(np.zeros(layout.size), layout, net, base, net.p_demand, s.report)
    np.testing.assert_array_equal(r.P_G.values, base[0].values)
    np.testing.assert_array_equal(r.P_R.values, base[1].values)
    assert r.expected_cost == 0.0
    assert problem.n == layout.size


def test_unbalanced_expansion_is_rejected():
    net, (G, R) = two_bus_res()
    shifted = PceCoefficients(G.values + np.array([[0.0, 1.0]] + [[0.0, 0.0]] * 2), G.basis)
    with pytest.raises(Unbalanced):
        sto.solve(net, (shifted, R), net.p_demand, 0.05)
