from __future__ import annotations

import logging
from types import SimpleNamespace

import numpy as np
import pytest

from builders import basis_1d, chain3, deterministic_pce, gen, random_network, ring3
from redispatch import cbco, pce
from redispatch.cbco import BASE_CASE, CbcoRecord, ContingencyModel, IterationLog
from redispatch.errors import EmptyRecords, InfeasibleSubproblem, MaxIterations
from redispatch.network import Network, compute_ptdf, net_injection
from redispatch.pce import PceCoefficients


def dispatch(net):
    return net.p_set, np.zeros(len(net.res_units))


def test_generous_limits_give_no_records():
    net = ring3()
    assert cbco.cbco_analysis(net, dispatch(net), net.p_demand) == []


def test_single_outage_overloads_the_series_path():
    # losing (1,3) pushes all 100 MW through (1,2)
    net = ring3(limits=(50.0, 1000.0, 1000.0))
    (rec,) = cbco.cbco_analysis(net, dispatch(net), net.p_demand)
    assert rec.outage == 2 and rec.branches == (0,)
    assert rec.violations[0] == pytest.approx(50.0, abs=1e-9)
    assert rec.sample_share == 1.0 and rec.probabilities is None


def test_intact_overload_uses_base_sentinel():
    net = ring3(limits=(1000.0, 1000.0, 50.0))
    records = cbco.cbco_analysis(net, dispatch(net), net.p_demand)
    base = [r for r in records if r.outage == BASE_CASE]
    assert base and base[0].branches == (2,)
    assert base[0].violations[0] == pytest.approx(200 / 3 - 50, abs=1e-9)
    assert cbco.label(net, BASE_CASE) == "base"


def test_threshold_boundary():
    net = ring3(limits=(100.0 - 5e-5, 1000.0, 1000.0))
    assert cbco.cbco_analysis(net, dispatch(net), net.p_demand) == []
    net = ring3(limits=(100.0 - 2e-4, 1000.0, 1000.0))
    assert len(cbco.cbco_analysis(net, dispatch(net), net.p_demand)) == 1


def test_rare_sample_violation_is_not_critical():
    net = ring3(limits=(50.0, 1000.0, 1000.0))
    basis = basis_1d()
    values = np.zeros((3, 2))
    values[0] = [40.0, 10.0]  # 40 MW plus 10 MW per unit of the normalized deviation
    fake = SimpleNamespace(basis=basis, P_f=PceCoefficients(values, basis))
    samples = np.full((10_000, 1), basis.mean_point[0])
    samples[0, 0] = 0.99  # phi = (0.99 - 0.4) / 0.2 = 2.95, flow 69.5 MW
    model = ContingencyModel.of(net)
    assert cbco.eps_cbco_analysis(net, fake, net.p_demand, 0.05, samples, model) == []
    recs = cbco.eps_cbco_analysis(net, fake, net.p_demand, 1e-5, samples, model)
    base = next(r for r in recs if r.outage == BASE_CASE)
    assert base.branches == (0,) and base.probabilities == (1e-4,) and base.sample_share == 1e-4
    assert base.violations[0] == pytest.approx((9999 * 40.0 + 69.5) / 10_000 - 50.0, abs=1e-9)


def test_selector_tie_break_and_empty_input():
    records = [CbcoRecord(5, (1,), (3.0,)), CbcoRecord(2, (0,), (3.0,)), CbcoRecord(7, (0, 1), (1.0, 2.5))]
    assert cbco.max_violation_outage(records).outage == 2
    assert cbco.max_mean_violation(records[2:]).outage == 7
    with pytest.raises(EmptyRecords):
        cbco.max_violation_outage([])


def test_bridges_are_skipped_with_a_warning(caplog):
    caplog.set_level(logging.WARNING, logger="redispatch.cbco")
    model = ContingencyModel.of(chain3())
    assert model.outages == ()
    assert "(1,2)" in caplog.text and "(2,3)" in caplog.text


def test_secure_base_terminates_immediately():
    net = ring3()
    sol, log = cbco.run_deterministic(net, dispatch(net), net.p_demand)
    assert log.iterations == 0 and log.terminated and log.chosen == []
    assert log.table() == [("0", "∅", "∅", "0", "0")]
    np.testing.assert_allclose(sol.adjustments, 0.0, atol=1e-6)


def test_ring_needs_one_iteration():
    net = ring3(limits=(50.0, 1000.0, 1000.0))
    sol, log = cbco.run_deterministic(net, dispatch(net), net.p_demand)
    assert log.table() == [("0", "(1,3)#2", "{(1,2)#0}", "50", "100"), ("1", "∅", "∅", "0", "0")]
    np.testing.assert_allclose(sol.p_G, [50.0, 50.0], atol=1e-4)
    assert cbco.cbco_analysis(net, (sol.p_G, sol.p_R), net.p_demand) == []


def test_log_csv_layout():
    net = ring3(limits=(50.0, 1000.0, 1000.0))
    _, log = cbco.run_deterministic(net, dispatch(net), net.p_demand)
    lines = log.to_csv().splitlines()
    assert lines[0] == ",".join(cbco.LOG_COLUMNS)
    assert lines[-1] == "1,∅,∅,0,0"
    assert IterationLog(net).iterations == -1 and not IterationLog(net).terminated


@pytest.mark.parametrize("seed", [2, 3, 9, 10, 17])
def test_random_cases_converge_monotonically(seed):
    net = random_network(seed)
    model = ContingencyModel.of(net)
    sol, log = cbco.run_deterministic(net, dispatch(net), net.p_demand, model=model)
    assert log.terminated and log.iterations >= 1
    objectives = [r.objective for r in log.rows]
    assert all(b >= a - 1e-6 * max(1.0, abs(a)) for a, b in zip(objectives, objectives[1:]))
    assert cbco.cbco_analysis(net, (sol.p_G, sol.p_R), net.p_demand, model) == []
    pairs = [(c.outage, b) for c in log.constraints for b in c.branches]
    assert len(pairs) == len(set(pairs))
    _, again = cbco.run_deterministic(net, dispatch(net), net.p_demand, model=model)
    assert again.to_csv() == log.to_csv()


def test_max_iterations_carries_the_log():
    net = ring3(limits=(50.0, 1000.0, 1000.0))
    with pytest.raises(MaxIterations) as exc:
        cbco.run_deterministic(net, dispatch(net), net.p_demand, max_iters=0)
    assert exc.value.log.chosen == [(0, 2)]


def test_infeasible_iteration_reports_constraints_and_diagnosis():
    # the bus-3 unit can only ramp up 10 MW while 50 MW must be shifted
    base = ring3(limits=(50.0, 1000.0, 1000.0))
    gens = (base.generators[0], gen(3, p_max=300, up=10.0))
    net = Network(base.buses, base.branches, gens, demands=base.demands, slack_bus=1)
    with pytest.raises(InfeasibleSubproblem) as exc:
        cbco.run_deterministic(net, dispatch(net), net.p_demand)
    err = exc.value
    assert [(c.outage, c.branches) for c in err.constraints] == [(2, (0,))]
    assert err.diagnosis["total_slack"] == pytest.approx(40.0, abs=1e-4)
    assert err.log.iterations == 0


@pytest.mark.parametrize("make", [lambda: ring3(limits=(50.0, 1000.0, 1000.0)), lambda: random_network(3)])
def test_zero_variance_stochastic_trajectory_matches_deterministic(make):
    net = make()
    basis = basis_1d()
    base = (deterministic_pce(net.p_set, basis), deterministic_pce([], basis))
    samples = pce.sample(basis, 200, seed=0)
    model = ContingencyModel.of(net)
    d, dlog = cbco.run_deterministic(net, dispatch(net), net.p_demand, model=model)
    s, slog = cbco.run_stochastic(net, base, net.p_demand, 0.05, samples, model=model)
    assert slog.chosen == dlog.chosen
    assert s.expected_cost == pytest.approx(d.objective, rel=1e-5, abs=1e-4)
    np.testing.assert_allclose(s.P_G.mean, d.p_G, atol=1e-4)


def test_verification_scan_on_converged_solution():
    net = ring3(limits=(50.0, 1000.0, 1000.0))
    basis = basis_1d()
    base = (deterministic_pce(net.p_set, basis), deterministic_pce([], basis))
    s, _ = cbco.run_stochastic(net, base, net.p_demand, 0.05, pce.sample(basis, 100, seed=0))
    assert cbco.verification_scan(net, s, net.p_demand, 0.05, pce.sample(basis, 100, seed=0, stream=1)) == []
    inj = net_injection(s.P_G.mean, s.P_R.mean, net.p_demand, net.incidence)
    np.testing.assert_allclose(s.P_f.mean, compute_ptdf(net).values @ inj, atol=1e-9)
