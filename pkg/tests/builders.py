"""Small hand-made networks and helpers shared by the tests."""

from __future__ import annotations

import numpy as np

from redispatch.network import Branch, Demand, Generator, Network, ResUnit
from redispatch import pce
from redispatch.pce import BetaParams, PceBasis, PceCoefficients


def gen(bus, p_max=200.0, up=100.0, down=100.0, g2=0.1, g1=10.0, p_set=0.0) -> Generator:
    return Generator(bus, p_max, up, down, g2, g1, g2, g1, p_set)


def two_bus(limit=60.0, transfer=100.0, costs=((1.0, 5.0), (3.0, 5.0))) -> Network:
    """Cheap unit at bus 1 scheduled to ``transfer``; demand and two peakers at bus 2."""
    gens = (gen(1, p_max=300, p_set=transfer),) + tuple(
        Generator(2, 200.0, 100.0, 100.0, g2, g1, g2, g1, 0.0) for g2, g1 in costs
    )
    return Network((1, 2), (Branch(1, 2, 0.1, limit),), gens, demands=(Demand(2, transfer),), slack_bus=1)


def ring3(limits=(1000.0, 1000.0, 1000.0), p=100.0) -> Network:
    """Buses 1-2-3 in a ring of equal reactances; ``p`` MW from bus 1 to a load at bus 3."""
    branches = (Branch(1, 2, 0.1, limits[0]), Branch(2, 3, 0.1, limits[1]), Branch(1, 3, 0.1, limits[2]))
    gens = (gen(1, p_max=300, p_set=p), gen(3, p_max=300, p_set=0.0))
    return Network((1, 2, 3), branches, gens, demands=(Demand(3, p),), slack_bus=1)


def chain3() -> Network:
    branches = (Branch(1, 2, 0.1, 100.0), Branch(2, 3, 0.1, 100.0))
    return Network((1, 2, 3), branches, (gen(1),), slack_bus=1)


def random_network(seed: int, n_bus: int = 14, n_gen: int = 5, extra: int = 8, n_res: int = 0,
                   limit_scale: float = 1.0) -> Network:
    """Random connected network with a balanced schedule.

    A random spanning tree plus ``extra`` chords; limits are drawn around the
    intact flows of the schedule so that a few outages overload branches.
    """
    from redispatch.network import compute_ptdf, lodf_matrix, net_injection

    rng = np.random.default_rng(seed)
    buses = tuple(range(1, n_bus + 1))
    edges = set()
    order = rng.permutation(buses)
    for i in range(1, n_bus):
        j = int(order[rng.integers(0, i)])
        edges.add(tuple(sorted((int(order[i]), j))))
    while len(edges) < n_bus - 1 + extra:
        a, b = rng.choice(buses, 2, replace=False)
        edges.add(tuple(sorted((int(a), int(b)))))
    branches = [Branch(a, b, float(rng.uniform(0.05, 0.3)), 1e4) for a, b in sorted(edges)]
    demand_buses = rng.choice(buses, n_bus // 2, replace=False)
    demands = tuple(Demand(int(b), float(rng.uniform(20, 80))) for b in sorted(demand_buses))
    total = sum(d.p for d in demands)
    gen_buses = rng.choice(buses, n_gen, replace=False)
    p_max = rng.uniform(0.5, 1.5, n_gen) * 2 * total / n_gen
    share = p_max / p_max.sum()
    res = tuple(ResUnit(int(b), "wind", 5.0, 0.05, 60.0, f"W{b}") for b in rng.choice(buses, n_res, replace=False))
    res_total = 10.0 * n_res
    gens = tuple(
        Generator(int(b), float(pm), float(0.4 * pm), float(0.6 * pm), float(rng.uniform(0.01, 0.2)),
                  float(rng.uniform(10, 40)), float(rng.uniform(0.01, 0.2)), float(rng.uniform(10, 40)),
                  float(s * (total - res_total)))
        for b, pm, s in zip(gen_buses, p_max, share)
    )
    net = Network(buses, tuple(branches), gens, res, demands, slack_bus=1)
    p_R = np.full(n_res, 10.0)
    ptdf = compute_ptdf(net)
    flows = ptdf.values @ net_injection(net.p_set, p_R, net.p_demand, net.incidence)
    lodf = np.nan_to_num(lodf_matrix(net, ptdf))
    worst = np.abs(flows[:, None] + lodf * flows[None, :]).max(axis=1)
    limits = np.maximum(np.abs(flows) * 1.05, worst * rng.uniform(0.95, 1.25, len(flows)) * limit_scale)
    limits = np.maximum(limits, 5.0)
    branches = tuple(Branch(b.from_bus, b.to_bus, b.reactance, float(l)) for b, l in zip(branches, limits))
    return Network(buses, branches, gens, res, demands, slack_bus=1)


def basis_1d(alpha=2.0, beta=3.0) -> PceBasis:
    return PceBasis.affine([BetaParams(alpha, beta)])


def deterministic_pce(values, basis: PceBasis) -> PceCoefficients:
    """Expansion with the given means and zero higher-order columns."""
    v = np.zeros((len(values), basis.size))
    v[:, 0] = values
    return PceCoefficients(v, basis)


def two_bus_res(tail: float = 4.0):
    """Two-bus case with an uncertain unit at the load bus; the cheap unit balances it."""
    base = two_bus(limit=60.0, transfer=100.0)
    net = Network(base.buses, base.branches, base.generators, (ResUnit(2, "wind", 5.0, 0.05, 60.0, "W2"),),
                  base.demands, slack_bus=1)
    basis = PceBasis.affine([BetaParams(2.0, 3.0, a=2.0, c=20.0)])  # mean 10, std 4
    R = PceCoefficients(np.array([[10.0, tail]]), basis)
    G = pce.market_clearing_pce(R, net, np.array([90.0, 0.0, 0.0]))
    return net, (G, R)
