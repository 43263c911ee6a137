"""DC network model, incidence maps and PTDF computation.

Sign convention: a branch ``(i, j)`` carries positive flow from ``i`` towards
``j``.  PTDF entries are MW of branch flow per MW injected at a bus and
withdrawn at the slack bus, so the slack column is identically zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DimensionMismatch, IslandingOutage, SingularTopology, ValidationError

logger = logging.getLogger(__name__)

RES_KINDS = ("wind", "solar")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    reactance: float  # p.u., tap ratio already folded in
    limit: float  # MW

    @property
    def label(self) -> str:
        return f"({self.from_bus},{self.to_bus})"


@dataclass(frozen=True)
class Generator:
    bus: int
    p_max: float
    ramp_up_max: float
    ramp_down_max: float
    g2_up: float
    g1_up: float
    g2_down: float
    g1_down: float
    p_set: float = 0.0  # scheduled output from the case file, MW


@dataclass(frozen=True)
class ResUnit:
    bus: int
    kind: str
    curtail_max: float
    r2: float
    r1: float
    name: str = ""


@dataclass(frozen=True)
class Demand:
    bus: int
    p: float


@dataclass(frozen=True)
class IncidenceMaps:
    """0/1 matrices placing generators, RES units and demands on buses."""

    C_G: np.ndarray
    C_R: np.ndarray
    C_D: np.ndarray


@dataclass(frozen=True, eq=False)
class PtdfMatrix:
    """Branch x bus sensitivity matrix for one topology.

    ``rows`` holds the indices (into ``Network.branches``) of the branches the
    matrix rows correspond to; ``outage`` is the removed branch, if any.
    """

    values: np.ndarray
    rows: tuple[int, ...]
    outage: int | None = None

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def flows(self, injection: np.ndarray) -> np.ndarray:
        return self.values @ injection


@dataclass(frozen=True)
class Network:
    buses: tuple[int, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    res_units: tuple[ResUnit, ...] = ()
    demands: tuple[Demand, ...] = ()
    slack_bus: int | None = None
    base_mva: float = 100.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.buses:
            raise ValidationError("network has no buses")
        if len(set(self.buses)) != len(self.buses):
            raise ValidationError("duplicate bus ids")
        known = set(self.buses)
        slack = self.buses[0] if self.slack_bus is None else self.slack_bus
        if slack not in known:
            raise ValidationError(f"slack bus {slack} is not a bus of the network")
        object.__setattr__(self, "slack_bus", slack)

        for k, br in enumerate(self.branches):
            if br.from_bus not in known or br.to_bus not in known:
                raise ValidationError(f"branch {k} {br.label} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise ValidationError(f"branch {k} {br.label} is a self-loop")
            if not br.reactance > 0:
                raise ValidationError(f"branch {k} {br.label} has non-positive reactance {br.reactance}")
            if not br.limit > 0:
                raise ValidationError(f"branch {k} {br.label} has non-positive flow limit {br.limit}")
        for i, g in enumerate(self.generators):
            if g.bus not in known:
                raise ValidationError(f"generator {i} at unknown bus {g.bus}")
            if min(g.p_max, g.ramp_up_max, g.ramp_down_max) < 0:
                raise ValidationError(f"generator {i} has a negative bound")
            if min(g.g2_up, g.g2_down) < 0:
                raise ValidationError(f"generator {i} has a non-convex cost")
        for j, r in enumerate(self.res_units):
            if r.bus not in known:
                raise ValidationError(f"RES unit {j} at unknown bus {r.bus}")
            if r.kind not in RES_KINDS:
                raise ValidationError(f"RES unit {j} has unknown kind {r.kind!r}")
            if r.curtail_max < 0 or r.r2 < 0:
                raise ValidationError(f"RES unit {j} has a negative bound or non-convex cost")
        for d in self.demands:
            if d.bus not in known:
                raise ValidationError(f"demand at unknown bus {d.bus}")
        if len(self.buses) > 1 and not _is_connected(len(self.buses), self._endpoints()):
            raise ValidationError("network graph is not connected")

    def _endpoints(self, skip: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        idx = self.bus_index
        keep = [k for k in range(len(self.branches)) if k != skip]
        f = np.array([idx[self.branches[k].from_bus] for k in keep], dtype=int)
        t = np.array([idx[self.branches[k].to_bus] for k in keep], dtype=int)
        return f, t

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def incidence(self) -> IncidenceMaps:
        return IncidenceMaps(
            C_G=self._placement([g.bus for g in self.generators]),
            C_R=self._placement([r.bus for r in self.res_units]),
            C_D=self._placement([d.bus for d in self.demands]),
        )

    def _placement(self, buses: Sequence[int]) -> np.ndarray:
        C = np.zeros((self.n_bus, len(buses)))
        for col, b in enumerate(buses):
            C[self.bus_index[b], col] = 1.0
        return C

    @cached_property
    def branch_bus_incidence(self) -> np.ndarray:
        """|E| x |N| matrix with +1 at the from-bus and -1 at the to-bus."""
        f, t = self._endpoints()
        A = np.zeros((self.n_branch, self.n_bus))
        A[np.arange(self.n_branch), f] = 1.0
        A[np.arange(self.n_branch), t] = -1.0
        return A

    @property
    def limits(self) -> np.ndarray:
        return np.array([br.limit for br in self.branches])

    @property
    def p_demand(self) -> np.ndarray:
        return np.array([d.p for d in self.demands])

    @property
    def p_set(self) -> np.ndarray:
        return np.array([g.p_set for g in self.generators])

    @cached_property
    def bridges(self) -> frozenset[int]:
        """Branches whose removal disconnects the network."""
        out = set()
        for k in range(self.n_branch):
            if not _is_connected(self.n_bus, self._endpoints(skip=k)):
                out.add(k)
        return frozenset(out)

    def without_branch(self, k: int) -> "Network":
        """The same network with branch ``k`` removed (no connectivity requirement checked twice)."""
        if k in self.bridges:
            raise IslandingOutage(f"outage of branch {k} {self.branches[k].label} islands the network")
        branches = self.branches[:k] + self.branches[k + 1:]
        return replace(self, branches=branches)

    def branch_ids(self, from_bus: int, to_bus: int) -> list[int]:
        """All branch indices joining the bus pair, in either orientation."""
        pair = {from_bus, to_bus}
        return [k for k, br in enumerate(self.branches) if {br.from_bus, br.to_bus} == pair]


def _is_connected(n: int, endpoints: tuple[np.ndarray, np.ndarray]) -> bool:
    f, t = endpoints
    adj = sp.coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
    ncomp, _ = connected_components(adj, directed=False)
    return ncomp == 1


def compute_ptdf(network: Network, slack_bus: int | None = None) -> PtdfMatrix:
    """Intact-topology PTDF from the slack-reduced nodal susceptance matrix."""
    values = _ptdf_values(network, network.branch_bus_incidence, np.arange(network.n_branch), slack_bus)
    return PtdfMatrix(values, tuple(range(network.n_branch)))


def _ptdf_values(network: Network, A: np.ndarray, rows: np.ndarray, slack_bus: int | None) -> np.ndarray:
    slack = network.slack_bus if slack_bus is None else slack_bus
    s = network.bus_index[slack]
    b = np.array([1.0 / network.branches[k].reactance for k in rows])
    if not _is_connected(network.n_bus, (np.argmax(A > 0, axis=1), np.argmax(A < 0, axis=1))):
        raise SingularTopology("reduced susceptance matrix is singular: network is disconnected")
    keep = np.delete(np.arange(network.n_bus), s)
    Bf = b[:, None] * A[:, keep]  # branch susceptance times reduced incidence
    Bred = A[:, keep].T @ Bf
    try:
        factor = la.cho_factor(Bred)
    except la.LinAlgError as exc:
        raise SingularTopology("reduced susceptance matrix is not positive definite") from exc
    values = np.zeros((len(rows), network.n_bus))
    values[:, keep] = la.cho_solve(factor, Bf.T).T
    return values


def compute_outage_ptdf(network: Network, outage: int, ptdf: PtdfMatrix | None = None) -> PtdfMatrix:
    """Post-outage PTDF over the remaining branches via the LODF rank-1 update."""
    if outage in network.bridges:
        raise IslandingOutage(
            f"outage of branch {outage} {network.branches[outage].label} islands the network"
        )
    base = compute_ptdf(network) if ptdf is None else ptdf
    if base.outage is not None:
        raise ValueError("rank-1 update needs the intact-topology PTDF")
    H = base.values
    lodf = lodf_column(network, base, outage)
    values = H + np.outer(lodf, H[outage])
    keep = [k for k in range(network.n_branch) if k != outage]
    return PtdfMatrix(values[keep], tuple(keep), outage)


def recompute_outage_ptdf(network: Network, outage: int) -> PtdfMatrix:
    """Post-outage PTDF by refactorizing the reduced topology (reference path)."""
    if outage in network.bridges:
        raise IslandingOutage(
            f"outage of branch {outage} {network.branches[outage].label} islands the network"
        )
    keep = np.array([k for k in range(network.n_branch) if k != outage])
    A = network.branch_bus_incidence[keep]
    return PtdfMatrix(_ptdf_values(network, A, keep, None), tuple(int(k) for k in keep), outage)


def lodf_column(network: Network, ptdf: PtdfMatrix, outage: int) -> np.ndarray:
    """Flow change on every branch per MW pre-outage flow on ``outage``.

    The entry for the outaged branch itself is -1.
    """
    br = network.branches[outage]
    i, j = network.bus_index[br.from_bus], network.bus_index[br.to_bus]
    transfer = ptdf.values[:, i] - ptdf.values[:, j]
    denom = 1.0 - transfer[outage]
    if abs(denom) < 1e-10:
        raise IslandingOutage(f"outage of branch {outage} {br.label} islands the network")
    col = transfer / denom
    col[outage] = -1.0
    return col


def lodf_matrix(network: Network, ptdf: PtdfMatrix | None = None) -> np.ndarray:
    """|E| x |E| LODF matrix; columns of bridge branches are NaN."""
    base = compute_ptdf(network) if ptdf is None else ptdf
    L = np.full((network.n_branch, network.n_branch), np.nan)
    for k in range(network.n_branch):
        if k not in network.bridges:
            L[:, k] = lodf_column(network, base, k)
    return L


def net_injection(p_G, p_R, p_D, maps: IncidenceMaps) -> np.ndarray:
    """Net nodal injection ``C_G p_G + C_R p_R - C_D p_D``.

    Works column-wise as well, so PCE coefficient matrices can be passed in
    place of vectors.
    """
    p_G, p_R, p_D = (np.asarray(x, dtype=float) for x in (p_G, p_R, p_D))
    for name, vec, C in (("p_G", p_G, maps.C_G), ("p_R", p_R, maps.C_R), ("p_D", p_D, maps.C_D)):
        if vec.shape[:1] != (C.shape[1],):
            raise DimensionMismatch(f"{name} has length {vec.shape[:1]}, expected {C.shape[1]}")
    return maps.C_G @ p_G + maps.C_R @ p_R - maps.C_D @ p_D


@dataclass(frozen=True, eq=False)
class AngleModel:
    """Sparse DC flow model in voltage angles, with the slack angle fixed at zero.

    ``flow @ theta`` gives branch flows in MW and ``balance @ theta`` the net
    injections at the non-slack buses ``keep``.
    """

    flow: sp.csr_matrix
    balance: sp.csr_matrix
    keep: np.ndarray

    @property
    def n_theta(self) -> int:
        return len(self.keep)


def angle_model(network: Network) -> AngleModel:
    """Branch-flow and nodal-balance matrices of the DC model in angle form."""
    A = sp.csr_matrix(network.branch_bus_incidence)
    keep = np.delete(np.arange(network.n_bus), network.bus_index[network.slack_bus])
    b = np.array([network.base_mva / br.reactance for br in network.branches])  # MW per rad
    flow = (sp.diags(b) @ A[:, keep]).tocsr()
    balance = (A.T @ flow).tocsr()[keep]
    return AngleModel(flow, balance, keep)
