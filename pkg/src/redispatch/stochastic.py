"""Chance-constrained redispatch over affine PCE coefficients.

Every random quantity ``X = sum_alpha x^alpha phi^alpha`` is represented by
its coefficient vector.  A two-sided chance constraint on ``X`` with bounds
``[lo, hi]`` becomes the Chebyshev surrogate::

    lo <= x^0 <= hi,   lo <= x^0 -/+ lam * t <= hi,   ||(x^alpha)_{alpha != 0}|| <= t

with ``lam = sqrt(1/eps)``.

The DC flows of every coefficient block are written through voltage-angle
variables, which keeps the conic problem sparse: each flow is two angle
entries instead of a dense PTDF row.  Post-outage flows use the line outage
distribution factors on top of the intact angle flows.  The two
representations are algebraically identical to the PTDF form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import conic
from .conic import ConicProblem, SocConstraint, SolveReport
from .deterministic import OutageConstraint, adjustment_data
from .errors import DimensionMismatch, DomainError, Unbalanced
from .network import Network, PtdfMatrix, angle_model, compute_ptdf, lodf_column
from .pce import PceBasis, PceCoefficients

logger = logging.getLogger(__name__)

BALANCE_TOL = 1e-6  # MW


def lambda_of_eps(eps: float) -> float:
    """Chebyshev multiplier ``sqrt(1/eps)`` for a failure rate in ``(0, 1]``."""
    if not 0.0 < eps <= 1.0:
        raise DomainError(f"failure rate must lie in (0, 1], got {eps}")
    return float(np.sqrt(1.0 / eps))


@dataclass(frozen=True, eq=False)
class StochLayout:
    """Column positions of the stacked decision vector.

    Block ``k`` (one per basis term) holds the adjustment coefficients followed
    by the non-slack bus angles.  Epigraph variables of the cones follow all
    blocks: box scalars, intact flows, then post-outage flows in the order of
    the outage constraints.
    """

    n_blocks: int
    n_adj: int
    n_theta: int
    n_flow: int
    outage_rows: tuple[tuple[int, int], ...]  # (outage, branch) per post-outage cone

    @property
    def block(self) -> int:
        return self.n_adj + self.n_theta

    @property
    def t_start(self) -> int:
        return self.n_blocks * self.block

    @property
    def n_t(self) -> int:
        return self.n_adj + self.n_flow + len(self.outage_rows)

    @property
    def size(self) -> int:
        return self.t_start + self.n_t

    def z(self, k: int) -> slice:
        s = k * self.block
        return slice(s, s + self.n_adj)

    def theta(self, k: int) -> slice:
        s = k * self.block + self.n_adj
        return slice(s, s + self.n_theta)


@dataclass(frozen=True, eq=False)
class StochSolution:
    """Optimal coefficient matrices and the random variables they induce."""

    p_up: np.ndarray  # G x |M|
    p_down: np.ndarray
    p_curt: np.ndarray  # R x |M|
    P_G: PceCoefficients
    P_R: PceCoefficients
    P_net: PceCoefficients
    P_f: PceCoefficients
    expected_cost: float
    report: SolveReport

    @property
    def basis(self) -> PceBasis:
        return self.P_G.basis

    @property
    def mean_adjustments(self) -> np.ndarray:
        return np.concatenate([self.p_up[:, 0], self.p_down[:, 0], self.p_curt[:, 0]])


def _check_base(network: Network, base_pce, p_D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    PG, PR = base_pce
    if PG.basis.size != PR.basis.size:
        raise DimensionMismatch("generator and RES expansions use different bases")
    gv, rv = PG.values, PR.values
    if gv.shape[0] != len(network.generators) or rv.shape[0] != len(network.res_units):
        raise DimensionMismatch("expansion dimensions do not match the network")
    p_D = np.asarray(p_D, dtype=float)
    if p_D.shape != (len(network.demands),):
        raise DimensionMismatch("demand vector length does not match the network")
    residual = gv.sum(axis=0) + rv.sum(axis=0)
    residual[0] -= p_D.sum()
    worst = float(np.abs(residual).max())
    if worst > BALANCE_TOL:
        raise Unbalanced(f"base expansion is unbalanced by up to {worst:.6g} MW per coefficient", worst)
    return gv, rv, p_D


def build_stoch_problem(network: Network, ptdf: PtdfMatrix | None, base_pce: tuple[PceCoefficients, PceCoefficients],
                        p_D: np.ndarray, eps: float,
                        extra_outage_cc: Sequence[OutageConstraint] = ()) -> tuple[ConicProblem, StochLayout]:
    """Second-order cone program for the expected-cost chance-constrained redispatch.

    Parameters
    ----------
    network
        Network with RES units attached.
    ptdf
        Intact PTDF, used for the outage distribution factors.
    base_pce
        Expansions of the market-clearing schedule ``(P_G, P_R)``; every
        coefficient column must balance (demand only enters column 0).
    p_D
        Deterministic demand.
    eps
        Failure rate of every chance constraint.
    extra_outage_cc
        Post-outage flows that receive chance constraints.

    Returns
    -------
    problem, layout
        The conic problem and the positions of its variables.

    Raises
    ------
    Unbalanced
        A coefficient column of the base misses the balance by more than 1e-6 MW.
    """
    gv, rv, p_D = _check_base(network, base_pce, p_D)
    ptdf = compute_ptdf(network) if ptdf is None else ptdf
    lam = lambda_of_eps(eps)
    data = adjustment_data(network)
    K = gv.shape[1]
    n_adj, nE = data.size, network.n_branch
    angles = angle_model(network)
    keep = angles.keep
    pairs = tuple((c.outage, l) for c in extra_outage_cc for l in c.branches)
    lay = StochLayout(K, n_adj, len(keep), nE, pairs)
    n = lay.size

    C = network.incidence
    inj = C.C_G @ gv + C.C_R @ rv
    inj[:, 0] -= C.C_D @ p_D
    Bf, Bbus = angles.flow, angles.balance
    Cz = sp.csr_matrix(data.injection)

    # equalities per block: nodal balance at non-slack buses and total conservation
    eq_blocks, eq_rhs = [], []
    total = sp.csr_matrix(np.asarray(Cz.sum(axis=0)))
    for k in range(K):
        Ablk = sp.vstack([sp.hstack([-Cz[keep], Bbus]), sp.hstack([total, sp.csr_matrix((1, lay.n_theta))])])
        eq_blocks.append(_place(Ablk, k * lay.block, n))
        eq_rhs.append(np.concatenate([inj[keep, k], [-inj[:, k].sum()]]))
    A_eq = sp.vstack(eq_blocks).tocsr()
    b_eq = np.concatenate(eq_rhs)

    # every constrained flow is linear in the angles of its block
    lodf = {c.outage: lodf_column(network, ptdf, c.outage) for c in extra_outage_cc}
    flow_sel = [sp.csr_matrix(Bf)]
    flow_lim = [network.limits]
    for (k_out, l) in pairs:
        flow_sel.append(Bf[l] + lodf[k_out][l] * Bf[k_out])
        flow_lim.append(network.limits[[l]])
    Fth = sp.vstack(flow_sel).tocsr()  # rows: intact flows then outage flows
    lim = np.concatenate(flow_lim)
    nF = Fth.shape[0]

    # linear rows, block 0 only
    rows, rhs = [], []
    Z0 = _place(sp.identity(n_adj, format="csr"), lay.z(0).start, n)
    Tbox = _place(sp.identity(n_adj, format="csr"), lay.t_start, n)
    for sign in (1.0, -1.0):
        rows += [Z0 + sign * lam * Tbox, -(Z0 + sign * lam * Tbox)]
        rhs += [data.upper, np.zeros(n_adj)]
    F0 = _place(Fth, lay.theta(0).start, n)
    Tflow = _place(sp.identity(nF, format="csr"), lay.t_start + n_adj, n)
    for expr in (F0, F0 + lam * Tflow, F0 - lam * Tflow):
        rows += [expr, -expr]
        rhs += [lim, lim]
    G = sp.vstack(rows).tocsr()
    h = np.concatenate(rhs)

    # cones: one per box scalar, one per constrained flow
    cones = []
    if K > 1:
        for i in range(n_adj):
            A = sp.csr_matrix((np.ones(K - 1), ([*range(K - 1)], [lay.z(k).start + i for k in range(1, K)])),
                              shape=(K - 1, n))
            cones.append(SocConstraint(A, np.zeros(K - 1), _unit(lay.t_start + i, n)))
        Fth_csr = Fth.tocsr()
        for r in range(nF):
            row = Fth_csr[r]
            idx, val = row.indices, row.data
            rr = np.repeat(np.arange(K - 1), len(idx))
            cc = np.concatenate([lay.theta(k).start + idx for k in range(1, K)])
            vv = np.tile(val, K - 1)
            A = sp.csr_matrix((vv, (rr, cc)), shape=(K - 1, n))
            cones.append(SocConstraint(A, np.zeros(K - 1), _unit(lay.t_start + n_adj + r, n)))
    else:
        G = sp.vstack([G, -_place(sp.identity(lay.n_t, format="csr"), lay.t_start, n)]).tocsr()
        h = np.concatenate([h, np.zeros(lay.n_t)])

    # expected cost: identical quadratic weight on every block, linear term on the mean only
    pdiag = np.zeros(n)
    for k in range(K):
        pdiag[lay.z(k)] = 2.0 * data.quad
    q = np.zeros(n)
    q[lay.z(0)] = data.lin
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[lay.z(0)] = 0.0
    ub[lay.z(0)] = data.upper
    problem = ConicProblem.build(n, P=sp.diags(pdiag), q=q, A_eq=A_eq, b_eq=b_eq, G=G, h=h, lb=lb, ub=ub,
                                 cones=cones)
    return problem, lay


def _place(M, col0: int, n: int) -> sp.csr_matrix:
    M = sp.csr_matrix(M)
    return sp.hstack([sp.csr_matrix((M.shape[0], col0)), M,
                      sp.csr_matrix((M.shape[0], n - col0 - M.shape[1]))]).tocsr()


def _unit(j: int, n: int) -> sp.csr_matrix:
    return sp.csr_matrix(([1.0], ([0], [j])), shape=(1, n))


def recover(x: np.ndarray, layout: StochLayout, network: Network, base_pce, p_D, report: SolveReport,
            ptdf: PtdfMatrix | None = None) -> StochSolution:
    """Random-variable decisions from the optimal coefficient vector.

    ``P_G = P_G^base + P_up - P_down`` and ``P_R = P_R^base - P_curt``; nodal
    injections and intact flows follow coefficient-wise.
    """
    ptdf = compute_ptdf(network) if ptdf is None else ptdf
    data = adjustment_data(network)
    PGb, PRb = base_pce
    basis = PGb.basis
    Z = np.column_stack([x[layout.z(k)] for k in range(layout.n_blocks)])
    g, r = data.n_gen, data.n_res
    up, down, curt = Z[:g], Z[g:2 * g], Z[2 * g:2 * g + r]
    PG = PceCoefficients(PGb.values + up - down, basis)
    PR = PceCoefficients(PRb.values - curt, basis)
    C = network.incidence
    net = C.C_G @ PG.values + C.C_R @ PR.values
    net[:, 0] -= C.C_D @ np.asarray(p_D, dtype=float)
    P_net = PceCoefficients(net, basis)
    P_f = P_net.map(ptdf.values)
    cost = float(sum(data.quad @ (Z[:, k] ** 2) for k in range(Z.shape[1])) + data.lin @ Z[:, 0])
    return StochSolution(up, down, curt, PG, PR, P_net, P_f, cost, report)


def solve(network: Network, base_pce, p_D, eps: float, extra_outage_cc: Sequence[OutageConstraint] = (),
          ptdf: PtdfMatrix | None = None, tol: float = conic.DEFAULT_TOL) -> StochSolution:
    """Build, solve and recover.

    The solution carries the solver report; its coefficients are ``nan`` when
    the status is not optimal.
    """
    ptdf = compute_ptdf(network) if ptdf is None else ptdf
    problem, layout = build_stoch_problem(network, ptdf, base_pce, p_D, eps, extra_outage_cc)
    report = conic.solve(problem, tol=tol)
    logger.info("stochastic subproblem: %s after %d iterations in %.2f s", report.status.value,
                report.iterations, report.wall_time)
    x = report.x if report.optimal else np.full(layout.size, np.nan)
    return recover(x, layout, network, base_pce, p_D, report, ptdf)
