"""Deterministic redispatch QP with optional post-outage flow limits."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import conic
from .conic import ConicProblem, SolveReport
from .errors import DimensionMismatch, Unbalanced
from .network import Network, PtdfMatrix, angle_model, compute_ptdf, lodf_column, net_injection

logger = logging.getLogger(__name__)

BALANCE_TOL = 1e-6  # MW


@dataclass(frozen=True)
class OutageConstraint:
    """Flow limits on ``branches`` after removal of branch ``outage``."""

    outage: int
    branches: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class AdjustmentData:
    """Per-variable data of the stacked adjustment vector ``z = [p_up, p_down, p_curt]``."""

    n_gen: int
    n_res: int
    upper: np.ndarray
    quad: np.ndarray  # cost = quad * z**2 + lin * z
    lin: np.ndarray
    injection: np.ndarray  # bus x z map of adjustments to nodal injections

    @property
    def size(self) -> int:
        return 2 * self.n_gen + self.n_res

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g, r = self.n_gen, self.n_res
        return z[:g], z[g:2 * g], z[2 * g:2 * g + r]

    def cost(self, z: np.ndarray) -> float:
        return float(self.quad @ (z * z) + self.lin @ z)


def adjustment_data(network: Network) -> AdjustmentData:
    gens, res = network.generators, network.res_units
    upper = np.array([g.ramp_up_max for g in gens] + [g.ramp_down_max for g in gens] + [r.curtail_max for r in res])
    quad = np.array([g.g2_up for g in gens] + [g.g2_down for g in gens] + [r.r2 for r in res])
    lin = np.array([g.g1_up for g in gens] + [g.g1_down for g in gens] + [r.r1 for r in res])
    C = network.incidence
    injection = np.hstack([C.C_G, -C.C_G, -C.C_R])
    return AdjustmentData(len(gens), len(res), upper, quad, lin, injection)


@dataclass(frozen=True, eq=False)
class DetSolution:
    p_up: np.ndarray
    p_down: np.ndarray
    p_curt: np.ndarray
    p_G: np.ndarray
    p_R: np.ndarray
    objective: float
    report: SolveReport

    @property
    def adjustments(self) -> np.ndarray:
        return np.concatenate([self.p_up, self.p_down, self.p_curt])


def check_balance(p_G, p_R, p_D) -> float:
    residual = float(np.sum(p_G) + np.sum(p_R) - np.sum(p_D))
    if abs(residual) > BALANCE_TOL:
        raise Unbalanced(f"base schedule is unbalanced by {residual:.6g} MW", residual)
    return residual


def _check_lengths(network: Network, p_G, p_R, p_D) -> None:
    for name, vec, n in (("p_G", p_G, len(network.generators)), ("p_R", p_R, len(network.res_units)),
                         ("p_D", p_D, len(network.demands))):
        if np.shape(vec) != (n,):
            raise DimensionMismatch(f"{name} has shape {np.shape(vec)}, expected ({n},)")


def flow_rows(network: Network, ptdf: PtdfMatrix, outage: int | None, branches: Sequence[int]) -> np.ndarray:
    """PTDF rows of ``branches`` in the intact or post-outage topology (branch x bus)."""
    H = ptdf.values
    rows = H[list(branches)]
    if outage is None:
        return rows
    lodf = lodf_column(network, ptdf, outage)
    return rows + np.outer(lodf[list(branches)], H[outage])


def build_det_problem(network: Network, ptdf: PtdfMatrix, base: tuple[np.ndarray, np.ndarray], p_D: np.ndarray,
                      extra_outage_constraints: Sequence[OutageConstraint] = (),
                      formulation: str = "angle") -> ConicProblem:
    """Redispatch QP around a balanced base schedule.

    The first ``2|G| + |R|`` variables are ``z = [p_up, p_down, p_curt]``.
    Constraints are the conservation of the adjustments, the adjustment
    boxes, the intact flow limits and, for every entry of
    ``extra_outage_constraints``, the post-outage flow limits on the listed
    branches.  Each absolute-value limit becomes two linear rows.

    Parameters
    ----------
    formulation
        ``"ptdf"`` writes flows as dense PTDF rows over ``z``.  ``"angle"``
        (default) appends the non-slack voltage angles as variables and keeps
        every row sparse; post-outage flows are intact flows corrected by the
        outage distribution factors.  Both describe the same feasible set for
        ``z``.

    Raises
    ------
    Unbalanced
        The base schedule misses the power balance by more than 1e-6 MW.
    """
    p_G, p_R = (np.asarray(v, dtype=float) for v in base)
    p_D = np.asarray(p_D, dtype=float)
    _check_lengths(network, p_G, p_R, p_D)
    check_balance(p_G, p_R, p_D)
    data = adjustment_data(network)
    inj0 = net_injection(p_G, p_R, p_D, network.incidence)
    # adjustments must cancel out since the base already balances
    conservation = data.injection.sum(axis=0)[None, :]
    lims = [network.limits] + [network.limits[list(c.branches)] for c in extra_outage_constraints]
    lim = np.concatenate(lims)

    if formulation == "ptdf":
        rows = [ptdf.values] + [flow_rows(network, ptdf, c.outage, c.branches) for c in extra_outage_constraints]
        R = np.vstack(rows)
        F = R @ data.injection
        f0 = R @ inj0
        return ConicProblem.build(
            data.size, P=sp.diags(2.0 * data.quad), q=data.lin, A_eq=sp.csr_matrix(conservation),
            b_eq=np.zeros(1), G=sp.csr_matrix(np.vstack([F, -F])), h=np.concatenate([lim - f0, lim + f0]),
            lb=np.zeros(data.size), ub=data.upper,
        )
    if formulation != "angle":
        raise ValueError(f"unknown formulation {formulation!r}")

    angles = angle_model(network)
    n = data.size + angles.n_theta
    A_eq = sp.vstack([
        sp.hstack([-sp.csr_matrix(data.injection[angles.keep]), angles.balance]),
        sp.hstack([sp.csr_matrix(conservation), sp.csr_matrix((1, angles.n_theta))]),
    ])
    b_eq = np.concatenate([inj0[angles.keep], [0.0]])
    flows = [angles.flow]
    for c in extra_outage_constraints:
        lodf = lodf_column(network, ptdf, c.outage)
        flows.append(angles.flow[list(c.branches)] + sp.csr_matrix(lodf[list(c.branches)][:, None])
                     @ angles.flow[c.outage])
    Fth = sp.vstack(flows)
    Fth = sp.hstack([sp.csr_matrix((Fth.shape[0], data.size)), Fth])
    lb = np.concatenate([np.zeros(data.size), np.full(angles.n_theta, -np.inf)])
    ub = np.concatenate([data.upper, np.full(angles.n_theta, np.inf)])
    pdiag = np.concatenate([2.0 * data.quad, np.zeros(angles.n_theta)])
    q = np.concatenate([data.lin, np.zeros(angles.n_theta)])
    return ConicProblem.build(n, P=sp.diags(pdiag), q=q, A_eq=A_eq, b_eq=b_eq, G=sp.vstack([Fth, -Fth]),
                              h=np.concatenate([lim, lim]), lb=lb, ub=ub)


def objective_value(sol: DetSolution | np.ndarray, network: Network) -> float:
    """Redispatch cost of an adjustment vector or solution."""
    z = sol.adjustments if isinstance(sol, DetSolution) else np.asarray(sol, dtype=float)
    return adjustment_data(network).cost(z)


def solve(network: Network, base: tuple[np.ndarray, np.ndarray], p_D: np.ndarray,
          extra_outage_constraints: Sequence[OutageConstraint] = (), ptdf: PtdfMatrix | None = None,
          tol: float = conic.DEFAULT_TOL, formulation: str = "angle") -> DetSolution:
    """Build and solve the redispatch QP.

    The returned solution carries the solver report; adjustments are ``nan``
    when the status is not optimal.
    """
    ptdf = compute_ptdf(network) if ptdf is None else ptdf
    problem = build_det_problem(network, ptdf, base, p_D, extra_outage_constraints, formulation)
    report = conic.solve(problem, tol=tol)
    data = adjustment_data(network)
    z = report.x[:data.size] if report.optimal else np.full(data.size, np.nan)
    up, down, curt = data.split(z)
    p_G = np.asarray(base[0], dtype=float) + up - down
    p_R = np.asarray(base[1], dtype=float) - curt
    objective = data.cost(z) if report.optimal else float("nan")
    return DetSolution(up, down, curt, p_G, p_R, objective, report)


def diagnose_infeasibility(problem: ConicProblem) -> dict:
    """Smallest total relaxation of the inequality rows that makes ``problem`` feasible.

    Solves ``min sum(s)`` subject to ``G z - s <= h``, ``s >= 0`` and the
    untouched equalities and boxes.

    Returns
    -------
    dict
        ``total_slack`` (MW) and ``rows``, the relaxed inequality rows with
        their slack, largest first.  ``status`` is the LP status.
    """
    m, n = problem.G.shape
    G = sp.hstack([problem.G, -sp.identity(m)]).tocsr()
    A_eq = sp.hstack([problem.A_eq, sp.csr_matrix((problem.A_eq.shape[0], m))]).tocsr()
    lp = ConicProblem.build(
        n + m, q=np.concatenate([np.zeros(n), np.ones(m)]), A_eq=A_eq, b_eq=problem.b_eq, G=G, h=problem.h,
        lb=np.concatenate([problem.lb, np.zeros(m)]), ub=np.concatenate([problem.ub, np.full(m, np.inf)]),
    )
    report = conic.solve(lp)
    if not report.optimal:
        return {"status": report.status.value, "total_slack": float("nan"), "rows": []}
    s = report.x[n:]
    order = np.argsort(-s)
    rows = [(int(i), float(s[i])) for i in order if s[i] > 1e-6]
    return {"status": report.status.value, "total_slack": float(s.sum()), "rows": rows}
