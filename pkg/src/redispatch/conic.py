"""Canonical convex problem shared by the deterministic QP and the stochastic SOCP.

The form is::

    minimize    1/2 z'Pz + q'z + offset
    subject to  A_eq z  = b_eq
                G z    <= h
                lb <= z <= ub
                ||A_k z + b_k||_2 <= c_k'z + d_k      for every cone k

A QP is simply the case without cone constraints.  The numerical backend is
the Clarabel interior-point solver.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

from .errors import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True, eq=False)
class SocConstraint:
    """``||A z + b||_2 <= c'z + d``."""

    A: sp.csr_matrix
    b: np.ndarray
    c: sp.csr_matrix  # 1 x n row
    d: float = 0.0

    @property
    def dim(self) -> int:
        return self.A.shape[0] + 1


@dataclass(frozen=True, eq=False)
class ConicProblem:
    n: int
    P: sp.csc_matrix
    q: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    cones: tuple[SocConstraint, ...] = ()
    offset: float = 0.0

    @classmethod
    def build(cls, n: int, P=None, q=None, A_eq=None, b_eq=None, G=None, h=None, lb=None, ub=None,
              cones: Sequence[SocConstraint] = (), offset: float = 0.0) -> "ConicProblem":
        """Assemble a problem, filling omitted blocks with empty ones and checking shapes."""
        P = sp.csc_matrix((n, n)) if P is None else sp.csc_matrix(P)
        q = np.zeros(n) if q is None else np.asarray(q, dtype=float)
        A_eq = sp.csr_matrix((0, n)) if A_eq is None else sp.csr_matrix(A_eq)
        b_eq = np.zeros(A_eq.shape[0]) if b_eq is None else np.asarray(b_eq, dtype=float)
        G = sp.csr_matrix((0, n)) if G is None else sp.csr_matrix(G)
        h = np.zeros(G.shape[0]) if h is None else np.asarray(h, dtype=float)
        lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
        ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
        prob = cls(n, P, q, A_eq, b_eq, G, h, lb, ub, tuple(cones), float(offset))
        prob.validate()
        return prob

    def validate(self) -> None:
        n = self.n
        if self.P.shape != (n, n) or self.q.shape != (n,):
            raise ValidationError("objective dimensions do not match the decision dimension")
        if self.A_eq.shape[1] != n or self.b_eq.shape != (self.A_eq.shape[0],):
            raise ValidationError("equality block is dimensionally inconsistent")
        if self.G.shape[1] != n or self.h.shape != (self.G.shape[0],):
            raise ValidationError("inequality block is dimensionally inconsistent")
        if self.lb.shape != (n,) or self.ub.shape != (n,) or np.any(self.lb > self.ub):
            raise ValidationError("box bounds are inconsistent")
        for k, cone in enumerate(self.cones):
            if cone.A.shape[1] != n or cone.c.shape != (1, n) or cone.b.shape != (cone.A.shape[0],):
                raise ValidationError(f"cone {k} is dimensionally inconsistent")
        if abs(self.P - self.P.T).max() > 1e-12 * max(1.0, abs(self.P).max()):
            raise ValidationError("quadratic term is not symmetric")

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z + self.offset)

    def primal_violation(self, z: np.ndarray) -> float:
        """Largest absolute constraint violation at ``z``."""
        parts = [0.0]
        if self.A_eq.shape[0]:
            parts.append(np.abs(self.A_eq @ z - self.b_eq).max())
        if self.G.shape[0]:
            parts.append((self.G @ z - self.h).max())
        parts.append((self.lb - z).max(initial=0.0))
        parts.append((z - self.ub).max(initial=0.0))
        for cone in self.cones:
            parts.append(np.linalg.norm(cone.A @ z + cone.b) - (cone.c @ z)[0] - cone.d)
        return float(max(parts))

    def with_rows(self, G_extra, h_extra) -> "ConicProblem":
        """A copy with additional ``G z <= h`` rows."""
        return ConicProblem(self.n, self.P, self.q, self.A_eq, self.b_eq,
                            sp.vstack([self.G, sp.csr_matrix(G_extra)]).tocsr(),
                            np.concatenate([self.h, np.asarray(h_extra, dtype=float)]),
                            self.lb, self.ub, self.cones, self.offset)


@dataclass(frozen=True, eq=False)
class SolveReport:
    status: Status
    x: np.ndarray | None
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    wall_time: float
    message: str = field(default="")

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


_STATUS = {
    "Solved": Status.OPTIMAL,
    "AlmostSolved": Status.OPTIMAL,
    "PrimalInfeasible": Status.INFEASIBLE,
    "AlmostPrimalInfeasible": Status.INFEASIBLE,
    "DualInfeasible": Status.UNBOUNDED,
    "AlmostDualInfeasible": Status.UNBOUNDED,
}


def _clarabel_data(problem: ConicProblem):
    n = problem.n
    blocks, rhs, cones = [], [], []
    if problem.A_eq.shape[0]:
        blocks.append(problem.A_eq)
        rhs.append(problem.b_eq)
        cones.append(clarabel.ZeroConeT(problem.A_eq.shape[0]))
    eye = sp.identity(n, format="csr")
    fin_ub = np.flatnonzero(np.isfinite(problem.ub))
    fin_lb = np.flatnonzero(np.isfinite(problem.lb))
    lin = [problem.G, eye[fin_ub], -eye[fin_lb]]
    lin_rhs = [problem.h, problem.ub[fin_ub], -problem.lb[fin_lb]]
    m_lin = sum(b.shape[0] for b in lin)
    if m_lin:
        blocks.extend(lin)
        rhs.extend(lin_rhs)
        cones.append(clarabel.NonnegativeConeT(m_lin))
    for cone in problem.cones:
        blocks.append(sp.vstack([-cone.c, -cone.A]))
        rhs.append(np.concatenate([[cone.d], cone.b]))
        cones.append(clarabel.SecondOrderConeT(cone.dim))
    if blocks:
        A = sp.vstack(blocks).tocsc()
        b = np.concatenate(rhs)
    else:
        A, b = sp.csc_matrix((0, n)), np.zeros(0)
    return sp.triu(problem.P).tocsc(), problem.q, A, b, cones


def solve(problem: ConicProblem, tol: float = DEFAULT_TOL, max_iter: int = 200) -> SolveReport:
    """Solve ``problem`` with an interior-point method.

    Parameters
    ----------
    problem
        Problem in canonical form.
    tol
        Relative tolerance on feasibility and duality gap.  An ``optimal``
        report guarantees that the primal violation is at most
        ``tol * (1 + max|rhs|)``.

    Returns
    -------
    SolveReport
        Status, solution and diagnostics.  Infeasibility is reported by
        status, never raised.
    """
    t0 = time.perf_counter()
    P, q, A, b, cones = _clarabel_data(problem)
    # Aim two orders tighter than promised; fall back to the promised accuracy
    # when the interior-point iteration stalls before reaching it.
    for inner in (tol * 1e-2, tol):
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.max_iter = max_iter
        settings.tol_feas = inner
        settings.tol_gap_abs = inner
        settings.tol_gap_rel = inner
        settings.tol_ktratio = 1e-6
        settings.max_threads = 1  # results must not depend on scheduling
        solution = clarabel.DefaultSolver(P, q, A, b, cones, settings).solve()
        name = str(solution.status)
        if name in _STATUS:
            break
        logger.debug("clarabel stopped with %s at tolerance %.1e", name, inner)
    wall = time.perf_counter() - t0
    status = _STATUS.get(name, Status.NUMERICAL_FAILURE)
    x = np.array(solution.x) if status is Status.OPTIMAL else None
    primal = problem.primal_violation(x) if x is not None else float("inf")
    scale = 1.0 + np.abs(b).max(initial=0.0)
    if status is Status.OPTIMAL and primal > tol * scale:
        logger.warning("solver reported %s but primal violation is %.3g", name, primal)
        status, x = Status.NUMERICAL_FAILURE, None
    objective = problem.objective(x) if x is not None else float("nan")
    return SolveReport(status, x, objective, max(primal, 0.0), float(solution.r_dual),
                       int(solution.iterations), wall, name)
