"""Contingency screening and the iterative (N-1) constraint-generation drivers."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import conic
from . import deterministic as det
from . import stochastic as sto
from .deterministic import DetSolution, OutageConstraint
from .errors import EmptyRecords, InfeasibleSubproblem, MaxIterations, SolverFailure
from .network import Network, PtdfMatrix, compute_ptdf, lodf_matrix, net_injection
from .pce import PceCoefficients
from .stochastic import StochSolution

logger = logging.getLogger(__name__)

BASE_CASE = -1  # outage id of the intact network
VIOLATION_THRESHOLD = 1e-4  # MW
DEFAULT_MAX_ITERS = 50
LOG_COLUMNS = ("iteration", "critical outage", "critical branches", "max mean violation (MW)",
               "% samples with violations")


@dataclass(frozen=True)
class CbcoRecord:
    """An outage with the branches it overloads.

    ``violations`` are MW above the limit: the flow excess for a single
    scenario, or the sample mean of ``|flow| - limit`` for a random flow.
    ``probabilities`` holds empirical violation frequencies in the random case.
    ``sample_share`` is the fraction of scenarios in which at least one of the
    listed branches is overloaded.
    """

    outage: int
    branches: tuple[int, ...]
    violations: tuple[float, ...]
    probabilities: tuple[float, ...] | None = None
    sample_share: float = 1.0

    @property
    def max_violation(self) -> float:
        return max(self.violations)


@dataclass(frozen=True, eq=False)
class ContingencyModel:
    """Intact PTDF, outage distribution factors and the screened outage list."""

    network: Network
    ptdf: PtdfMatrix
    lodf: np.ndarray
    outages: tuple[int, ...]

    @classmethod
    def of(cls, network: Network, ptdf: PtdfMatrix | None = None) -> "ContingencyModel":
        ptdf = compute_ptdf(network) if ptdf is None else ptdf
        skipped = sorted(network.bridges)
        if skipped:
            logger.warning("skipping %d islanding outages: %s", len(skipped),
                           ", ".join(network.branches[k].label for k in skipped))
        outages = tuple(k for k in range(network.n_branch) if k not in network.bridges)
        return cls(network, ptdf, lodf_matrix(network, ptdf), outages)

    def outage_flows(self, flows: np.ndarray, k: int) -> np.ndarray:
        """Post-outage flows for intact flows given along the last axis; entry ``k`` is zero."""
        out = flows + np.multiply.outer(flows[..., k], self.lodf[:, k])
        out[..., k] = 0.0
        return out


def label(network: Network, k: int) -> str:
    """Bus-pair label with the branch id, so parallel branches stay distinguishable."""
    if k == BASE_CASE:
        return "base"
    return f"{network.branches[k].label}#{k}"


def cbco_analysis(network: Network, dispatch: tuple[np.ndarray, np.ndarray], p_D: np.ndarray,
                  model: ContingencyModel | None = None, threshold: float = VIOLATION_THRESHOLD) -> list[CbcoRecord]:
    """Critical outages of a single operating point.

    The intact network is checked first and reported under ``BASE_CASE``;
    then every non-islanding outage in branch order.  A branch counts as
    overloaded when its flow exceeds the limit by more than ``threshold``.
    """
    model = ContingencyModel.of(network) if model is None else model
    inj = net_injection(dispatch[0], dispatch[1], p_D, network.incidence)
    f = model.ptdf.values @ inj
    lim = network.limits
    records = []
    for k in (BASE_CASE, *model.outages):
        fk = f if k == BASE_CASE else model.outage_flows(f, k)
        excess = np.abs(fk) - lim
        hit = np.flatnonzero(excess > threshold)
        if hit.size:
            records.append(CbcoRecord(k, tuple(int(i) for i in hit), tuple(float(excess[i]) for i in hit)))
    return records


def eps_cbco_analysis(network: Network, recovered: StochSolution, p_D: np.ndarray, eps: float,
                      samples: np.ndarray, model: ContingencyModel | None = None,
                      threshold: float = VIOLATION_THRESHOLD) -> list[CbcoRecord]:
    """Outages whose random post-outage flows overload some branch with frequency above ``eps``.

    Intact flow coefficients are evaluated once on the shared samples; each
    outage then only needs a rank-one correction of the sampled flows.  A
    sample violates a branch when ``|flow| >= limit + threshold``.  The
    severity of a branch is the sample mean of ``|flow| - limit``.

    ``p_D`` is accepted for interface symmetry; demand is already part of the
    recovered flow expansion.
    """
    model = ContingencyModel.of(network) if model is None else model
    phi = recovered.basis.phi(samples)
    S = phi @ recovered.P_f.values.T  # N x E intact flows
    n = S.shape[0]
    lim = network.limits
    records = []
    for k in (BASE_CASE, *model.outages):
        Sk = S if k == BASE_CASE else model.outage_flows(S, k)
        A = np.abs(Sk)
        over = A >= lim + threshold
        freq = over.mean(axis=0)
        if k != BASE_CASE:
            freq[k] = 0.0
        crit = np.flatnonzero(freq > eps)
        if crit.size:
            mean_violation = A[:, crit].mean(axis=0) - lim[crit]
            share = float(over[:, crit].any(axis=1).sum()) / n
            records.append(CbcoRecord(k, tuple(int(i) for i in crit), tuple(float(v) for v in mean_violation),
                                      tuple(float(freq[i]) for i in crit), share))
    return records


def max_violation_outage(records: Sequence[CbcoRecord]) -> CbcoRecord:
    """Record with the largest single violation; ties go to the lowest outage id."""
    if not records:
        raise EmptyRecords("no CBCO records to choose from")
    return min(records, key=lambda r: (-r.max_violation, r.outage))


# Random case: the stored violations are already the mean violations.
max_mean_violation = max_violation_outage


# --------------------------------------------------------------------------- iteration log

@dataclass(frozen=True)
class LogRow:
    iteration: int
    outage: int | None  # None marks the terminal row without critical outages
    branches: tuple[int, ...]
    max_violation: float
    pct_samples: float
    chosen: bool
    n_constraints: int
    solve_time: float
    objective: float


@dataclass
class IterationLog:
    network: Network
    rows: list[LogRow] = field(default_factory=list)

    def record(self, iteration: int, records: Sequence[CbcoRecord], chosen: CbcoRecord | None,
               n_constraints: int, solve_time: float, objective: float) -> None:
        if not records:
            self.rows.append(LogRow(iteration, None, (), 0.0, 0.0, False, n_constraints, solve_time, objective))
            return
        for r in sorted(records, key=lambda r: (-r.max_violation, r.outage)):
            self.rows.append(LogRow(iteration, r.outage, r.branches, r.max_violation, 100.0 * r.sample_share,
                                    r is chosen, n_constraints, solve_time, objective))

    @property
    def iterations(self) -> int:
        """Index of the last iteration."""
        return self.rows[-1].iteration if self.rows else -1

    @property
    def chosen(self) -> list[tuple[int, int]]:
        """``(iteration, outage)`` of the outage appended in each iteration."""
        return [(r.iteration, r.outage) for r in self.rows if r.chosen]

    @property
    def constraints(self) -> list[OutageConstraint]:
        """Post-outage limits in force after the last iteration, one entry per outage."""
        merged: dict[int, list[int]] = {}
        for r in self.rows:
            if r.chosen:
                seen = merged.setdefault(r.outage, [])
                seen.extend(b for b in r.branches if b not in seen)
        return [OutageConstraint(k, tuple(v)) for k, v in merged.items()]

    @property
    def terminated(self) -> bool:
        return bool(self.rows) and self.rows[-1].outage is None

    def table(self) -> list[tuple[str, str, str, str, str]]:
        out = []
        for r in self.rows:
            if r.outage is None:
                out.append((str(r.iteration), "∅", "∅", "0", "0"))
                continue
            branches = "{" + ", ".join(label(self.network, b) for b in r.branches) + "}"
            out.append((str(r.iteration), label(self.network, r.outage), branches,
                        f"{r.max_violation:.6g}", f"{r.pct_samples:.6g}"))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        writer.writerows(self.table())
        return buf.getvalue()


# --------------------------------------------------------------------------- drivers

def _append(constraints: list[OutageConstraint], record: CbcoRecord) -> None:
    already = {b for c in constraints if c.outage == record.outage for b in c.branches}
    new = tuple(b for b in record.branches if b not in already)
    if not new:
        raise SolverFailure(f"outage {record.outage} is still critical on branches that are already constrained")
    constraints.append(OutageConstraint(record.outage, new))


def _selectable(records: Sequence[CbcoRecord]) -> list[CbcoRecord]:
    outages = [r for r in records if r.outage != BASE_CASE]
    if records and not outages:
        raise SolverFailure("intact flow limits are violated although they are part of the subproblem")
    return outages


def run_deterministic(network: Network, base: tuple[np.ndarray, np.ndarray], p_D: np.ndarray,
                      max_iters: int = DEFAULT_MAX_ITERS, model: ContingencyModel | None = None,
                      threshold: float = VIOLATION_THRESHOLD) -> tuple[DetSolution, IterationLog]:
    """Iterative (N-1)-secure redispatch of a single scenario.

    Solve, screen all outages, add post-outage limits for every overloaded
    branch of the worst outage, and repeat until no outage is critical.

    Raises
    ------
    MaxIterations
        The outage set is still non-empty after ``max_iters`` iterations.
    InfeasibleSubproblem
        A subproblem has no solution; the constraint set and a minimal-slack
        diagnosis are attached.
    SolverFailure
        The solver failed numerically.
    """
    model = ContingencyModel.of(network) if model is None else model
    log = IterationLog(network)
    constraints: list[OutageConstraint] = []
    previous = -np.inf
    for it in range(max_iters + 1):
        problem = det.build_det_problem(network, model.ptdf, base, p_D, constraints)
        report = conic.solve(problem)
        if report.status is conic.Status.INFEASIBLE:
            raise InfeasibleSubproblem(f"redispatch subproblem of iteration {it} is infeasible",
                                       constraints=list(constraints),
                                       diagnosis=det.diagnose_infeasibility(problem), log=log)
        if not report.optimal:
            raise SolverFailure(f"redispatch subproblem of iteration {it} failed: {report.message}")
        sol = _det_solution(network, base, report)
        if sol.objective < previous - 1e-6 * max(1.0, abs(previous)):
            logger.warning("objective decreased from %.9g to %.9g", previous, sol.objective)
        previous = sol.objective
        records = cbco_analysis(network, (sol.p_G, sol.p_R), p_D, model, threshold)
        outages = _selectable(records)
        if not outages:
            log.record(it, [], None, len(constraints), report.wall_time, sol.objective)
            return sol, log
        chosen = max_violation_outage(outages)
        log.record(it, outages, chosen, len(constraints), report.wall_time, sol.objective)
        if it == max_iters:
            break
        _append(constraints, chosen)
    raise MaxIterations(f"no (N-1)-secure redispatch within {max_iters} iterations", log=log)


def _det_solution(network: Network, base, report: conic.SolveReport) -> DetSolution:
    data = det.adjustment_data(network)
    z = report.x[:data.size]
    up, down, curt = data.split(z)
    p_G = np.asarray(base[0], dtype=float) + up - down
    p_R = np.asarray(base[1], dtype=float) - curt
    return DetSolution(up, down, curt, p_G, p_R, data.cost(z), report)


def run_stochastic(network: Network, base_pce: tuple[PceCoefficients, PceCoefficients], p_D: np.ndarray,
                   eps: float, samples: np.ndarray, max_iters: int = DEFAULT_MAX_ITERS,
                   model: ContingencyModel | None = None,
                   threshold: float = VIOLATION_THRESHOLD) -> tuple[StochSolution, IterationLog]:
    """Iterative (N-1)-secure chance-constrained redispatch.

    The same sample matrix is used for every screening pass, so the set of
    critical outages can only shrink as constraints are added.

    Raises
    ------
    MaxIterations, InfeasibleSubproblem, SolverFailure
        As for :func:`run_deterministic`.
    """
    model = ContingencyModel.of(network) if model is None else model
    log = IterationLog(network)
    constraints: list[OutageConstraint] = []
    previous = -np.inf
    for it in range(max_iters + 1):
        t0 = time.perf_counter()
        problem, layout = sto.build_stoch_problem(network, model.ptdf, base_pce, p_D, eps, constraints)
        report = conic.solve(problem)
        if report.status is conic.Status.INFEASIBLE:
            raise InfeasibleSubproblem(f"stochastic subproblem of iteration {it} is infeasible",
                                       constraints=list(constraints), log=log)
        if not report.optimal:
            raise SolverFailure(f"stochastic subproblem of iteration {it} failed: {report.message}")
        sol = sto.recover(report.x, layout, network, base_pce, p_D, report, model.ptdf)
        elapsed = time.perf_counter() - t0
        if sol.expected_cost < previous - 1e-6 * max(1.0, abs(previous)):
            logger.warning("expected cost decreased from %.9g to %.9g", previous, sol.expected_cost)
        previous = sol.expected_cost
        records = eps_cbco_analysis(network, sol, p_D, eps, samples, model, threshold)
        outages = _selectable(records)
        logger.info("iteration %d: %d critical outages, cost %.6f, %.2f s", it, len(outages),
                    sol.expected_cost, elapsed)
        if not outages:
            log.record(it, [], None, len(constraints), elapsed, sol.expected_cost)
            return sol, log
        chosen = max_mean_violation(outages)
        log.record(it, outages, chosen, len(constraints), elapsed, sol.expected_cost)
        if it == max_iters:
            break
        _append(constraints, chosen)
    raise MaxIterations(f"no (N-1)-secure stochastic redispatch within {max_iters} iterations", log=log)


def verification_scan(network: Network, recovered: StochSolution, p_D: np.ndarray, eps: float,
                      fresh_samples: np.ndarray, model: ContingencyModel | None = None,
                      threshold: float = VIOLATION_THRESHOLD) -> list[CbcoRecord]:
    """Records whose frequency on fresh samples exceeds ``eps`` by more than two binomial standard errors."""
    n = fresh_samples.shape[0]
    margin = eps + 2.0 * np.sqrt(eps * (1.0 - eps) / n)
    return eps_cbco_analysis(network, recovered, p_D, margin, fresh_samples, model, threshold)
