"""Monte-Carlo reference: deterministic secure redispatch of every sampled market-clearing scenario."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import cbco
from .cbco import ContingencyModel
from .errors import InfeasibleSubproblem, MaxIterations, SolverFailure, Unbalanced, ValidationError
from .network import Network
from .pce import PceBasis, PceCoefficients, evaluate, participation_factors, rebalance
from .stochastic import StochSolution

logger = logging.getLogger(__name__)

BOUND_TOL = 1e-9  # MW slack before a realized set-point counts as out of bounds
OUT_OF_BOUNDS = ("clip", "reject")
NOISE_FLOOR = 1e-9  # MW; smaller magnitudes are written as zero


@dataclass(frozen=True, eq=False)
class EnsembleResult:
    """Per-sample outcomes in sample order.

    Rows of failed or rejected samples hold ``nan``; ``status`` says why
    (``secure``, ``rejected``, ``infeasible``, ``max_iters`` or ``solver_failure``).
    """

    p_G: np.ndarray  # N x G final dispatch
    p_R: np.ndarray  # N x R final RES output
    objective: np.ndarray
    iterations: np.ndarray
    status: tuple[str, ...]
    n_clipped: int
    wall_time: float

    @property
    def n_samples(self) -> int:
        return len(self.status)

    @property
    def ok(self) -> np.ndarray:
        return np.array([s == "secure" for s in self.status], dtype=bool)

    @property
    def failures(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.status:
            if s != "secure":
                out[s] = out.get(s, 0) + 1
        return out

    @property
    def mean(self) -> np.ndarray:
        return self.p_G[self.ok].mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.p_G[self.ok].std(axis=0)

    def histogram(self, gen: int) -> tuple[np.ndarray, np.ndarray]:
        """Bin centres and densities of the final set-point of generator ``gen`` (0-based)."""
        return density(self.p_G[self.ok, gen])

    def to_csv(self) -> str:
        n_g, n_r = self.p_G.shape[1], self.p_R.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "status", "objective", "iterations"]
                   + [f"p_G{j + 1}" for j in range(n_g)] + [f"p_R{j + 1}" for j in range(n_r)])
        for i, s in enumerate(self.status):
            w.writerow([i, s, _fmt(self.objective[i]), int(self.iterations[i])]
                       + [_fmt(v) for v in self.p_G[i]] + [_fmt(v) for v in self.p_R[i]])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "0" if abs(v) < NOISE_FLOOR else f"{v:.6g}"


def density(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Histogram density with Freedman-Diaconis bins; a constant sample gets one unit-width bin."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return np.zeros(0), np.zeros(0)
    if np.ptp(values) == 0:
        edges = np.array([values[0] - 0.5, values[0] + 0.5])
    else:
        edges = np.histogram_bin_edges(values, bins="fd")
    dens, edges = np.histogram(values, bins=edges, density=True)
    return 0.5 * (edges[:-1] + edges[1:]), dens


def _solve_chunk(network: Network, model: ContingencyModel, P_G: np.ndarray, P_R: np.ndarray, p_D: np.ndarray,
                 weights: np.ndarray, max_iters: int, out_of_bounds: str) -> list[tuple]:
    p_max = np.array([g.p_max for g in network.generators])
    results = []
    for pg, pr in zip(P_G, P_R):
        clipped = False
        pr = np.maximum(pr, 0.0)
        if np.any(pg < -BOUND_TOL) or np.any(pg > p_max + BOUND_TOL):
            if out_of_bounds == "reject":
                results.append(("rejected", None, None, np.nan, 0, False))
                continue
            clipped = True
            try:
                pg = rebalance(network, pr, p_set=np.clip(pg, 0.0, p_max), weights=weights)
            except Unbalanced:
                results.append(("rejected", None, None, np.nan, 0, True))
                continue
        try:
            sol, log = cbco.run_deterministic(network, (pg, pr), p_D, max_iters=max_iters, model=model)
        except InfeasibleSubproblem as exc:
            results.append(("infeasible", None, None, np.nan, exc.log.iterations + 1, clipped))
            continue
        except MaxIterations:
            results.append(("max_iters", None, None, np.nan, max_iters, clipped))
            continue
        except SolverFailure:
            results.append(("solver_failure", None, None, np.nan, 0, clipped))
            continue
        results.append(("secure", sol.p_G, sol.p_R, sol.objective, log.iterations, clipped))
    return results


def run_mc(network: Network, basis: PceBasis, base_pce: tuple[PceCoefficients, PceCoefficients], p_D: np.ndarray,
           samples: np.ndarray, parallelism: int = 1, max_iters: int = cbco.DEFAULT_MAX_ITERS,
           out_of_bounds: str = "clip", model: ContingencyModel | None = None) -> EnsembleResult:
    """Run deterministic constraint generation on every realized market-clearing scenario.

    Realized conventional set-points outside ``[0, p_max]`` are clipped and the
    schedule re-balanced with the market-clearing participation factors, or
    the sample is rejected when ``out_of_bounds="reject"``.  Per-sample
    failures are counted and excluded from the statistics.

    Parameters
    ----------
    parallelism
        Number of worker processes.  Samples are split into contiguous chunks
        and results are reassembled in sample order, so the outcome does not
        depend on scheduling.
    """
    if out_of_bounds not in OUT_OF_BOUNDS:
        raise ValidationError(f"out_of_bounds must be one of {OUT_OF_BOUNDS}")
    if base_pce[0].basis is not basis and base_pce[0].basis != basis:
        raise ValidationError("base expansion is defined on a different basis")
    t0 = time.perf_counter()
    model = ContingencyModel.of(network) if model is None else model
    P_G = evaluate(base_pce[0], samples)
    P_R = evaluate(base_pce[1], samples)
    p_D = np.asarray(p_D, dtype=float)
    weights = participation_factors(network, base_pce[0].mean)
    n = P_G.shape[0]
    jobs = max(1, min(int(parallelism), n))
    if jobs == 1:
        results = _solve_chunk(network, model, P_G, P_R, p_D, weights, max_iters, out_of_bounds)
    else:
        from joblib import Parallel, delayed

        bounds = np.linspace(0, n, 4 * jobs + 1).astype(int)
        chunks = Parallel(n_jobs=jobs)(
            delayed(_solve_chunk)(network, model, P_G[lo:hi], P_R[lo:hi], p_D, weights, max_iters, out_of_bounds)
            for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
        )
        results = [r for chunk in chunks for r in chunk]

    n_g, n_r = P_G.shape[1], P_R.shape[1]
    p_G, p_R = np.full((n, n_g), np.nan), np.full((n, n_r), np.nan)
    objective, iterations = np.full(n, np.nan), np.zeros(n, dtype=int)
    status = []
    for i, (s, pg, pr, obj, it, _) in enumerate(results):
        status.append(s)
        iterations[i] = it
        if s == "secure":
            p_G[i], p_R[i], objective[i] = pg, pr, obj
    n_clipped = sum(r[5] for r in results)
    if n_clipped:
        logger.warning("%d of %d samples had out-of-bounds set-points and were clipped", n_clipped, n)
    result = EnsembleResult(p_G, p_R, objective, iterations, tuple(status), n_clipped, time.perf_counter() - t0)
    if result.failures:
        logger.warning("excluded samples: %s", result.failures)
    return result


@dataclass(frozen=True, eq=False)
class Comparison:
    """Per-generator moments of the PCE and Monte-Carlo solutions on the same samples."""

    mean_pce: np.ndarray
    mean_mc: np.ndarray
    std_pce: np.ndarray
    std_mc: np.ndarray
    pce_values: np.ndarray  # N_ok x G realizations of the PCE solution

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["generator", "mean_pce", "mean_mc", "std_pce", "std_mc"])
        for j in range(len(self.mean_pce)):
            w.writerow([j + 1] + [_fmt(v[j]) for v in (self.mean_pce, self.mean_mc, self.std_pce, self.std_mc)])
        return buf.getvalue()

    def density_csv(self, gen: int, values: np.ndarray) -> str:
        centers, dens = density(values)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_center", "density"])
        w.writerows([_fmt(c), _fmt(d)] for c, d in zip(centers, dens))
        return buf.getvalue()


def compare(ensemble: EnsembleResult, stoch: StochSolution, samples: np.ndarray) -> Comparison:
    """Evaluate the recovered PCE dispatch on the samples the ensemble was built from.

    Only samples with a secure Monte-Carlo solution enter either column.
    """
    if samples.shape[0] != ensemble.n_samples:
        raise ValidationError("sample count differs from the ensemble size")
    ok = ensemble.ok
    values = evaluate(stoch.P_G, samples[ok])
    return Comparison(values.mean(axis=0), ensemble.mean, values.std(axis=0), ensemble.std, values)


def selected_generators(comparison: Comparison, min_std: float = 0.5) -> Sequence[int]:
    """0-based generators whose Monte-Carlo spread exceeds ``min_std`` MW."""
    return [int(j) for j in np.flatnonzero(comparison.std_mc > min_std)]
