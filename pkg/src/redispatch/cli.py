"""Command-line entry point: forecast fitting and the redispatch pipelines."""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from importlib.resources import files
from pathlib import Path
from typing import Sequence

import numpy as np

from . import case_parser as cp
from . import cbco, montecarlo, pce
from .cbco import ContingencyModel, IterationLog
from .errors import InfeasibleSubproblem, MaxIterations, RedispatchError, SolverFailure, ValidationError
from .network import Network, compute_ptdf

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INFEASIBLE, EXIT_MAX_ITERS, EXIT_INPUT, EXIT_SOLVER = 0, 2, 3, 4, 5
MODES = ("det", "stoch", "mc", "compare")
DEFAULT_INPUTS = {"case": "case118.m", "forecasts": "forecasts118.csv",
                  "correlations": "correlations118.txt", "limits": "limits118.json"}


@dataclass(frozen=True)
class RunConfig:
    """Settings of one run; input paths of ``None`` select the bundled 118-bus reference data."""

    case: str | None = None
    forecasts: str | None = None
    correlations: str | None = None
    limits: str | None = None
    eps: float = 0.05
    samples: int = 10000
    seed: int = 0
    max_iters: int = cbco.DEFAULT_MAX_ITERS
    jobs: int = 1
    out: str = "out"
    slack: int | None = None
    out_of_bounds: str = "clip"

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValidationError(f"eps must lie in (0, 1), got {self.eps}")
        if self.samples < 1:
            raise ValidationError("samples must be at least 1")
        if self.max_iters < 0 or self.jobs < 1:
            raise ValidationError("max_iters must be non-negative and jobs positive")
        if self.out_of_bounds not in montecarlo.OUT_OF_BOUNDS:
            raise ValidationError(f"out_of_bounds must be one of {montecarlo.OUT_OF_BOUNDS}")

    def source(self, name: str):
        """Path of input ``name`` or the bundled resource standing in for it."""
        path = getattr(self, name)
        return Path(path) if path is not None else files("redispatch") / "data" / DEFAULT_INPUTS[name]


@dataclass(frozen=True, eq=False)
class Inputs:
    """Everything both pipelines need, built once from a configuration."""

    network: Network
    records: tuple[cp.ForecastRecord, ...]
    correlation: np.ndarray
    basis: pce.PceBasis
    P_R: pce.PceCoefficients
    P_G: pce.PceCoefficients
    p_D: np.ndarray
    model: ContingencyModel

    @property
    def base_pce(self) -> tuple[pce.PceCoefficients, pce.PceCoefficients]:
        return self.P_G, self.P_R

    @property
    def mean_dispatch(self) -> tuple[np.ndarray, np.ndarray]:
        return self.P_G.mean, self.P_R.mean


def load_forecasts(config: RunConfig):
    records = cp.parse_forecasts(config.source("forecasts").read_text())
    spec = cp.parse_correlation(config.source("correlations").read_text())
    return records, cp.assemble_correlation(spec, records)


def prepare(config: RunConfig) -> Inputs:
    """Parse inputs, fit the forecasts and clear the market around the mean RES output.

    The case's generator set-points are shifted with capacity-proportional
    participation until they balance demand net of the mean RES injection;
    the same factors carry the RES uncertainty into the conventional schedule.
    """
    network = cp.parse_case(config.source("case").read_text())
    if config.limits is not None or config.case is None:
        network = cp.apply_limit_profile(network, cp.parse_limit_profile(config.source("limits").read_text()))
    records, E = load_forecasts(config)
    network = cp.attach_res(network, records)
    if config.slack is not None:
        network = dataclasses.replace(network, slack_bus=config.slack)
    basis, P_R = pce.build_basis(records, E)
    p_G0 = pce.rebalance(network, P_R.mean)
    P_G = pce.market_clearing_pce(P_R, network, p_G0)
    model = ContingencyModel.of(network, compute_ptdf(network))
    return Inputs(network, tuple(records), E, basis, P_R, P_G, network.p_demand, model)


# --------------------------------------------------------------------------- output helpers

def _num(v) -> float | None:
    v = float(v)
    if not np.isfinite(v):
        return None
    return 0.0 if abs(v) < montecarlo.NOISE_FLOOR else float(f"{v:.6g}")


def _arr(a) -> list:
    a = np.asarray(a, dtype=float)
    return [_num(v) for v in a] if a.ndim == 1 else [_arr(r) for r in a]


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _write_json(out: Path, name: str, payload) -> None:
    _write(out, name, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _sha256(source) -> str:
    return hashlib.sha256(source.read_bytes()).hexdigest()


def write_manifest(config: RunConfig, command: str, timings: dict, extra: dict | None = None) -> None:
    from importlib.metadata import PackageNotFoundError, version

    try:
        pkg_version = version("artifact")
    except PackageNotFoundError:
        pkg_version = "unknown"
    payload = {
        "command": command,
        "config": dataclasses.asdict(config),
        "inputs": {name: {"path": str(config.source(name)), "sha256": _sha256(config.source(name))}
                   for name in DEFAULT_INPUTS},
        "version": pkg_version,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    payload.update(extra or {})
    _write_json(Path(config.out), "manifest.json", payload)


# --------------------------------------------------------------------------- commands

def cmd_fit(config: RunConfig) -> int:
    """Fit every forecast record and write the basis report to ``fit.json``."""
    t0 = time.perf_counter()
    records, E = load_forecasts(config)
    basis, P_R = pce.build_basis(records, E)
    report = {
        "records": [{"res_id": r.res_id, "bus": r.bus, "kind": r.kind, "alpha": _num(p.alpha), "beta": _num(p.beta),
                     "a": _num(p.a), "width": _num(p.c), "fit_error": float(f"{p.fit_error:.3g}")}
                    for r, p in zip(records, basis.params)],
        "correlation": _arr(E),
        "covariance": _arr(pce.covariance(P_R)),
        "coefficients": _arr(P_R.values),
        "basis_size": basis.size,
    }
    out = Path(config.out)
    _write_json(out, "fit.json", report)
    write_manifest(config, "fit", {"fit": time.perf_counter() - t0})
    print(f"fitted {len(records)} forecasts, coefficient matrix {P_R.values.shape[0]}x{P_R.values.shape[1]}")
    return EXIT_OK


def _det_payload(sol) -> dict:
    return {"objective": _num(sol.objective), "p_up": _arr(sol.p_up), "p_down": _arr(sol.p_down),
            "p_curt": _arr(sol.p_curt), "p_G": _arr(sol.p_G), "p_R": _arr(sol.p_R)}


def _stoch_payload(sol) -> dict:
    mean_G, var_G = pce.moments(sol.P_G)
    return {"expected_cost": _num(sol.expected_cost), "p_up": _arr(sol.p_up),
            "p_down": _arr(sol.p_down), "p_curt": _arr(sol.p_curt), "P_G": _arr(sol.P_G.values),
            "P_R": _arr(sol.P_R.values), "mean_G": _arr(mean_G), "std_G": _arr(np.sqrt(var_G))}


def _run_stochastic(config: RunConfig, inputs: Inputs, samples: np.ndarray):
    sol, log = cbco.run_stochastic(inputs.network, inputs.base_pce, inputs.p_D, config.eps, samples,
                                   config.max_iters, inputs.model)
    return sol, log


def cmd_run(config: RunConfig, mode: str) -> int:
    """Run one pipeline and write its artifacts to ``config.out``.

    Returns the process exit status.  Infeasible subproblems and exhausted
    iteration budgets still write the partial iteration log.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    out = Path(config.out)
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    inputs = prepare(config)
    timings["prepare"] = time.perf_counter() - t0
    extra: dict = {"mode": mode}
    try:
        if mode == "det":
            t = time.perf_counter()
            sol, log = cbco.run_deterministic(inputs.network, inputs.mean_dispatch, inputs.p_D, config.max_iters,
                                              inputs.model)
            timings["det"] = time.perf_counter() - t
            _write(out, "iterations.csv", log.to_csv())
            _write_json(out, "solution.json", _det_payload(sol))
            print(f"secure after {log.iterations} iterations, cost {sol.objective:.6g}")
            return EXIT_OK

        samples = pce.sample(inputs.basis, config.samples, config.seed)
        if mode in ("stoch", "compare"):
            t = time.perf_counter()
            sol, log = _run_stochastic(config, inputs, samples)
            timings["stoch"] = time.perf_counter() - t
            fresh = pce.sample(inputs.basis, config.samples, config.seed, stream=1)
            unresolved = cbco.verification_scan(inputs.network, sol, inputs.p_D, config.eps, fresh, inputs.model)
            extra["verification"] = {"fresh_samples": config.samples,
                                     "critical": [cbco.label(inputs.network, r.outage) for r in unresolved]}
            if unresolved:
                logger.warning("%d outages exceed eps on fresh samples", len(unresolved))
            _write(out, "iterations.csv", log.to_csv())
            _write_json(out, "solution.json", _stoch_payload(sol))
            print(f"secure after {log.iterations} iterations, expected cost {sol.expected_cost:.6g}")
        if mode in ("mc", "compare"):
            t = time.perf_counter()
            ens = montecarlo.run_mc(inputs.network, inputs.basis, inputs.base_pce, inputs.p_D, samples,
                                    config.jobs, config.max_iters, config.out_of_bounds, inputs.model)
            timings["mc"] = time.perf_counter() - t
            _write(out, "ensemble.csv", ens.to_csv())
            extra["ensemble"] = {"samples": ens.n_samples, "failures": ens.failures, "clipped": ens.n_clipped}
            print(f"{int(ens.ok.sum())} of {ens.n_samples} samples secure")
            if mode == "mc":
                _write_json(out, "ensemble_summary.json", {"mean_G": _arr(ens.mean), "std_G": _arr(ens.std)})
        if mode == "compare":
            comparison = montecarlo.compare(ens, sol, samples)
            _write(out, "comparison.csv", comparison.to_csv())
            ok = ens.ok
            for j in montecarlo.selected_generators(comparison):
                _write(out, f"density_{j + 1}.csv", comparison.density_csv(j, ens.p_G[ok, j]))
                _write(out, f"density_pce_{j + 1}.csv", comparison.density_csv(j, comparison.pce_values[:, j]))
        return EXIT_OK
    except InfeasibleSubproblem as exc:
        _partial(out, exc.log)
        _write_json(out, "diagnosis.json", {"constraints": [[c.outage, list(c.branches)] for c in exc.constraints],
                                            "diagnosis": exc.diagnosis})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except MaxIterations as exc:
        _partial(out, exc.log)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MAX_ITERS
    finally:
        write_manifest(config, "run", timings, extra)


def _partial(out: Path, log: IterationLog | None) -> None:
    if log is not None:
        _write(out, "iterations.csv", log.to_csv())


# --------------------------------------------------------------------------- argument handling

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="redispatch",
                                     description="(N-1)-secure redispatch under forecast uncertainty")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default settings; flags override it")
    common.add_argument("--case", help="MATPOWER case file")
    common.add_argument("--forecasts", help="forecast CSV")
    common.add_argument("--correlations", help="correlation specification")
    common.add_argument("--limits", help="JSON branch-limit profile")
    common.add_argument("--out", help="output directory")
    sub.add_parser("fit", parents=[common], help="fit the forecast distributions")

    run = sub.add_parser("run", parents=[common], help="run a redispatch pipeline")
    run.add_argument("--mode", choices=MODES, default="stoch")
    run.add_argument("--eps", type=float)
    run.add_argument("--samples", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--max-iters", dest="max_iters", type=int)
    run.add_argument("--jobs", type=int)
    run.add_argument("--slack", type=int, help="slack bus id (default: the case's reference bus)")
    run.add_argument("--out-of-bounds", dest="out_of_bounds", choices=montecarlo.OUT_OF_BOUNDS,
                     help="handling of Monte-Carlo set-points outside [0, p_max]")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    settings: dict = {}
    if args.config:
        settings.update(json.loads(Path(args.config).read_text()))
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(settings) - fields
    if unknown:
        raise ValidationError(f"unknown configuration keys: {sorted(unknown)}")
    settings.update({k: v for k, v in vars(args).items() if k in fields and v is not None})
    return RunConfig(**settings)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        if args.command == "fit":
            return cmd_fit(config)
        return cmd_run(config, args.mode)
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (RedispatchError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
