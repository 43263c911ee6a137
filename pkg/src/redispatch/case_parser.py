"""Readers and writers for case files, RES forecasts, correlations and limit profiles."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NotPSD, ParseError, ValidationError
from .network import RES_KINDS, Branch, Demand, Generator, Network, ResUnit

logger = logging.getLogger(__name__)

# Matpower column positions (0-based) for the subset we read.
BUS_I, BUS_TYPE, PD = 0, 1, 2
F_BUS, T_BUS, BR_X, RATE_A, TAP, BR_STATUS = 0, 1, 3, 5, 8, 10
GEN_BUS, PG, GEN_STATUS, PMAX = 0, 1, 7, 8
REF_BUS_TYPE = 3

FORECAST_COLUMNS = ("res_id", "bus", "kind", "mu", "q5", "q95", "a", "b")


@dataclass(frozen=True)
class CaseOptions:
    """Settings applied while turning a case file into a ``Network``.

    Attributes
    ----------
    default_limit
        Flow limit in MW for branches whose ``rateA`` is zero or absent.
    ramp_up_fraction, ramp_down_fraction
        Redispatch bounds as fractions of each generator's ``Pmax``.
    """

    default_limit: float = 240.0
    ramp_up_fraction: float = 0.4
    ramp_down_fraction: float = 0.6


@dataclass(frozen=True)
class ForecastRecord:
    res_id: str
    bus: int
    kind: str
    mu: float
    q5: float
    q95: float
    a: float
    b: float

    def __post_init__(self):
        if self.kind not in RES_KINDS:
            raise ValidationError(f"forecast {self.res_id}: unknown kind {self.kind!r}")
        values = (self.mu, self.q5, self.q95, self.a, self.b)
        if not all(np.isfinite(values)):
            raise ValidationError(f"forecast {self.res_id}: non-finite value")
        if not self.b > self.a:
            raise ValidationError(f"forecast {self.res_id}: support [{self.a}, {self.b}] is empty")
        if not self.q5 < self.q95:
            raise ValidationError(f"forecast {self.res_id}: q5={self.q5} is not below q95={self.q95}")
        if not self.a <= self.q5 <= self.mu <= self.q95 <= self.b:
            raise ValidationError(
                f"forecast {self.res_id}: expected a <= q5 <= mu <= q95 <= b, got "
                f"{self.a}, {self.q5}, {self.mu}, {self.q95}, {self.b}"
            )

    @property
    def width(self) -> float:
        return self.b - self.a

    def scaled(self) -> tuple[float, float, float]:
        """Mean and quantiles mapped onto the unit support."""
        c = self.width
        return (self.mu - self.a) / c, (self.q5 - self.a) / c, (self.q95 - self.a) / c


@dataclass(frozen=True, eq=False)
class CorrelationSpec:
    """Either a dense matrix or per-kind pair defaults."""

    matrix: np.ndarray | None = None
    solar: float = 0.0
    wind: float = 0.0
    cross: float = 0.0

    def __post_init__(self):
        if self.matrix is not None:
            E = np.asarray(self.matrix, dtype=float)
            if E.ndim != 2 or E.shape[0] != E.shape[1]:
                raise ValidationError("correlation matrix must be square")
            if not np.allclose(E, E.T, atol=1e-12):
                raise ValidationError("correlation matrix must be symmetric")
            if not np.allclose(np.diag(E), 1.0, atol=1e-12):
                raise ValidationError("correlation matrix must have a unit diagonal")
            if np.any(np.abs(E) > 1.0 + 1e-12):
                raise ValidationError("correlation entries must lie in [-1, 1]")
            object.__setattr__(self, "matrix", E)
        for name in ("solar", "wind", "cross"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} correlation must lie in [-1, 1]")

    @classmethod
    def identity(cls) -> "CorrelationSpec":
        return cls()


# --------------------------------------------------------------------------- case files

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")


def _strip_comment(line: str) -> str:
    # '%' starts a comment except inside a quoted string; the numeric tables never quote.
    return line.split("%", 1)[0]


def _matrix_blocks(text: str) -> tuple[dict[str, np.ndarray], dict[str, float], dict[str, int]]:
    """Extract ``mpc.<name> = [ ... ];`` numeric tables and scalar assignments."""
    lines = text.splitlines()
    tables: dict[str, np.ndarray] = {}
    scalars: dict[str, float] = {}
    first_line: dict[str, int] = {}
    i = 0
    while i < len(lines):
        code = _strip_comment(lines[i])
        m = _ASSIGN.search(code)
        if not m:
            i += 1
            continue
        name, rest = m.group(1), code[m.end():]
        if rest.lstrip().startswith("["):
            start = i + 1
            col0 = code.index("[", m.end()) + 1
            body: list[tuple[int, int, str]] = [(i + 1, col0 + 1, code[col0:])]
            while "]" not in body[-1][2]:
                i += 1
                if i >= len(lines):
                    raise ParseError(f"unterminated matrix 'mpc.{name}'", line=start)
                body.append((i + 1, 1, _strip_comment(lines[i])))
            last_line, last_col, last = body[-1]
            body[-1] = (last_line, last_col, last[: last.index("]")])
            tables[name] = _parse_rows(name, body)
            first_line[name] = start
        elif rest.lstrip().startswith(("{", "'", '"')):
            # cell arrays and strings (bus names, version) are not needed
            if rest.lstrip().startswith("{"):
                while "}" not in _strip_comment(lines[i]):
                    i += 1
                    if i >= len(lines):
                        raise ParseError(f"unterminated cell array 'mpc.{name}'", line=start)
        else:
            value = rest.strip().rstrip(";").strip()
            try:
                scalars[name] = float(value)
            except ValueError as exc:
                raise ParseError(
                    f"cannot read value of 'mpc.{name}': {value!r}", line=i + 1, column=m.end() + 1
                ) from exc
        i += 1
    return tables, scalars, first_line


def _parse_rows(name: str, body: Sequence[tuple[int, int, str]]) -> np.ndarray:
    rows: list[list[float]] = []
    current: list[float] = []
    for line_no, col_offset, content in body:
        for piece_match in re.finditer(r"[^;\n]+|;", content):
            piece = piece_match.group(0)
            if piece == ";":
                if current:
                    rows.append(current)
                current = []
                continue
            for tok in re.finditer(r"[^\s,]+", piece):
                try:
                    current.append(float(tok.group(0)))
                except ValueError as exc:
                    raise ParseError(
                        f"non-numeric entry {tok.group(0)!r} in 'mpc.{name}'",
                        line=line_no,
                        column=col_offset + piece_match.start() + tok.start(),
                    ) from exc
        if current:  # a newline also ends a row
            rows.append(current)
            current = []
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    for k, r in enumerate(rows):
        if len(r) != width:
            raise ParseError(f"row {k + 1} of 'mpc.{name}' has {len(r)} columns, expected {width}",
                             line=body[0][0])
    return np.array(rows)


def parse_case(text: str, options: CaseOptions | None = None) -> Network:
    """Build a ``Network`` from the text of a Matpower-format case file.

    Only in-service branches and generators are kept.  Branch reactances are
    divided by a nonzero tap ratio so that the DC susceptance ``1/(x*tap)`` is
    represented by a single effective reactance.  Loads are aggregated per bus
    from the ``Pd`` column; buses without load carry no demand record.

    Parameters
    ----------
    text
        Contents of the ``.m`` file.
    options
        Default limit and ramp fractions, see :class:`CaseOptions`.

    Raises
    ------
    ParseError
        Malformed or missing tables, with the offending line when known.
    ValidationError
        The parsed data violates a network invariant.
    """
    opts = options or CaseOptions()
    tables, scalars, first_line = _matrix_blocks(text)
    for name, min_cols in (("bus", 3), ("branch", 11), ("gen", 9), ("gencost", 5)):
        if name not in tables:
            raise ParseError(f"missing table 'mpc.{name}'")
        if tables[name].shape[1] < min_cols:
            raise ParseError(f"table 'mpc.{name}' needs at least {min_cols} columns",
                             line=first_line[name])
    bus, branch, gen, gencost = (tables[k] for k in ("bus", "branch", "gen", "gencost"))
    if gencost.shape[0] != gen.shape[0]:
        raise ParseError(
            f"gencost has {gencost.shape[0]} rows but gen has {gen.shape[0]}", line=first_line["gencost"]
        )
    for name in tables:
        if name not in ("bus", "branch", "gen", "gencost"):
            logger.warning("ignoring unsupported table mpc.%s", name)
    base_mva = scalars.get("baseMVA", 100.0)

    buses = tuple(int(b) for b in bus[:, BUS_I])
    ref = [int(b) for b, t in zip(bus[:, BUS_I], bus[:, BUS_TYPE]) if int(t) == REF_BUS_TYPE]
    slack = ref[0] if ref else None

    branches = []
    for row in branch:
        if row[BR_STATUS] <= 0:
            continue
        tap = row[TAP] if row[TAP] != 0 else 1.0
        rate = row[RATE_A]
        branches.append(Branch(int(row[F_BUS]), int(row[T_BUS]), float(row[BR_X] * tap),
                               float(rate) if rate > 0 else opts.default_limit))

    generators = []
    for row, cost in zip(gen, gencost):
        if row[GEN_STATUS] <= 0:
            continue
        c2, c1 = _quadratic_cost(cost)
        p_max = float(row[PMAX])
        generators.append(Generator(
            bus=int(row[GEN_BUS]), p_max=p_max,
            ramp_up_max=opts.ramp_up_fraction * p_max, ramp_down_max=opts.ramp_down_fraction * p_max,
            g2_up=c2, g1_up=c1, g2_down=c2, g1_down=c1, p_set=float(row[PG]),
        ))

    demands = tuple(Demand(int(b), float(pd)) for b, pd in zip(bus[:, BUS_I], bus[:, PD]) if pd != 0)
    return Network(buses, tuple(branches), tuple(generators), (), demands, slack, base_mva)


def _quadratic_cost(row: np.ndarray) -> tuple[float, float]:
    model, n = int(row[0]), int(row[3])
    if model != 2:
        raise ParseError("only polynomial gencost rows (model 2) are supported")
    coeffs = list(row[4:4 + n])
    if len(coeffs) != n or n > 3:
        raise ParseError(f"polynomial gencost of degree {n - 1} is not supported")
    coeffs = [0.0] * (3 - n) + coeffs  # pad to (c2, c1, c0)
    return float(coeffs[0]), float(coeffs[1])


def emit_case(network: Network) -> str:
    """Write the supported subset of a network back to Matpower text.

    Ramp bounds are not part of the format; they are re-derived from ``Pmax``
    on parsing, so round trips are exact only when they follow the
    fractions in :class:`CaseOptions` and up/down costs coincide.
    """
    load = {b: 0.0 for b in network.buses}
    for d in network.demands:
        load[d.bus] += d.p
    fmt = "{:.17g}".format
    out = ["function mpc = case_emitted", "mpc.version = '2';", f"mpc.baseMVA = {fmt(network.base_mva)};", "",
           "mpc.bus = ["]
    for b in network.buses:
        kind = REF_BUS_TYPE if b == network.slack_bus else 1
        out.append(f"\t{b}\t{kind}\t{fmt(load[b])}\t0\t0\t0\t1\t1\t0\t0\t1\t1.06\t0.94;")
    out += ["];", "", "mpc.gen = ["]
    for g in network.generators:
        out.append(f"\t{g.bus}\t{fmt(g.p_set)}\t0\t0\t0\t1\t100\t1\t{fmt(g.p_max)}\t0;")
    out += ["];", "", "mpc.branch = ["]
    for br in network.branches:
        out.append(f"\t{br.from_bus}\t{br.to_bus}\t0\t{fmt(br.reactance)}\t0\t{fmt(br.limit)}\t0\t0\t0\t0\t1\t-360\t360;")
    out += ["];", "", "mpc.gencost = ["]
    for g in network.generators:
        out.append(f"\t2\t0\t0\t3\t{fmt(g.g2_up)}\t{fmt(g.g1_up)}\t0;")
    out += ["];", ""]
    return "\n".join(out)


# --------------------------------------------------------------------------- forecasts

def parse_forecasts(text: str) -> list[ForecastRecord]:
    """Read forecast records from CSV text with the columns ``res_id,bus,kind,mu,q5,q95,a,b``."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise ParseError("forecast file is empty")
    header = [h.strip() for h in reader.fieldnames]
    missing = [c for c in FORECAST_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"forecast header lacks columns {missing}", line=1)
    reader.fieldnames = header
    records = []
    seen = set()
    for row in reader:
        line = reader.line_num
        try:
            rec = ForecastRecord(
                res_id=row["res_id"].strip(), bus=int(row["bus"]), kind=row["kind"].strip().lower(),
                mu=float(row["mu"]), q5=float(row["q5"]), q95=float(row["q95"]),
                a=float(row["a"]), b=float(row["b"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise ValidationError(f"{exc} (line {line})") from exc
            raise ParseError(f"malformed forecast record: {exc}", line=line) from exc
        if rec.res_id in seen:
            raise ValidationError(f"duplicate res_id {rec.res_id!r} (line {line})")
        seen.add(rec.res_id)
        records.append(rec)
    return records


def emit_forecasts(records: Iterable[ForecastRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FORECAST_COLUMNS)
    for r in records:
        writer.writerow([r.res_id, r.bus, r.kind] + [f"{v:.10g}" for v in (r.mu, r.q5, r.q95, r.a, r.b)])
    return buf.getvalue()


def attach_res(network: Network, records: Sequence[ForecastRecord], curtail_fraction: float = 0.2,
               r2: float = 0.05, r1: float = 60.0) -> Network:
    """Return ``network`` with one RES unit per forecast record.

    Curtailment is bounded by ``curtail_fraction`` of the mean forecast.
    """
    units = tuple(
        ResUnit(bus=r.bus, kind=r.kind, curtail_max=curtail_fraction * r.mu, r2=r2, r1=r1, name=r.res_id)
        for r in records
    )
    return replace(network, res_units=units)


# --------------------------------------------------------------------------- correlations

_DEFAULTS = re.compile(r"^\s*kind_defaults\s*:\s*(.*)$")


def parse_correlation(text: str) -> CorrelationSpec:
    """Read either a ``kind_defaults: solar=.. wind=.. cross=..`` line or a dense CSV matrix."""
    stripped = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not stripped:
        raise ParseError("correlation file is empty")
    m = _DEFAULTS.match(stripped[0])
    if m:
        values = {}
        for tok in m.group(1).split():
            key, sep, val = tok.partition("=")
            if not sep or key not in ("solar", "wind", "cross"):
                raise ParseError(f"bad kind default {tok!r}", line=1)
            try:
                values[key] = float(val)
            except ValueError as exc:
                raise ParseError(f"bad kind default {tok!r}", line=1) from exc
        return CorrelationSpec(**values)
    rows = []
    for k, ln in enumerate(stripped):
        try:
            rows.append([float(v) for v in ln.replace(",", " ").split()])
        except ValueError as exc:
            raise ParseError(f"non-numeric correlation entry: {exc}", line=k + 1) from exc
    if any(len(r) != len(rows) for r in rows):
        raise ParseError("correlation matrix is not square")
    return CorrelationSpec(matrix=np.array(rows))


def assemble_correlation(spec: CorrelationSpec, records: Sequence[ForecastRecord], tol: float = 1e-10) -> np.ndarray:
    """Expand ``spec`` to a full matrix ordered like ``records`` and check it is PSD.

    Raises
    ------
    NotPSD
        The smallest eigenvalue is below ``-tol * n``.
    """
    n = len(records)
    if spec.matrix is not None:
        if spec.matrix.shape != (n, n):
            raise ValidationError(f"correlation matrix is {spec.matrix.shape}, expected {(n, n)}")
        E = spec.matrix.copy()
    else:
        kinds = [r.kind for r in records]
        E = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                if kinds[i] == kinds[j]:
                    E[i, j] = E[j, i] = spec.solar if kinds[i] == "solar" else spec.wind
                else:
                    E[i, j] = E[j, i] = spec.cross
    if n and np.linalg.eigvalsh(E).min() < -tol * max(n, 1):
        raise NotPSD("assembled correlation matrix is not positive semidefinite")
    return E


# --------------------------------------------------------------------------- limit profiles

def parse_limit_profile(text: str) -> dict:
    """Read a JSON limit profile.

    Expected shape::

        {"default": 240, "overrides": [{"from": 8, "to": 30, "limit": 300}, ...]}

    An override may name a branch by ``"branch"`` (0-based id) instead of a bus pair.
    """
    try:
        profile = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"limit profile is not valid JSON: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    if not isinstance(profile, dict):
        raise ParseError("limit profile must be a JSON object")
    return profile


def apply_limit_profile(network: Network, profile: Mapping) -> Network:
    """Return a copy of ``network`` with branch limits set by ``profile``.

    A bus-pair override applies to every parallel branch on that pair.
    """
    limits = [br.limit for br in network.branches]
    if "default" in profile:
        limits = [float(profile["default"])] * network.n_branch
    for item in profile.get("overrides", []):
        limit = float(item["limit"])
        if "branch" in item:
            ids = [int(item["branch"])]
            if not 0 <= ids[0] < network.n_branch:
                raise ValidationError(f"limit override names unknown branch {ids[0]}")
        else:
            ids = network.branch_ids(int(item["from"]), int(item["to"]))
            if not ids:
                raise ValidationError(f"limit override names unknown branch ({item['from']},{item['to']})")
        for k in ids:
            limits[k] = limit
    branches = tuple(replace(br, limit=lim) for br, lim in zip(network.branches, limits))
    return replace(network, branches=branches)
