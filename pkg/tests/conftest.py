from __future__ import annotations

import logging

import pytest

from redispatch.cli import RunConfig, prepare

ACCEPTANCE = {
    "test_zero_uncertainty_equivalence": "1 zero-uncertainty equivalence",
    "test_ptdf_oracle_suite": "2 PTDF oracle suite",
    "test_beta_fit_round_trip": "3 beta fit round trip",
    "test_moment_agreement": "4 PCE vs MC moment agreement",
    "test_chance_constraint_validity": "5 chance-constraint validity",
    "test_speed_ordering": "6 PCE vs MC speed ordering",
    "test_constraint_generation_behavior": "7 constraint-generation behavior",
    "test_solver_oracle": "8 solver oracle",
}
_outcomes: dict[str, str] = {}


@pytest.fixture(scope="session")
def reference():
    """The bundled 118-bus configuration, built once."""
    return prepare(RunConfig())


@pytest.fixture(autouse=True)
def _quiet_islanding_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="redispatch.cbco")


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance" in report.nodeid and name in ACCEPTANCE:
        if report.when == "call" or report.outcome != "passed":
            _outcomes.setdefault(name, report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, title in ACCEPTANCE.items():
        if name in _outcomes:
            verdict = "PASS" if _outcomes[name] == "passed" else "FAIL"
            terminalreporter.write_line(f"criterion {title}: {verdict}")
