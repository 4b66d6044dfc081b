"""Per-criterion reporting for the acceptance suite.

Each class in test_acceptance.py is one acceptance criterion; after the run
one PASS/FAIL line is printed per criterion, aggregated over its tests.
"""

from __future__ import annotations

import pytest

_results: dict[str, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    if item.module.__name__.rsplit(".", 1)[-1] != "test_acceptance":
        return
    cls = item.cls
    if cls is None:
        return
    _results.setdefault(cls.__name__, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(_results):
        flags = _results[name]
        verdict = "PASS" if all(flags) else "FAIL"
        label = _CRITERION_LABELS.get(name, name)
        terminalreporter.write_line(f"{label}: {verdict} ({sum(flags)}/{len(flags)} checks)")


_CRITERION_LABELS = {
    "TestGateBehavior": "gate behavior suite",
    "TestReentryAndBudgetSuite": "re-entry and budget suite",
    "TestMajorityLogic": "majority logic",
    "TestWorkflowDeterminism": "workflow determinism",
    "TestEndToEndReplay": "end-to-end replay",
    "TestEvaluatorSoundness": "evaluator soundness",
    "TestBudgetIdentity": "budget identity",
    "TestMetricArithmetic": "metric arithmetic",
}
