import numpy as np
import pytest

from clicklab.core import LoggingPolicy, RelevanceTable


@pytest.fixture
def rel_abc():
    return RelevanceTable.from_nested({"q": {"A": 0.9, "B": 0.4, "C": 0.1}})


@pytest.fixture
def policy_abc():
    return LoggingPolicy({"q": [(("A", "B", "C"), 0.5), (("C", "A", "B"), 0.3), (("B", "C", "A"), 0.2)]})


@pytest.fixture
def gen():
    return np.random.default_rng(20240611)


_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or report.when == "teardown":
        return
    number, title = mark.args
    failed = report.failed or report.skipped
    if report.when == "call" or failed:
        _ACCEPTANCE[number] = (title, not failed and report.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
