import numpy as np
import pytest

from deeptx import autodiff as ad


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion in the terminal summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    n = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    ok, details = _CRITERIA.get(n, (True, []))
    if detail and report.when == "call":
        details.append(detail)
    _CRITERIA[n] = (ok and report.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, details = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {' | '.join(details)}")
