import numpy as np
import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config.addinivalue_line("markers", "slow: long-running training test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker
    prev = _criteria.get(number, (title, True))
    _criteria[number] = (title, prev[1] and report.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report._criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria, key=_natural):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"AC{number:<3} {'PASS' if ok else 'FAIL'}  {title}")


def _natural(number):
    # "8a" sorts after "8" and before "9"
    text = str(number)
    digits = "".join(ch for ch in text if ch.isdigit())
    return int(digits or 0), text


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
