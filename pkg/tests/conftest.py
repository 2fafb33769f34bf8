import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ufinger.perf import tune_allocator  # noqa: E402

tune_allocator()

# (criterion, passed, detail) for every test marked with @pytest.mark.criterion
_CRITERIA: list = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    detail = getattr(item, "criterion_detail", "")
    if report.failed:
        msg = str(call.excinfo.value).splitlines()
        detail = msg[0] if msg else call.excinfo.typename
    _CRITERIA.append((marker.args[0], report.passed, detail))


@pytest.fixture
def record(request):
    """Attach a one-line summary to the current criterion."""

    def _record(text: str) -> None:
        request.node.criterion_detail = text

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}" + (f": {detail}" if detail else ""))
