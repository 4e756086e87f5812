"""Collects one pass/fail line per acceptance criterion and prints them after the run."""
import pytest

_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion listed in the summary")


@pytest.fixture
def criterion(request):
    """Mutable dict; tests put a short measurement summary under ``detail``."""
    info = {"detail": ""}
    request.node.criterion_info = info
    return info


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        detail = getattr(item, "criterion_info", {}).get("detail", "")
        if rep.skipped and not detail:
            detail = str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else ""
        _LINES.append(f"{status:4s}  {mark.args[0]}" + (f"  [{detail}]" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
