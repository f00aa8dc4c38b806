"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import pytest

_lines: dict[int, str] = {}


@pytest.fixture
def detail(request):
    """Attach a measured-value summary to the criterion line of the running test."""

    def record(text: str) -> None:
        request.node.user_properties.append(("detail", text))
        print(text)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n = marker.args[0]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        notes = [v for k, v in item.user_properties if k == "detail"]
        if rep.skipped and isinstance(rep.longrepr, tuple):
            notes.append(rep.longrepr[2].removeprefix("Skipped: "))
        _lines[n] = f"criterion {n}: {status}" + (f" | {' | '.join(notes)}" if notes else "")


def pytest_terminal_summary(terminalreporter):
    if not _lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_lines):
        terminalreporter.write_line(_lines[n])
