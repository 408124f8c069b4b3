import pytest

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, name = marker.args
    if rep.when == "call" or rep.failed:
        detail = dict(rep.user_properties).get("detail", "")
        _criteria[number] = (name, rep.passed and _criteria.get(number, (0, True))[1], detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        name, passed, detail = _criteria[number]
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
