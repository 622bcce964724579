"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

from collections import OrderedDict

_results: "OrderedDict[str, list]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion the test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _results.setdefault(mark.args[0], [])


def pytest_runtest_logreport(report):
    if report.when != "call" and not report.failed:
        return
    name = _criterion_of(report)
    if name is not None:
        _results.setdefault(name, []).append((report.nodeid, report.outcome))


def _criterion_of(report):
    for key, value in report.user_properties:
        if key == "criterion":
            return value
    return None


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark:
        item.user_properties.append(("criterion", mark.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _results.items():
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for _, o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        detail = ", ".join(f"{nid.split('::')[-1]}={o}" for nid, o in outcomes if o != "passed")
        terminalreporter.write_line(f"{status:7s} {name}" + (f"  ({detail})" if detail else ""))
