import pytest

# outcome per acceptance criterion, filled in as the tests report
CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


def pytest_collection_finish(session):
    for item in session.items:
        m = item.get_closest_marker("criterion")
        if m:
            n, title = m.args
            CRITERIA.setdefault(n, {"title": title, "outcomes": [], "details": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    entry = CRITERIA[m.args[0]]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["outcomes"].append(rep.outcome)
        entry["details"] += [str(v) for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        e = CRITERIA[n]
        if not e["outcomes"]:
            status = "NOT RUN"
        elif all(o == "passed" for o in e["outcomes"]):
            status = "PASS"
        else:
            status = "FAIL"
        line = f"criterion {n:>2}: {status:<7} {e['title']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        tr.write_line(line)
