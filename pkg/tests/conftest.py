"""Acceptance tests carry ``@pytest.mark.criterion(n)``; one PASS/FAIL line per
criterion is printed at the end of the session."""

_RESULTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    details = [v for k, v in item.user_properties if k == "detail"]
    _RESULTS.setdefault(marker.args[0], []).append((call.excinfo is None, item.name, details))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        runs = _RESULTS[n]
        ok = all(r[0] for r in runs)
        notes = "; ".join(d for _, _, ds in runs for d in ds)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {notes}".rstrip())
