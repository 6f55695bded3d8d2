import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """One visible pass/fail line per acceptance criterion."""
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and item.module.__name__ == "test_acceptance":
        reporter = item.config.pluginmanager.get_plugin("terminalreporter")
        if reporter is not None:
            status = "PASS" if rep.passed else "FAIL"
            reporter.write_line(f"[acceptance] {item.name}: {status}")
