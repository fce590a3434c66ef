import time

import pytest

ACCEPTANCE = pytest.StashKey[dict]()
SESSION_START = pytest.StashKey[float]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}
    config.stash[SESSION_START] = time.perf_counter()


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so the whole-suite runtime check sees every other test
    items.sort(key=lambda item: item.path.name == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[ACCEPTANCE]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
