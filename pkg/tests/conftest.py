import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _CRITERIA.items():
        terminalreporter.write_line(f"{status}  {name}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)
