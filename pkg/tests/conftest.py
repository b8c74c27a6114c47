import numpy as np
import pytest

from helpers import make_params


@pytest.fixture
def params():
  return make_params()


@pytest.fixture
def rng():
  return np.random.default_rng(1234)


_acceptance = {}


def pytest_runtest_logreport(report):
  if "test_acceptance.py" in report.nodeid and report.when == "call":
    _acceptance[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
  if not _acceptance:
    return
  terminalreporter.section("acceptance criteria")
  for name, outcome in sorted(_acceptance.items(),
                              key=lambda kv: int(kv[0].split("_")[1])):
    status = "PASS" if outcome == "passed" else "FAIL"
    terminalreporter.write_line(f"{status}  {name}")
