from pathlib import Path

import pytest

ARTIFACTS = Path(__file__).resolve().parents[1] / "artifacts"


@pytest.fixture(scope="session")
def helpers():
    """The frozen helper networks (trained once, then loaded from artifacts/)."""
    from gazefield.experiments import HelperConfig, build_helpers

    return build_helpers(HelperConfig(), ARTIFACTS)


# ------------------------------------------------------------ acceptance summary

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        _CRITERIA[number] = "FAIL" if failed else _CRITERIA.get(number, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number:2d}: {_CRITERIA[number]}")
