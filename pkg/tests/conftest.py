import numpy as np
import pytest

from headpose.facemodel import synthetic_model

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def model():
    return synthetic_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[key] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0])):
        outcome, detail = _ACCEPTANCE[key]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{status}] criterion {key}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
