import numpy as np
import pytest

from vctrial.models import ModelKind
from vctrial.population import ParticipantRecord, mean_parameters, solve_screening_state


def make_record(kind, params=None, pid=0):
    kind = ModelKind.parse(kind)
    params = params or mean_parameters(kind)
    _, u_ss = solve_screening_state(kind, params)
    return ParticipantRecord(pid, "Test", "Person", None, "Nowhere", "F", 170.0, params.BW,
                             kind, params, u_ss)


@pytest.fixture
def hovorka_record():
    return make_record(ModelKind.HOVORKA)


@pytest.fixture
def uvp_record():
    return make_record(ModelKind.UVA_PADOVA)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance reporting: one pass/fail line per numbered criterion ----------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    status = _CRITERIA.get(number, (title, "PASS"))[1]
    if report.failed:
        status = "FAIL"
    elif report.skipped and status != "FAIL":
        status = "SKIP"
    _CRITERIA[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status:4s} {title}")
