import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    rec = _CRITERIA.setdefault(n, {"title": title, "passed": True, "ran": False, "detail": []})
    if call.when == "call" or call.excinfo is not None:
        rec["ran"] = True
        if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
            rec["passed"] = False
    for key, value in item.user_properties:
        if key == "detail" and value not in rec["detail"]:
            rec["detail"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        rec = _CRITERIA[n]
        status = "PASS" if rec["passed"] and rec["ran"] else "FAIL"
        detail = "; ".join(rec["detail"])
        line = f"criterion {n:2d} [{status}] {rec['title']}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)


@pytest.fixture
def detail(request):
    """Attach a measured value to the acceptance summary line."""
    def add(text: str) -> None:
        request.node.user_properties.append(("detail", text))
    return add


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
