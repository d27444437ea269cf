import numpy as np
import pytest

from swimcal import params as P
from swimcal.objective import synthetic_reference
from swimcal.swimsim import SimConfig

# short schedule for unit tests; acceptance tests use the default one
SHORT = SimConfig(duration=1.5, warmup=0.5)
SHORT_FREQS = (1.0, 1.75)

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    n, title = mark.args
    ok = call.excinfo is None
    prev = _criteria.get(n, (title, True))
    if call.when == "call" or not ok:
        _criteria[n] = (title, prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture(scope="session")
def bounds():
    return P.swimmer_bounds()


@pytest.fixture(scope="session")
def short_cfg():
    return SHORT


@pytest.fixture(scope="session")
def theta_mid(bounds):
    return bounds.midpoint.copy()


@pytest.fixture(scope="session")
def short_ref(theta_mid):
    theta_star = theta_mid.copy()
    theta_star[:5] = [3.0, 1.5, 2.0, 1.0, 0.5]
    return synthetic_reference(theta_star, SHORT, SHORT_FREQS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
