import pytest
from hypothesis import HealthCheck, settings
from scipy import stats

from nhsub import bernstein as B

settings.register_profile(
    "nhsub", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("nhsub")

SIN_INDEX = B.TimeVaryingIndex.sinusoidal(0.6, 0.2)


@pytest.fixture
def ms_half():
    return B.multistable(0.5)


@pytest.fixture
def ms_sin():
    return B.multistable(SIN_INDEX)


def builtin_families():
    return [
        B.multistable(0.5),
        B.multistable(SIN_INDEX),
        B.gamma_like(1.0),
        B.gamma_like(B.TimeVaryingIndex.sinusoidal(2.0, 0.5)),
        B.tempered_stable(0.5, 1.0),
        B.tempered_stable(SIN_INDEX, B.TimeVaryingIndex("affine-clamped", (1.0, 0.5, 0.5, 3.0))),
        B.drift_only(1.0),
    ]


def ks_distance(a, b):
    return float(stats.ks_2samp(a, b).statistic)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
