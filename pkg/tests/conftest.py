import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nv2dnmr.spins import FieldConfig, NVSensor, Nucleus, SpinSystem

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TILT = np.array([np.sqrt(2.0 / 3.0), 0.0, np.sqrt(1.0 / 3.0)])


def make_system(*nuclei, nv_pos=(0.0, 0.0, -20.0), axis=TILT):
    return SpinSystem(tuple(Nucleus(s, np.asarray(p, float)) for s, p in nuclei), NVSensor(np.asarray(nv_pos), axis))


@pytest.fixture
def hp_system():
    return make_system(("1H", (0.0, 0.0, 0.0)), ("31P", (2.0, 0.0, 0.0)))


@pytest.fixture
def hp_field():
    return FieldConfig.decoupled(1000.0, 200.0, TILT)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
