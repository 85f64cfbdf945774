import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hwtrigger import experiments

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def mlp_setup():
    return experiments.train(experiments.make_config("mlp"))


@pytest.fixture(scope="session")
def cnn_setup():
    return experiments.train(experiments.make_config("cnn"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mlp_backdoors(mlp_setup):
    """A handful of successful single-target backdoors on the toy MLP."""
    found = []
    for run in range(40):
        res = experiments.attack_run(mlp_setup, run)
        if res.success:
            found.append(res)
        if len(found) == 6:
            break
    assert len(found) == 6
    return found


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the line is printed at once and in the run summary."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
