import numpy as np
import pytest

from sanet import ModelConfig, build, init_weights, set_single_thread


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # accuracy and determinism tests all run pinned to one BLAS thread
    set_single_thread(True)
    yield
    set_single_thread(False)


@pytest.fixture(scope="session")
def cfg_s():
    return ModelConfig("s")


@pytest.fixture(scope="session")
def cfg_m():
    return ModelConfig("m")


@pytest.fixture(scope="session")
def weights_s(cfg_s):
    return init_weights(cfg_s, 0)


@pytest.fixture(scope="session")
def model_s(cfg_s, weights_s):
    return build(cfg_s, weights_s)


@pytest.fixture(scope="session")
def model_m(cfg_m):
    return build(cfg_m, None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = []


@pytest.fixture
def verdict(request):
    """Print a PASS/FAIL line for an acceptance criterion, then assert it."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def check(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
        _VERDICTS.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
