import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from naf import RopeConfig, init_encoder

settings.register_profile("naf", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("naf")

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    key = tuple(marker.args)
    _criteria.setdefault(key, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, text), results in sorted(_criteria.items()):
        status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_encoder():
    return init_encoder(1, 8, seed=3, dtype=np.float64)


def random_instance(rng, lr=(3, 3), s=2, d=2, C=8):
    """Random float64 upsampling problem: features, image, encoder, rope."""
    h, w = lr
    f_lr = rng.standard_normal((h, w, d))
    image = rng.uniform(0, 1, (h * s, w * s, 3))
    enc = init_encoder(1, C, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    for conv in enc.pixel_branch + enc.context_branch:
        conv.bias[...] = rng.uniform(-0.2, 0.2, conv.bias.shape)
    return f_lr, image, enc, RopeConfig(C, h * s, w * s)
