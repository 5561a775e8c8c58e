import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ngflow.network import Architecture, init_params

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_params(rng, input_dim=1, widths=(3, 3), scale=1.0):
    p = init_params(Architecture(input_dim, tuple(widths)), rng)
    theta = p.flatten() * scale
    return p.with_flat(theta)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
