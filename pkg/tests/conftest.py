import numpy as np
import pytest

from nlwave.model_library import DampingLaw, Model, Nonlinearity
from nlwave.spectral_core import build_domain


@pytest.fixture
def dom1():
    return build_domain(1, 16)


@pytest.fixture
def dom2():
    return build_domain(2, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def quintic(dom1):
    return Model(dom1, DampingLaw.shifted_power(0.1, 2), Nonlinearity.odd_power(5))


@pytest.fixture
def bistable32():
    dom = build_domain(1, 32)
    return Model(dom, DampingLaw.hyperbolic(1, 2), Nonlinearity.bistable(5, 2.0))


def smooth_field(dom, rng, decay=2.0, scale=1.0):
    return scale * rng.standard_normal(dom.shape) * dom.eigenvalues ** (-decay)


# one (number, title, passed, detail) tuple per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d} {title}: {detail}")
