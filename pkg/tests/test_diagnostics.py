import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlwave import diagnostics as dg
from nlwave.integrator import IntegratorConfig, integrate
from nlwave.model_library import DampingLaw, Model, Nonlinearity
from nlwave.spectral_core import ModalState, build_domain, hs_norm

from conftest import smooth_field


def fine_quadrature(f, n=1_000_000):
    """Midpoint rule on (0, pi); spectrally accurate for smooth periodic-like integrands."""
    x = (np.arange(n) + 0.5) * np.pi / n
    return float(np.sum(f(x)) * np.pi / n)


def e1_values(x):
    return math.sqrt(2 / math.pi) * np.sin(x)


@pytest.fixture
def static_model():
    """A forced quintic model for which u = e1 is an exact rest state."""
    d = build_domain(1, 8)
    m = Model(d, DampingLaw.hyperbolic(1, 2), Nonlinearity.odd_power(5))
    u = d.mode(1)
    return m.with_forcing(d.eigenvalues * u + m.source(u)), u


def test_energy_of_single_mode():
    d = build_domain(1, 8)
    m = Model(d, DampingLaw.hyperbolic(1, 2), Nonlinearity.odd_power(5))
    rep = dg.energy(ModalState(d.mode(1), d.zeros()), m)
    G = fine_quadrature(lambda x: e1_values(x) ** 6 / 6)
    assert rep.E_u == pytest.approx(1 + 2 * G, rel=1e-12)
    assert rep.E_u == pytest.approx(1 + 5 / (6 * math.pi ** 2), rel=1e-13)
    assert rep.Phi == rep.E_u
    assert rep.forcing_term == 0.0


def test_energy_forcing_term():
    d = build_domain(1, 4)
    m = Model(d, DampingLaw.hyperbolic(1, 2), Nonlinearity.odd_power(3), 2.0 * d.mode(2))
    s = ModalState(0.5 * d.mode(2), d.mode(1))
    rep = dg.energy(s, m)
    assert rep.forcing_term == pytest.approx(2.0)
    assert rep.e_norm_sq == pytest.approx(4 * 0.25 + 1)


def test_potential_matches_fine_quadrature(rng):
    # G(u) = u^6/6 is a band-limited polynomial, integrated exactly on the padded grid
    d = build_domain(1, 3)
    m = Model(d, DampingLaw.hyperbolic(1, 2), Nonlinearity.odd_power(5))
    c = rng.standard_normal(3)

    def u(x):
        return sum(cj * e1_values((j + 1) * x) for j, cj in enumerate(c))

    assert m.potential(c) == pytest.approx(fine_quadrature(lambda x: u(x) ** 6 / 6), rel=1e-12)


def test_lp_norms():
    d = build_domain(1, 8)
    l12 = ((2 / math.pi) ** 6 * math.pi * 924 / 4096) ** (1 / 12)
    assert dg.lp_norm(d, d.mode(1), 12) == pytest.approx(l12, rel=1e-13)
    assert dg.lp_norm(d, d.mode(3), 2) == pytest.approx(1.0, rel=1e-13)


def test_strichartz_window(static_model):
    m, u = static_model
    tr = integrate(ModalState(u, np.zeros_like(u)), m, IntegratorConfig(dt=0.01), 2.0, stride=10)
    assert np.max(np.abs(tr.u - u)) <= 1e-12
    l12 = dg.lp_norm(m.domain, u, 12)
    assert dg.strichartz_norm(tr, (0.0, 1.0)) == pytest.approx(l12, rel=1e-10)
    assert dg.strichartz_norm(tr, (0.0, 2.0)) == pytest.approx(2 ** 0.25 * l12, rel=1e-10)
    assert dg.strichartz_norm(tr, (0.35, 1.35)) == pytest.approx(l12, rel=1e-10)
    with pytest.raises(ValueError, match="window"):
        dg.strichartz_norm(tr, (0.0, 3.0))


def test_negative_and_e1_norms():
    d = build_domain(1, 4)
    s = ModalState(d.mode(1), d.mode(2))
    assert dg.negative_norm_velocity(d, s) == pytest.approx(0.5)
    assert dg.negative_norm_velocity(d, s, 0.5) == pytest.approx(2 ** -0.5)
    with pytest.raises(ValueError):
        dg.negative_norm_velocity(d, s, 1.5)
    assert dg.e1_norm(d, ModalState(d.mode(1), d.zeros())) == pytest.approx(1.0)
    assert dg.e1_norm(d, ModalState(d.mode(2), d.zeros())) == pytest.approx(4.0)
    assert dg.e1_norm(d, ModalState(d.zeros(), d.mode(2))) == pytest.approx(2.0)


def test_perturbed_energy_basic():
    d = build_domain(1, 8)
    m = Model(d, DampingLaw.hyperbolic(1, 2), Nonlinearity.odd_power(5))
    s = ModalState(d.mode(1), d.mode(1))
    E = dg.energy(s, m).E_u
    assert dg.perturbed_energy(s, m, 0.0).E_rho == E
    assert dg.perturbed_energy(s, m, 0.1).E_rho == pytest.approx(E + 0.1)
    with pytest.raises(ValueError, match="rho"):
        dg.perturbed_energy(s, m, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2 ** 31))
def test_perturbed_energy_close_to_energy(rho, seed):
    # |rho <v, u>| <= rho/(2 sqrt(lambda1)) ||(u, v)||_E^2
    d = build_domain(1, 6)
    m = Model(d, DampingLaw.hyperbolic(1, 2), Nonlinearity.odd_power(3))
    rng = np.random.default_rng(seed)
    s = ModalState(smooth_field(d, rng, 1.0), smooth_field(d, rng, 0.5))
    e_sq = hs_norm(d, s.u, 1) ** 2 + hs_norm(d, s.v, 0) ** 2
    gap = dg.perturbed_energy(s, m, rho).E_rho - dg.energy(s, m).E_u
    assert abs(gap) <= rho / 2 * e_sq * (1 + 1e-12) + 1e-15


def test_perturbed_energy_balance_law():
    d = build_domain(1, 16)
    m = Model(d, DampingLaw.hyperbolic(1, 2), Nonlinearity.odd_power(5), d.mode(1))
    rng = np.random.default_rng(0)
    s0 = ModalState(smooth_field(d, rng, 1.5), smooth_field(d, rng, 1.0))
    rho = 0.5
    defects = []
    for dt in (1e-3, 5e-4):
        tr = integrate(s0, m, IntegratorConfig(dt=dt), 0.5)
        i = len(tr) // 2
        E = [dg.perturbed_energy(tr.state(j), m, rho).E_rho for j in (i - 1, i + 1)]
        r = dg.perturbed_energy(tr.state(i), m, rho)
        dE = (E[1] - E[0]) / (2 * dt)
        defects.append(abs(dE + rho / 4 * r.E_rho + r.Q + r.G + r.I))
        assert abs(dE) > 1e-2  # the identity is not trivially satisfied
    assert defects[0] <= 1e-6
    assert defects[0] / defects[1] >= 3.5


def test_dissipation_integral_closed_form():
    # constant damping J = 1 on a single linear mode: u = e^{-t/2}(cos wt + sin wt / (2w))
    d = build_domain(1, 4)
    m = Model(d, DampingLaw.constant(1.0), Nonlinearity.odd_power(5))
    cfg = IntegratorConfig(scheme="semi_implicit_exponential", dt=1e-3, linear_test_mode=True, linear_gamma=1.0)
    tr = integrate(ModalState(d.mode(1), d.zeros()), m, cfg, 2.0)
    w = math.sqrt(0.75)

    def vel(t):
        return -np.exp(-t / 2) * np.sin(w * t) / w

    for p in (0.0, 1.0):
        ref = fine_quadrature(lambda x: np.abs(vel(x * 2 / math.pi)) ** (2 * p + 2), 200_000) * 2 / math.pi
        assert dg.dissipation_integral(tr, p)[-1] == pytest.approx(ref, rel=1e-6)
    with pytest.raises(ValueError):
        dg.dissipation_integral(tr, -1.0)


def test_lyapunov_constant_at_rest_state(static_model):
    m, u = static_model
    tr = integrate(ModalState(u, np.zeros_like(u)), m, IntegratorConfig(dt=0.01), 1.0, stride=10)
    lt = dg.lyapunov_trace(tr)
    assert np.ptp(lt.phi) <= 1e-13
    assert lt.monotone and lt.balanced


def test_lyapunov_decreases(quintic, rng):
    d = quintic.domain
    s0 = ModalState(smooth_field(d, rng, 1.5), smooth_field(d, rng, 1.0))
    tr = integrate(s0, quintic, IntegratorConfig(dt=2e-3), 2.0, stride=10)
    lt = dg.lyapunov_trace(tr)
    assert lt.monotone
    # the cumulative balance drifts with the number of intervals, so judge it on an absolute scale
    lt = dg.lyapunov_trace(tr, residual_scale=1e-6 * max(1.0, abs(lt.phi[0])))
    assert lt.monotone and lt.balanced
    assert lt.phi[-1] < lt.phi[0]
    strict = dg.lyapunov_trace(tr, tol_mono=0.0)
    assert strict.tol_mono == 0.0
    assert dg.lyapunov_trace(tr, residual_scale=1e-7).tol_mono == pytest.approx(1e-6)


def test_energy_table(quintic, rng):
    d = quintic.domain
    tr = integrate(ModalState(smooth_field(d, rng), d.zeros()), quintic, IntegratorConfig(dt=0.01), 0.5, stride=10)
    names, units, data = dg.energy_table(tr)
    assert len(names) == len(units) == data.shape[1]
    assert data.shape[0] == len(tr)
    np.testing.assert_array_equal(data[:, names.index("t")], tr.times)
    assert data[0, names.index("identity_residual")] == 0.0
    np.testing.assert_array_equal(data[:, names.index("E_u")], data[:, names.index("Phi")])
