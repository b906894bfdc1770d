import itertools

import numpy as np
import pytest
import scipy.signal
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nlwave.spectral_core import (
    ModalState,
    build_domain,
    embed,
    energy_norm,
    from_grid,
    hs_norm,
    inner,
    project,
    to_grid,
)

from conftest import smooth_field


def direct_synthesis(dom, f):
    """Point values by explicit summation of the sine series."""
    x = dom.nodes
    out = np.zeros(dom.grid_shape)
    for k in itertools.product(range(dom.modes_per_axis), repeat=dom.dim):
        term = f[k]
        for axis, ki in enumerate(k):
            shape = [1] * dom.dim
            shape[axis] = -1
            term = term * (np.sqrt(2 / np.pi) * np.sin((ki + 1) * x)).reshape(shape)
        out = out + term
    return out


def exact_power_projection_1d(c, power):
    """<u**power, e_k> for u = sum c_j e_j via exact trigonometric convolution."""
    N = len(c)
    # complex Fourier coefficients of u on frequencies -N..N
    a = np.zeros(2 * N + 1, dtype=complex)
    for j, cj in enumerate(c, start=1):
        amp = cj * np.sqrt(2 / np.pi) / 2j
        a[N + j] += amp
        a[N - j] -= amp
    p = a
    for _ in range(power - 1):
        p = np.convolve(p, a)
    mid = (len(p) - 1) // 2
    b = (2j * p[mid + 1:mid + 1 + N]).real  # sine coefficients of u**power
    return np.sqrt(2 / np.pi) * np.pi / 2 * b


def exact_power_projection_2d(c, power):
    N = c.shape[0]
    a = np.zeros((2 * N + 1, 2 * N + 1), dtype=complex)
    s = np.sqrt(2 / np.pi) / 2j
    for (j1, j2), cj in np.ndenumerate(c):
        for sg1, sg2 in itertools.product((1, -1), repeat=2):
            a[N + sg1 * (j1 + 1), N + sg2 * (j2 + 1)] += cj * s * s * sg1 * sg2
    p = a
    for _ in range(power - 1):
        p = scipy.signal.convolve(p, a, method="direct")
    mid = (p.shape[0] - 1) // 2
    blk = p[mid + 1:mid + 1 + N, mid + 1:mid + 1 + N]
    b = (2j * 2j * blk).real
    return (np.sqrt(2 / np.pi) * np.pi / 2) ** 2 * b


def test_eigenvalues_and_lambda1():
    d = build_domain(2, 4)
    assert d.eigenvalue(1, 1) == 2.0
    assert d.eigenvalue(2, 3) == 13.0
    assert d.lambda1 == 2.0
    assert d.grid_per_axis == 12
    assert build_domain(3, 2).lambda1 == 3.0


def test_padding_guard():
    with pytest.raises(ValueError, match="alias"):
        build_domain(1, 8, padding_factor=2)
    with pytest.warns(UserWarning):
        d = build_domain(1, 8, padding_factor=2, allow_aliasing=True)
    assert d.grid_per_axis == 16
    d = build_domain(1, 5, padding_factor=3.5)
    assert d.grid_per_axis == 18


@pytest.mark.parametrize("dim,N", [(1, 1), (1, 7), (2, 4), (3, 3)])
def test_to_grid_matches_direct_sum(dim, N, rng):
    d = build_domain(dim, N)
    f = rng.standard_normal(d.shape)
    np.testing.assert_allclose(to_grid(d, f), direct_synthesis(d, f), atol=1e-13)


@pytest.mark.parametrize("N", [4, 8, 16, 32, 100])  # dense matrix and DST code paths
def test_round_trip(N, rng):
    d = build_domain(1, N)
    f = rng.standard_normal(d.shape)
    np.testing.assert_allclose(from_grid(d, to_grid(d, f)), f, atol=1e-13)


def test_dst_path_agrees_with_dense(rng, monkeypatch):
    d = build_domain(2, 10)
    f = rng.standard_normal(d.shape)
    g = to_grid(d, f)
    h = from_grid(d, g ** 3)
    d2 = build_domain(2, 10)
    monkeypatch.setattr(type(d2), "_synthesis", property(lambda self: None))
    monkeypatch.setattr(type(d2), "_analysis", property(lambda self: None))
    np.testing.assert_allclose(to_grid(d2, f), g, atol=1e-13)
    np.testing.assert_allclose(from_grid(d2, g ** 3), h, atol=1e-12)


def test_single_mode_values():
    d = build_domain(1, 3)
    g = to_grid(d, d.mode(2))
    np.testing.assert_allclose(g, np.sqrt(2 / np.pi) * np.sin(2 * d.nodes), atol=1e-15)


@pytest.mark.parametrize("N", [1, 3, 6])
def test_quintic_projection_exact_1d(N, rng):
    d = build_domain(1, N)
    c = rng.standard_normal(N)
    got = from_grid(d, to_grid(d, c) ** 5)
    np.testing.assert_allclose(got, exact_power_projection_1d(c, 5), atol=1e-10)


def test_quintic_projection_exact_2d(rng):
    d = build_domain(2, 4)
    c = rng.standard_normal(d.shape)
    got = from_grid(d, to_grid(d, c) ** 5)
    np.testing.assert_allclose(got, exact_power_projection_2d(c, 5), atol=1e-10)


def test_aliasing_visible_without_padding(rng):
    with pytest.warns(UserWarning):
        d = build_domain(1, 6, padding_factor=1, allow_aliasing=True)
    c = rng.standard_normal(6)
    err = np.max(np.abs(from_grid(d, to_grid(d, c) ** 5) - exact_power_projection_1d(c, 5)))
    assert err > 1e-3


def test_norms():
    d = build_domain(1, 4)
    assert hs_norm(d, d.mode(2), 1) == pytest.approx(2.0)
    assert hs_norm(d, d.mode(2), -1) == pytest.approx(0.5)
    s = ModalState(d.mode(1), d.mode(3))
    assert energy_norm(d, s) == pytest.approx(np.sqrt(2.0))
    assert inner(d.mode(1), d.mode(1) + d.mode(2)) == 1.0


def test_project_and_embed():
    d = build_domain(2, 4)
    f = np.arange(16.0).reshape(4, 4)
    p = project(d, f, 2)
    assert np.count_nonzero(p) == 3
    assert p[1, 1] == 5.0
    with pytest.raises(ValueError):
        project(d, f, 5)
    e = embed(f, (6, 6))
    assert e.shape == (6, 6) and e[3, 3] == 15.0 and e[4:].sum() == 0
    np.testing.assert_array_equal(embed(e, (4, 4)), f)


def test_rejects_bad_input():
    d = build_domain(1, 4)
    with pytest.raises(ValueError):
        to_grid(d, np.zeros(5))
    with pytest.raises(ValueError, match="non-finite"):
        from_grid(d, np.full(d.grid_shape, np.nan))
    with pytest.raises(ValueError):
        build_domain(4, 2)
    with pytest.raises(ValueError):
        build_domain(1, 0)


@settings(max_examples=40, deadline=None)
@given(arrays(float, 8, elements=st.floats(-10, 10)), arrays(float, 8, elements=st.floats(-10, 10)))
def test_quadrature_reproduces_inner_product(f, g):
    # product of two band-limited fields is integrated exactly on the padded grid
    d = build_domain(1, 8)
    q = np.sum(to_grid(d, f) * to_grid(d, g)) * d.quad_weight
    assert q == pytest.approx(inner(f, g), abs=1e-10 * (1 + np.abs(f).sum() * np.abs(g).sum()))


@settings(max_examples=40, deadline=None)
@given(arrays(float, (3, 3), elements=st.floats(-5, 5)), st.floats(-2, 2), st.floats(-2, 2))
def test_hs_norm_monotone_in_s(f, s1, s2):
    d = build_domain(2, 3)
    lo, hi = sorted((s1, s2))
    assert hs_norm(d, f, lo) <= hs_norm(d, f, hi) * (1 + 1e-12) + 1e-300


def test_smooth_round_trip_3d(rng):
    d = build_domain(3, 5)
    f = smooth_field(d, rng)
    np.testing.assert_allclose(from_grid(d, to_grid(d, f)), f, atol=1e-14)
