import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oscillab import metaengine as me
from oscillab import sl2core
from oscillab.errors import GridError, NormCapExceeded, TailEscape

N = 1024


def hamiltonian(L, psi):
    """(a20 X^2 + a11 (XD + DX) + a02 D^2) / 2 on the grid, D = -i d/dx spectrally."""
    a20, a11, a02 = sl2core.quadratic_coefficients(L)
    x = psi.x
    xi = 2 * math.pi * np.fft.fftfreq(psi.N, d=psi.dx)

    def D(u):
        return np.fft.ifft(xi * np.fft.fft(u))

    u = psi.samples
    out = 0.5 * (a20 * x * x * u + a11 * (x * D(u) + D(x * u)) + a02 * D(D(u)))
    return psi.with_samples(out, check=False)


def corpus(n=N):
    return [
        me.hermite(0, n),
        me.hermite(3, n),
        me.gaussian(0.6 + 0.3j, n),
        me.hermite_combination([0.5, 0.2j, 0, -0.4, 0.1], n),
    ]


def test_grid_self_dual():
    g = me.Grid(4096)
    assert g.dx**2 == pytest.approx(2 * math.pi / 4096)
    assert g.L == pytest.approx(math.sqrt(2 * math.pi * 4096) / 2)
    with pytest.raises(GridError):
        me.GridState(np.zeros(N), L=3.0)


def test_tail_containment_on_construction():
    x = me.Grid(N).x
    with pytest.raises(TailEscape):
        me.GridState(np.exp(-((x / 30) ** 2)))


def test_chirp_identity_and_norm():
    h0 = me.hermite(0, N)
    assert me.apply_chirp(0.0, h0) is h0
    assert me.apply_chirp(1.0, h0).norm() == pytest.approx(h0.norm(), abs=1e-12)


def test_chirp_h1_norm():
    from oscillab import sobolev

    out = me.apply_chirp(0.2, me.hermite(0, N))
    # quadrature of <x^2> + <|u'|^2> for the chirped Gaussian
    assert sobolev.hs_norm_grid(out, 1) == pytest.approx(1.0099504938362078, abs=1e-8)


@pytest.mark.parametrize("path", ["fast", "reference"])
def test_dilation(path):
    h0 = me.hermite(0, N)
    assert me.apply_dilation(1.0, h0, path) is h0
    out = me.apply_dilation(2.0, h0, path)
    assert out.norm() == pytest.approx(1.0, abs=1e-8)
    second = float(np.sum(out.x**2 * np.abs(out.samples) ** 2) * out.dx)
    assert second == pytest.approx(2.0, abs=1e-8)


def test_dilation_negative_is_parity():
    psi = me.hermite_combination([0.6, 0.8], N)
    a = me.apply_dilation(-1.5, psi)
    b = me.apply_parity(me.apply_dilation(1.5, psi)).scaled(-1j)
    assert np.allclose(a.samples, b.samples)


def test_dilation_tail_escape():
    with pytest.raises(TailEscape):
        me.apply_dilation(30.0, me.hermite(2, N))


def test_fourier_examples(rng):
    h0 = me.hermite(0, N)
    assert np.abs(me.apply_fourier(h0).samples - h0.samples).max() * math.sqrt(h0.dx) <= 1e-10
    h1 = me.hermite(1, N)
    coeff = h1.inner(me.apply_fourier(h1))
    assert abs(abs(coeff) - 1) <= 1e-10
    # kernel exp(-i x xi): F h_n = (-i)^n h_n
    assert coeff == pytest.approx(-1j, abs=1e-10)
    psi = me.GridState(rng.normal(size=N) + 1j * rng.normal(size=N), check=False)
    assert me.apply_fourier(psi).norm() == pytest.approx(psi.norm(), rel=1e-12)
    back = me.apply_fourier(me.apply_fourier(psi), -1)
    assert np.abs(back.samples - psi.samples).max() <= 1e-12 * np.abs(psi.samples).max()


def test_meta_identity():
    for psi in corpus():
        d, _ = me.phase_aligned_distance(me.apply_meta(np.eye(2), psi), psi)
        assert d <= 1e-12


def test_meta_quarter_turns():
    psi = me.hermite_combination([0.3, 0.5j, -0.2, 0.1 + 0.4j], N)
    # with the eigenphase convention M(exp(tJ)) h_n = exp(-it(n + 1/2)) h_n,
    # the quarter turn is exp(-i pi/4) F, and its inverse is i^{1/2} F^{-1}
    d, _ = me.sign_aligned_distance(me.apply_meta(sl2core.J, psi), me.apply_fourier(psi).scaled(np.exp(-0.25j * math.pi)))
    assert d <= 1e-12
    d, _ = me.sign_aligned_distance(me.apply_meta(-sl2core.J, psi), me.apply_fourier(psi, -1).scaled(np.exp(0.25j * math.pi)))
    assert d <= 1e-12


def test_fast_matches_reference(rng):
    for _ in range(5):
        A = sl2core.random_sl2(rng, 2.5)
        for psi in corpus():
            f = me.apply_meta(A, psi, "fast")
            r = me.apply_meta(A, psi, "reference")
            d, _ = me.phase_aligned_distance(f, r)
            assert d <= 1e-8 * psi.norm()


def test_norm_cap():
    with pytest.raises(NormCapExceeded):
        me.apply_meta(sl2core.dilation(100.0), me.hermite(0, N))


@pytest.mark.parametrize("n", [0, 1, 4, 9, 20])
def test_propagate_J_eigenphase(n):
    h = me.hermite(n, N)
    for t in (0.3, 1.7, 4.0):
        out = me.propagate_const(sl2core.J, t, h)
        d, _ = me.sign_aligned_distance(out, h.scaled(np.exp(-1j * t * (n + 0.5))))
        assert d <= 1e-6


def test_propagate_zero_time():
    psi = me.hermite(2, N)
    assert me.propagate_const(sl2core.traceless(1, 0.2, 3), 0.0, psi) is psi


def test_propagate_full_revolution():
    psi = me.hermite_combination([1, 1], N).scaled(1 / math.sqrt(2))
    out = me.propagate_const(2 * sl2core.J, math.pi, psi)
    d, _ = me.sign_aligned_distance(out, psi.scaled(-1))
    assert d <= 1e-10


def test_propagator_solves_schrodinger():
    """i d/dt exp(-itH) psi = H exp(-itH) psi, by central differences."""
    L = sl2core.traceless(0.7, 0.2, 1.3)
    psi = me.gaussian(1.2, N)
    t, h = 0.9, 1e-4
    c = me.propagate_const(L, t, psi)
    a = me.propagate_const(L, t + h, psi)
    b = me.propagate_const(L, t - h, psi)
    a = a.scaled(me.sign_aligned_distance(a, c)[1])
    b = b.scaled(me.sign_aligned_distance(b, c)[1])
    lhs = 1j * (a.samples - b.samples) / (2 * h)
    rhs = hamiltonian(L, c).samples
    assert math.sqrt(c.dx) * np.linalg.norm(lhs - rhs) <= 1e-5


@st.composite
def pairs(draw):
    ang = st.floats(0, 2 * math.pi)
    s = st.floats(1.0, 2.0)
    A = sl2core.rotation(draw(ang)) @ sl2core.dilation(draw(s)) @ sl2core.rotation(draw(ang))
    B = sl2core.rotation(draw(ang)) @ sl2core.dilation(draw(s)) @ sl2core.rotation(draw(ang))
    return A, B


@given(pairs())
def test_unitarity_and_homomorphism(AB):
    A, B = AB
    psi = me.hermite_combination([0.6, 0, 0.8j], N)
    out = me.apply_meta(A @ B, psi)
    assert out.norm() == pytest.approx(psi.norm(), abs=1e-8)
    d, _ = me.sign_aligned_distance(out, me.apply_meta(A, me.apply_meta(B, psi)))
    assert d <= 1e-6 * psi.norm()


@given(pairs(), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_quadratic_conjugation(AB, a20, a11, a02):
    """M(Y)^{-1} H_L M(Y) = H_{Y^{-1} L Y}."""
    Y, _ = AB
    L = sl2core.traceless(a20, a11, a02)
    psi = me.hermite_combination([0.6, 0.3, 0.2j], N)
    phi = me.apply_meta(Y, psi)
    back = me.apply_meta(sl2core.inv_sl2(Y), hamiltonian(L, phi), check=False)
    sign = me.sign_aligned_distance(me.apply_meta(sl2core.inv_sl2(Y), phi), psi)[1]
    direct = hamiltonian(sl2core.inv_sl2(Y) @ L @ Y, psi)
    err = math.sqrt(psi.dx) * np.linalg.norm(sign * back.samples - direct.samples)
    assert err <= 1e-6


def test_time_derivative_identity():
    """M(Y)^{-1} i d/dt M(Y) = H_{Y^{-1} Y'} along a smooth path."""

    def Y(t):
        return sl2core.rotation(0.8 * t) @ sl2core.dilation(1 + 0.3 * t) @ sl2core.shear(0.5 * t)

    def dY(t, h=1e-6):
        return (Y(t + h) - Y(t - h)) / (2 * h)

    psi = me.hermite_combination([0.8, 0.6j], N)
    t, h = 0.7, 1e-4
    c = me.apply_meta(Y(t), psi)
    a = me.apply_meta(Y(t + h), psi)
    b = me.apply_meta(Y(t - h), psi)
    a = a.scaled(me.sign_aligned_distance(a, c)[1])
    b = b.scaled(me.sign_aligned_distance(b, c)[1])
    lhs = 1j * (a.samples - b.samples) / (2 * h)
    G = sl2core.inv_sl2(Y(t)) @ dY(t)
    rhs = me.apply_meta(Y(t), hamiltonian(G, psi), check=False).samples
    assert math.sqrt(c.dx) * np.linalg.norm(lhs - rhs) <= 1e-5


def test_state_serialization(tmp_path):
    psi = me.gaussian(0.8 + 0.2j, N)
    raw = psi.to_bytes()
    assert raw[:4] == b"OSCL" and len(raw) == 16 + 16 * N
    p = tmp_path / "s.bin"
    psi.save(p)
    back = me.GridState.load(p)
    assert np.array_equal(back.samples, psi.samples) and back.L == psi.L
    with pytest.raises(GridError):
        me.GridState.from_bytes(b"XXXX" + raw[4:])


def test_state_spec(tmp_path):
    assert np.allclose(me.state_from_spec("hermite:3", N).samples, me.hermite(3, N).samples)
    assert np.allclose(me.state_from_spec("gaussian:0.5", N).samples, me.gaussian(0.5, N).samples)
    p = tmp_path / "s.bin"
    me.hermite(1, N).save(p)
    assert np.allclose(me.state_from_spec(f"file:{p}", N).samples, me.hermite(1, N).samples)
