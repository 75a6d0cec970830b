import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from oscillab import sl2core
from oscillab.errors import DegenerateA02, NotElliptic, ZeroDilation

angles = st.floats(0, 2 * math.pi)
stretch = st.floats(1.0, 3.0)
small = st.floats(-2.0, 2.0)


@st.composite
def sl2(draw):
    return sl2core.rotation(draw(angles)) @ sl2core.dilation(draw(stretch)) @ sl2core.rotation(draw(angles))


@st.composite
def algebra(draw):
    """Traceless L with ||L|| <= 10."""
    a20, a11, a02 = draw(small), draw(small), draw(small)
    return sl2core.traceless(a20, a11, a02)


def rk4(L, t, n=4000):
    h = t / n
    Y = np.eye(2)
    for _ in range(n):
        k1 = L @ Y
        k2 = L @ (Y + h / 2 * k1)
        k3 = L @ (Y + h / 2 * k2)
        k4 = L @ (Y + h * k3)
        Y = Y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return Y


@pytest.mark.parametrize(
    "A, expected",
    [(sl2core.I2, 2.0), (sl2core.J, 2.0), (np.array([[1.0, 2.0], [3.0, 4.0]]), 10.0)],
)
def test_mat_norm(A, expected):
    assert sl2core.mat_norm(A) == expected


def test_expm_quarter_turn_is_J():
    assert np.allclose(sl2core.expm(sl2core.J, math.pi / 2), sl2core.J, atol=1e-15)


def test_expm_zero_time():
    L = sl2core.traceless(0.3, -1.2, 0.7)
    assert np.array_equal(sl2core.expm(L, 0.0), np.eye(2))


def test_expm_diagonal():
    out = sl2core.expm(np.diag([1.0, -1.0]), 1.0)
    assert np.allclose(out, np.diag([math.e, 1 / math.e]), rtol=1e-15)


def test_expm_parabolic_branch():
    N = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert np.array_equal(sl2core.expm(N, 3.0), np.array([[1.0, 3.0], [0.0, 1.0]]))


def test_normalize_J():
    e = sl2core.normalize_elliptic(sl2core.J)
    assert e.rho == pytest.approx(1.0)
    assert np.allclose(e.normalizer, np.eye(2))


def test_normalize_stretched():
    L = np.array([[0.0, 4.0], [-1.0, 0.0]])
    e = sl2core.normalize_elliptic(L)
    assert e.rho == pytest.approx(2.0)
    assert np.allclose(e.normalizer, np.diag([math.sqrt(2), 1 / math.sqrt(2)]), atol=1e-15)
    C = e.normalizer
    assert np.abs(C @ (e.rho * sl2core.J) @ np.linalg.inv(C) - L).max() <= 1e-10 * sl2core.mat_norm(L)


def test_normalize_negative_orientation():
    L = np.array([[0.0, -4.0], [1.0, 0.0]])
    e = sl2core.normalize_elliptic(L)
    assert e.orientation == -1
    assert np.allclose(e.reconstruct(), L)
    assert np.allclose(e.normalizer @ (e.rho * sl2core.J) @ sl2core.inv_sl2(e.normalizer), -L)


def test_normalize_errors():
    with pytest.raises(NotElliptic):
        sl2core.normalize_elliptic(np.diag([1.0, -1.0]))
    # a traceless matrix with a02 = 0 has det <= 0, so the guard is reached
    # only through a matrix with positive det and zero upper-right entry
    with pytest.raises(DegenerateA02):
        sl2core.normalize_elliptic(np.array([[1.0, 0.0], [-1.0, 1.0]]))


def test_decompose_identity_is_empty():
    assert sl2core.decompose(np.eye(2)) == ()


def test_decompose_shear():
    chain = sl2core.decompose(sl2core.shear(0.7))
    assert chain == (sl2core.Factor("shear", 0.7),)


def test_decompose_five_factor_chain():
    A = np.array([[2.0, 1.0], [1.0, 1.0]])
    chain = sl2core.decompose(A)
    assert [f.kind for f in chain] == ["shear", "dilation", "rotation", "shear", "rotation"]
    assert [f.param for f in chain if f.kind != "rotation"] == [0.5, 2.0, -0.5]
    assert np.abs(sl2core.chain_product(chain) - A).max() <= 1e-12


def test_decompose_b_branch():
    A = np.array([[0.5, 2.0], [-0.25, 1.0]])
    chain = sl2core.decompose(A)
    assert len(chain) <= 6
    assert np.abs(sl2core.chain_product(chain) - A).max() <= 1e-12


@pytest.mark.parametrize(
    "kind, param, expected",
    [
        ("rotation", 0.0, np.eye(2)),
        ("rotation", math.pi / 2, sl2core.J),
        ("dilation", 2.0, np.diag([2.0, 0.5])),
        ("shear", 1.5, np.array([[1.0, 0.0], [1.5, 1.0]])),
    ],
)
def test_primitive(kind, param, expected):
    assert np.allclose(sl2core.primitive(kind, param), expected, atol=1e-16)


def test_zero_dilation():
    with pytest.raises(ZeroDilation):
        sl2core.primitive("dilation", 0.0)


@given(sl2(), sl2())
def test_det_multiplicative(A, B):
    assert abs(sl2core.det(A @ B) - 1) <= 1e-10


@given(algebra(), st.floats(-10, 10), st.floats(-10, 10))
def test_expm_group_property(L, s, t):
    lhs = sl2core.expm(L, s + t)
    Es, Et = sl2core.expm(L, s), sl2core.expm(L, t)
    rhs = Es @ Et
    # roundoff in the product scales with |E(s)| |E(t)|, not with |E(s+t)|
    scale = max(1.0, np.abs(Es).max() * np.abs(Et).max())
    assert np.abs(lhs - rhs).max() <= 1e-10 * scale


@given(algebra(), st.floats(-10, 10))
def test_expm_unit_det(L, t):
    E = sl2core.expm(L, t)
    assert abs(sl2core.det(E) - 1) <= 1e-12 * max(1.0, np.abs(E).max() ** 2)


@given(algebra(), st.floats(-3, 3))
def test_expm_matches_rk4(L, t):
    ref = rk4(L, t)
    assert np.abs(sl2core.expm(L, t) - ref).max() <= 1e-8 * max(1.0, np.abs(ref).max())


def test_expm_matches_scipy_ivp():
    L = sl2core.traceless(1.3, 0.4, 0.9)
    sol = solve_ivp(lambda _, y: (L @ y.reshape(2, 2)).ravel(), (0, 2.5), np.eye(2).ravel(), rtol=1e-12, atol=1e-12)
    assert np.allclose(sol.y[:, -1].reshape(2, 2), sl2core.expm(L, 2.5), atol=1e-9)


@given(sl2())
def test_decompose_round_trip(A):
    chain = sl2core.decompose(A)
    assert len(chain) <= 6
    assert np.abs(sl2core.chain_product(chain) - A).max() <= 1e-12 * max(1.0, np.abs(A).max() ** 2)


@given(sl2())
def test_shear_path_round_trip(A):
    chain = sl2core.decompose_shears(A, limit=10.0)
    if chain is not None:
        assert np.abs(sl2core.chain_product(chain) - A).max() <= 1e-11
