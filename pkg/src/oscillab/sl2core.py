"""Exact 2x2 real matrix algebra for SL(2,R) and sl(2,R).

Matrices are plain ``numpy`` arrays of shape (2, 2).  A traceless matrix

    L = [[a11, a02], [-a20, -a11]]

stands for the quadratic Hamiltonian ``(a20 X^2 + a11 (XD + DX) + a02 D^2) / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import DegenerateA02, NotElliptic, ZeroDilation

Mat2 = np.ndarray

I2 = np.eye(2)
J = np.array([[0.0, 1.0], [-1.0, 0.0]])

PARABOLIC_TOL = 1e-14


def mat(a11: float, a12: float, a21: float, a22: float) -> Mat2:
    return np.array([[a11, a12], [a21, a22]], dtype=float)


def traceless(a20: float, a11: float, a02: float) -> Mat2:
    """Matrix of the Hamiltonian (a20 X^2 + a11 (XD+DX) + a02 D^2) / 2."""
    return mat(a11, a02, -a20, -a11)


def quadratic_coefficients(L: Mat2) -> tuple[float, float, float]:
    """Inverse of :func:`traceless`: returns (a20, a11, a02)."""
    return -float(L[1, 0]), float(L[0, 0]), float(L[0, 1])


def mat_norm(A: Mat2) -> float:
    """Entrywise absolute sum."""
    return float(np.abs(A).sum())


def det(A: Mat2) -> float:
    return float(A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0])


def inv_sl2(A: Mat2) -> Mat2:
    """Inverse of a unit-determinant matrix via the adjugate."""
    return mat(A[1, 1], -A[0, 1], -A[1, 0], A[0, 0])


def rotation(theta: float) -> Mat2:
    c, s = math.cos(theta), math.sin(theta)
    return mat(c, s, -s, c)


def shear(kappa: float) -> Mat2:
    return mat(1.0, 0.0, kappa, 1.0)


def dilation(lam: float) -> Mat2:
    if lam == 0:
        raise ZeroDilation("dilation parameter is zero")
    return mat(lam, 0.0, 0.0, 1.0 / lam)


def primitive(kind: Literal["rotation", "shear", "dilation"], param: float) -> Mat2:
    if kind == "rotation":
        return rotation(param)
    if kind == "shear":
        return shear(param)
    if kind == "dilation":
        return dilation(param)
    raise ValueError(f"unknown primitive kind {kind!r}")


def expm(L: Mat2, t: float) -> Mat2:
    """Closed-form exponential exp(tL) for traceless L.

    The branch follows the sign of det(L): rotation-like, shear-like
    (|det| < 1e-14) or hyperbolic.
    """
    d = det(L)
    if abs(d) < PARABOLIC_TOL:
        return I2 + t * L
    if d > 0:
        rho = math.sqrt(d)
        return math.cos(rho * t) * I2 + (math.sin(rho * t) / rho) * L
    rho = math.sqrt(-d)
    return math.cosh(rho * t) * I2 + (math.sinh(rho * t) / rho) * L


@dataclass(frozen=True)
class EllipticData:
    """``orientation * C (rho J) C^{-1} == L`` with ``rho = sqrt(det L)``.

    ``orientation`` is -1 when the upper-right entry of L is negative; in that
    case C normalizes -L and callers run time backwards.
    """

    rho: float
    normalizer: Mat2
    orientation: int = 1

    def reconstruct(self) -> Mat2:
        C = self.normalizer
        return self.orientation * C @ (self.rho * J) @ inv_sl2(C)


def normalize_elliptic(L: Mat2) -> EllipticData:
    d = det(L)
    if not d > 0:
        raise NotElliptic(f"det(L) = {d!r} is not positive", det=d)
    a11, a02 = float(L[0, 0]), float(L[0, 1])
    if a02 == 0:
        raise DegenerateA02("a02 = 0")
    orientation = 1
    if a02 < 0:
        orientation = -1
        a11, a02 = -a11, -a02
    rho = math.sqrt(d)
    scale = 1.0 / math.sqrt(a02 * rho)
    C = scale * mat(a02, 0.0, -a11, rho)
    return EllipticData(rho=rho, normalizer=C, orientation=orientation)


@dataclass(frozen=True)
class Factor:
    """One primitive: shear(kappa), dilation(lambda) or rotation(+-pi/2)."""

    kind: Literal["shear", "dilation", "rotation"]
    param: float

    def matrix(self) -> Mat2:
        if self.kind == "rotation":
            # exact quarter turns, no cos(pi/2) roundoff
            return J.copy() if self.param > 0 else -J
        return primitive(self.kind, self.param)


FactorChain = tuple  # tuple[Factor, ...]

QUARTER = math.pi / 2


def _simplify(factors: Iterable[Factor]) -> FactorChain:
    out: list[Factor] = []
    for f in factors:
        if f.kind == "shear" and f.param == 0.0:
            continue
        if f.kind == "dilation" and f.param == 1.0:
            continue
        if (
            out
            and f.kind == "rotation"
            and out[-1].kind == "rotation"
            and f.param == -out[-1].param
        ):
            out.pop()
            continue
        out.append(f)
    return tuple(out)


def decompose(A: Mat2) -> FactorChain:
    """Factor a unit-determinant matrix into at most five primitives.

    With A = [[a, b], [c, d]]:
      |a| >= |b|:  shear(c/a) dilation(a) J shear(-b/a) (-J)
      otherwise:   shear(d/b) dilation(b) J shear(a/b)
    """
    a, b, c, d = (float(v) for v in A.ravel())
    if abs(a) >= abs(b):
        raw = [
            Factor("shear", c / a),
            Factor("dilation", a),
            Factor("rotation", QUARTER),
            Factor("shear", -b / a),
            Factor("rotation", -QUARTER),
        ]
    else:
        raw = [
            Factor("shear", d / b),
            Factor("dilation", b),
            Factor("rotation", QUARTER),
            Factor("shear", a / b),
        ]
    return _simplify(raw)


SHEAR_PATH_LIMIT = 1.0
SHEAR_PATH_MIN_B = 1e-3  # the rebuilt c = (ad - 1)/b carries an error of order eps/|b|


def decompose_shears(A: Mat2, limit: float = SHEAR_PATH_LIMIT) -> FactorChain | None:
    """Dilation-free factorization shear(k1) J shear(-b) (-J) shear(k2).

    With A = [[a, b], [c, d]] and b != 0, k1 = (d - 1)/b and k2 = (a - 1)/b.
    Returns None when |b| < SHEAR_PATH_MIN_B or a shear parameter exceeds ``limit``.
    Suited to matrices near the identity.
    """
    a, b, _, d = (float(v) for v in A.ravel())
    if abs(b) < SHEAR_PATH_MIN_B or abs(b) > limit:
        return None
    k1, k2 = (d - 1.0) / b, (a - 1.0) / b
    if abs(k1) > limit or abs(k2) > limit:
        return None
    raw = [
        Factor("shear", k1),
        Factor("rotation", QUARTER),
        Factor("shear", -b),
        Factor("rotation", -QUARTER),
        Factor("shear", k2),
    ]
    return _simplify(raw)


def chain_product(chain: Sequence[Factor]) -> Mat2:
    out = I2.copy()
    for f in chain:
        out = out @ f.matrix()
    return out


def random_sl2(rng: np.random.Generator, max_stretch: float = 3.0) -> Mat2:
    """Random R(a) diag(s, 1/s) R(b) with 1 <= s <= max_stretch."""
    s = rng.uniform(1.0, max_stretch)
    alpha, beta = rng.uniform(0.0, 2 * math.pi, size=2)
    return rotation(alpha) @ dilation(s) @ rotation(beta)
