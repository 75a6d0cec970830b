"""Quasi-periodic sl(2,R)-valued functions as finite Fourier series on T^d.

A coefficient is stored in the basis {J, S1, S2} with

    J  = [[0, 1], [-1, 0]],  S1 = diag(1, -1),  S2 = [[0, 1], [1, 0]],

so that conjugation by the rotation R_a = exp(aJ) fixes the J part and turns
the pair u = c1 + i c2, v = c1 - i c2 into exp(-2ia) u, exp(2ia) v.  Rotating
by an angle <m, theta> therefore moves Fourier modes by exact lattice shifts.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import sl2core
from .errors import StepTooLarge, WidthExceeded

Key = tuple[int, ...]

S1 = np.diag([1.0, -1.0])
S2 = np.array([[0.0, 1.0], [1.0, 0.0]])
BASIS = np.stack([sl2core.J, S1, S2])  # (3, 2, 2)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
COEFF_FLOOR = 0.0


def basis_coords(M: np.ndarray) -> np.ndarray:
    """Coordinates (cJ, c1, c2) of a traceless 2x2 matrix (real or complex)."""
    a11, a12, a21 = M[0, 0], M[0, 1], M[1, 0]
    return np.array([(a12 - a21) / 2, a11, (a12 + a21) / 2])


def from_coords(c: np.ndarray) -> np.ndarray:
    return np.tensordot(c, BASIS, axes=(0, 0))


def _neg(k: Key) -> Key:
    return tuple(-x for x in k)


def _is_upper(k: Key) -> bool:
    """k is lexicographically >= 0."""
    for x in k:
        if x != 0:
            return x > 0
    return True


@dataclass(frozen=True)
class FrequencyData:
    """Frequency vector with Diophantine constants.

    ``exact`` optionally holds mpmath expressions (e.g. ``"(sqrt(5)-1)/2"``)
    for each component; arbitrary-precision code uses them instead of the
    binary64 ``omega``.
    """

    omega: np.ndarray
    gamma: float
    tau: float
    exact: tuple[str, ...] | None = None

    @property
    def d(self) -> int:
        return len(self.omega)

    def bracket(self, k: Sequence[int]) -> float:
        """<k> = <k, omega>."""
        return float(np.dot(np.asarray(k, dtype=float), self.omega))

    def audit(self, n_check: int = 200, against: str = "zero") -> tuple[bool, float]:
        """Finite Diophantine audit over 0 < |n|_1 <= n_check.

        ``against="zero"`` measures |<n,omega>|, the quantity that appears as a
        divisor in the homological equation.  ``against="integer"`` measures
        the distance of <n,omega> to Z.  Returns (passes, worst ratio), where
        the ratio is |n|^tau * distance / gamma and must exceed 1.
        """
        worst = _diophantine_min(self.omega, self.tau, n_check, against)
        return worst > self.gamma, worst / self.gamma if self.gamma > 0 else math.inf


def _lattice_l1(d: int, n_max: int) -> np.ndarray:
    rng = range(-n_max, n_max + 1)
    pts = np.array(list(itertools.product(rng, repeat=d)), dtype=np.int64)
    l1 = np.abs(pts).sum(axis=1)
    return pts[(l1 > 0) & (l1 <= n_max)]


def _diophantine_min(omega: np.ndarray, tau: float, n_check: int, against: str) -> float:
    d = len(omega)
    if d == 2:
        # enumerate without building the full box twice
        a = np.arange(-n_check, n_check + 1)
        n1, n2 = np.meshgrid(a, a, indexing="ij")
        n1, n2 = n1.ravel(), n2.ravel()
        l1 = np.abs(n1) + np.abs(n2)
        keep = (l1 > 0) & (l1 <= n_check)
        n1, n2, l1 = n1[keep], n2[keep], l1[keep]
        vals = n1 * omega[0] + n2 * omega[1]
    else:
        pts = _lattice_l1(d, n_check)
        l1 = np.abs(pts).sum(axis=1)
        vals = pts @ omega
    if against == "zero":
        dist = np.abs(vals)
    elif against == "integer":
        dist = np.abs(vals - np.round(vals))
    else:
        raise ValueError(against)
    return float(np.min(l1.astype(float) ** tau * dist))


def fit_frequency(
    omega: Sequence[float],
    tau: float = 2.0,
    n_check: int = 200,
    exact: Sequence[str] | None = None,
) -> FrequencyData:
    """Frequency data with gamma fitted by the finite audit (slightly shrunk
    so the strict inequality holds on the audited set)."""
    om = np.asarray(omega, dtype=float)
    gamma = _diophantine_min(om, tau, n_check, "zero") * (1 - 1e-9)
    return FrequencyData(omega=om, gamma=gamma, tau=tau, exact=tuple(exact) if exact else None)


GOLDEN_EXACT = ("1", "(sqrt(5)-1)/2")


def golden_frequency(tau: float = 2.0, n_check: int = 200) -> FrequencyData:
    return fit_frequency((1.0, GOLDEN), tau=tau, n_check=n_check, exact=GOLDEN_EXACT)


def frequency_to_json(freq: FrequencyData) -> dict:
    return {
        "omega": [float(w) for w in freq.omega],
        "gamma": freq.gamma,
        "tau": freq.tau,
        "exact": list(freq.exact) if freq.exact else None,
    }


def frequency_from_json(obj: Mapping) -> FrequencyData:
    ex = obj.get("exact")
    return FrequencyData(
        omega=np.asarray(obj["omega"], dtype=float),
        gamma=float(obj["gamma"]),
        tau=float(obj["tau"]),
        exact=tuple(ex) if ex else None,
    )


class TrigPolySl2:
    """Finite Fourier series theta -> sum_k A(k) exp(i<k, theta>) in sl(2,R).

    Both k and -k are stored; the constructor enforces A(-k) = conj(A(k)).
    """

    __slots__ = ("_modes", "width", "d")

    def __init__(self, modes: Mapping[Key, np.ndarray], d: int, width: float = 0.0):
        self.d = d
        self.width = float(width)
        clean: dict[Key, np.ndarray] = {}
        for k, c in modes.items():
            k = tuple(int(x) for x in k)
            if len(k) != d:
                raise ValueError(f"mode {k} has wrong dimension, expected {d}")
            c = np.asarray(c, dtype=complex).reshape(3)
            clean[k] = c
        # symmetrize so the series is exactly real
        out: dict[Key, np.ndarray] = {}
        for k, c in clean.items():
            nk = _neg(k)
            if nk == k:
                out[k] = c.real.astype(complex)
            elif _is_upper(k):
                partner = clean.get(nk)
                avg = c if partner is None else 0.5 * (c + np.conj(partner))
                out[k] = avg
                out[nk] = np.conj(avg)
            elif k not in out and _neg(k) not in clean:
                out[k] = c
                out[nk] = np.conj(c)
        self._modes = {k: c for k, c in out.items() if np.any(np.abs(c) > COEFF_FLOOR)}

    # construction helpers -------------------------------------------------
    @classmethod
    def zero(cls, d: int, width: float = 0.0) -> "TrigPolySl2":
        return cls({}, d, width)

    @classmethod
    def constant(cls, M: np.ndarray, d: int, width: float = 0.0) -> "TrigPolySl2":
        return cls({(0,) * d: basis_coords(np.asarray(M, dtype=float))}, d, width)

    @classmethod
    def from_one_sided(cls, modes: Mapping[Key, np.ndarray], d: int, width: float = 0.0):
        """Build from coefficients given only for k >= 0 lexicographically."""
        full = {}
        for k, c in modes.items():
            k = tuple(int(x) for x in k)
            c = np.asarray(c, dtype=complex)
            full[k] = c
            if _neg(k) != k:
                full[_neg(k)] = np.conj(c)
        return cls(full, d, width)

    # container protocol ----------------------------------------------------
    @property
    def modes(self) -> dict[Key, np.ndarray]:
        return dict(self._modes)

    def support(self) -> list[Key]:
        return sorted(self._modes)

    def coeff(self, k: Sequence[int]) -> np.ndarray:
        return self._modes.get(tuple(k), np.zeros(3, dtype=complex)).copy()

    def coeff_matrix(self, k: Sequence[int]) -> np.ndarray:
        return from_coords(self.coeff(k))

    def __len__(self) -> int:
        return len(self._modes)

    def is_zero(self) -> bool:
        return not self._modes

    def with_width(self, width: float) -> "TrigPolySl2":
        return TrigPolySl2(self._modes, self.d, width)

    # algebra ---------------------------------------------------------------
    def __add__(self, other: "TrigPolySl2") -> "TrigPolySl2":
        out = dict(self._modes)
        for k, c in other._modes.items():
            out[k] = out.get(k, 0) + c
        return TrigPolySl2(out, self.d, min(self.width, other.width))

    def __sub__(self, other: "TrigPolySl2") -> "TrigPolySl2":
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "TrigPolySl2":
        return TrigPolySl2({k: a * c for k, c in self._modes.items()}, self.d, self.width)

    def mean(self) -> np.ndarray:
        return from_coords(self.coeff((0,) * self.d)).real

    def without_mean(self) -> "TrigPolySl2":
        z = (0,) * self.d
        return TrigPolySl2({k: c for k, c in self._modes.items() if k != z}, self.d, self.width)

    def truncate(self, n_max: float) -> tuple["TrigPolySl2", "TrigPolySl2"]:
        """Split into (|k|_1 <= n_max, |k|_1 > n_max)."""
        low = {k: c for k, c in self._modes.items() if sum(map(abs, k)) <= n_max}
        high = {k: c for k, c in self._modes.items() if sum(map(abs, k)) > n_max}
        return TrigPolySl2(low, self.d, self.width), TrigPolySl2(high, self.d, self.width)

    def conjugate_const(self, C: np.ndarray) -> "TrigPolySl2":
        """theta -> C F(theta) C^{-1} for constant unit-determinant C."""
        Ci = sl2core.inv_sl2(C)
        out = {k: basis_coords(C @ from_coords(c) @ Ci) for k, c in self._modes.items()}
        return TrigPolySl2(out, self.d, self.width)

    # evaluation ------------------------------------------------------------
    def _arrays(self):
        keys = list(self._modes)
        if not keys:
            return np.zeros((0, self.d)), np.zeros((0, 2, 2), dtype=complex)
        K = np.array(keys, dtype=float)
        C = np.array([from_coords(self._modes[k]) for k in keys])
        return K, C

    def eval(self, theta: Sequence[float]) -> np.ndarray:
        K, C = self._arrays()
        if len(K) == 0:
            return np.zeros((2, 2))
        ph = np.exp(1j * (K @ np.asarray(theta, dtype=float)))
        return np.tensordot(ph, C, axes=(0, 0)).real

    def eval_many(self, thetas: np.ndarray) -> np.ndarray:
        """Evaluate at an (m, d) array of points; returns (m, 2, 2)."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        K, C = self._arrays()
        if len(K) == 0:
            return np.zeros((len(thetas), 2, 2))
        ph = np.exp(1j * (thetas @ K.T))
        return np.einsum("tm,mij->tij", ph, C).real

    def eval_angles(self, angle: Callable[[Key], float]) -> np.ndarray:
        """Evaluate with caller-supplied phases <k, theta> (already reduced)."""
        if not self._modes:
            return np.zeros((2, 2))
        out = np.zeros((2, 2), dtype=complex)
        for k, c in self._modes.items():
            out += np.exp(1j * angle(k)) * from_coords(c)
        return out.real

    def eval_imag_residue(self, theta: Sequence[float]) -> float:
        K, C = self._arrays()
        if len(K) == 0:
            return 0.0
        ph = np.exp(1j * (K @ np.asarray(theta, dtype=float)))
        return float(np.abs(np.tensordot(ph, C, axes=(0, 0)).imag).max())

    def derivative(self, omega: np.ndarray) -> "TrigPolySl2":
        """Derivative along the flow theta = omega t."""
        out = {k: 1j * float(np.dot(k, omega)) * c for k, c in self._modes.items()}
        return TrigPolySl2(out, self.d, self.width)

    # norms ----------------------------------------------------------------
    def majorant_norm(self, r: float | None = None) -> float:
        """sum_k ||A(k)|| exp(r |k|_1), with the entrywise matrix norm."""
        r = self.width if r is None else r
        if r > self.width + 1e-15:
            raise WidthExceeded(f"r={r} exceeds width {self.width}", r=r, width=self.width)
        total = 0.0
        for k, c in self._modes.items():
            cJ, c1, c2 = c
            entry = 2 * abs(c1) + abs(cJ + c2) + abs(c2 - cJ)
            total += entry * math.exp(r * sum(map(abs, k)))
        return total

    def log_majorant(self, r: float | None = None) -> float:
        m = self.majorant_norm(r)
        return math.log(m) if m > 0 else -math.inf

    def max_abs_k(self) -> int:
        return max((max(map(abs, k)) for k in self._modes), default=0)

    # serialization ----------------------------------------------------------
    def to_json_obj(self) -> dict:
        modes = []
        for k in sorted(self._modes):
            if not _is_upper(k):
                continue
            c = self._modes[k]
            modes.append({"k": list(k), "c": [float(v) for z in c for v in (z.real, z.imag)]})
        return {"width": self.width, "modes": modes}

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "TrigPolySl2":
        one_sided = {}
        d = None
        for m in obj["modes"]:
            k = tuple(m["k"])
            d = len(k)
            c = np.asarray(m["c"], dtype=float).reshape(3, 2)
            one_sided[k] = c[:, 0] + 1j * c[:, 1]
        return cls.from_one_sided(one_sided, d if d is not None else int(obj.get("d", 2)), obj["width"])

    def dumps(self) -> str:
        return json.dumps(self.to_json_obj())

    def __repr__(self) -> str:
        return f"TrigPolySl2(d={self.d}, modes={len(self._modes)}, width={self.width})"


def majorant_norm(F: TrigPolySl2, r: float) -> float:
    return F.majorant_norm(r)


def eval(F: TrigPolySl2, theta: Sequence[float]) -> np.ndarray:  # noqa: A001
    return F.eval(theta)


def shift_rotate(F: TrigPolySl2, shift: Sequence[int]) -> TrigPolySl2:
    """theta -> R_a F R_a^{-1} with a = <shift, theta> / 2.

    The u-part of mode k moves to k - shift, the v-part to k + shift.
    """
    shift = tuple(int(x) for x in shift)
    out: dict[Key, np.ndarray] = {}

    def acc(k: Key, c: np.ndarray):
        out[k] = out.get(k, np.zeros(3, dtype=complex)) + c

    for k, c in F.modes.items():
        cJ, c1, c2 = c
        u = c1 + 1j * c2
        v = c1 - 1j * c2
        acc(k, np.array([cJ, 0, 0], dtype=complex))
        ku = tuple(a - b for a, b in zip(k, shift))
        kv = tuple(a + b for a, b in zip(k, shift))
        acc(ku, np.array([0, u / 2, u / (2j)], dtype=complex))
        acc(kv, np.array([0, v / 2, -v / (2j)], dtype=complex))
    return TrigPolySl2(out, F.d, F.width)


def rotation_conjugate(F: TrigPolySl2, k: Sequence[int], sign: int = 1) -> TrigPolySl2:
    """theta -> R^{sign}_{<k,theta>} F(theta) R^{-sign}_{<k,theta>}."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return shift_rotate(F, [2 * sign * int(x) for x in k])


@dataclass(frozen=True)
class QpSystem:
    """y' = (constant + perturbation(omega t)) y."""

    freq: FrequencyData
    constant: np.ndarray
    perturbation: TrigPolySl2

    def matrix(self, t: float) -> np.ndarray:
        return self.constant + self.perturbation.eval(self.freq.omega * t)

    def matrices(self, ts: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        return self.constant[None] + self.perturbation.eval_many(np.outer(ts, self.freq.omega))

    def sup_norm_majorant(self) -> float:
        """Majorant bound on sup_theta ||constant + P(theta)||."""
        return sl2core.mat_norm(self.constant) + self.perturbation.majorant_norm(0.0)


@dataclass(frozen=True)
class CocycleRun:
    matrix: np.ndarray
    det_drift: float
    steps: int
    richardson_error: float | None = None


def _rk4(sys: QpSystem, t0: float, t1: float, n: int) -> np.ndarray:
    h = (t1 - t0) / n
    ts = t0 + h * np.arange(n)
    A0 = sys.matrices(ts)
    Am = sys.matrices(ts + h / 2)
    A1 = sys.matrices(ts + h)
    a = 1.0
    b = 0.0
    c = 0.0
    d = 1.0
    for i in range(n):
        p = A0[i]
        q = Am[i]
        w = A1[i]
        p00, p01, p10, p11 = p[0, 0], p[0, 1], p[1, 0], p[1, 1]
        q00, q01, q10, q11 = q[0, 0], q[0, 1], q[1, 0], q[1, 1]
        w00, w01, w10, w11 = w[0, 0], w[0, 1], w[1, 0], w[1, 1]
        k1a = p00 * a + p01 * c
        k1b = p00 * b + p01 * d
        k1c = p10 * a + p11 * c
        k1d = p10 * b + p11 * d
        ya, yb, yc, yd = a + 0.5 * h * k1a, b + 0.5 * h * k1b, c + 0.5 * h * k1c, d + 0.5 * h * k1d
        k2a = q00 * ya + q01 * yc
        k2b = q00 * yb + q01 * yd
        k2c = q10 * ya + q11 * yc
        k2d = q10 * yb + q11 * yd
        ya, yb, yc, yd = a + 0.5 * h * k2a, b + 0.5 * h * k2b, c + 0.5 * h * k2c, d + 0.5 * h * k2d
        k3a = q00 * ya + q01 * yc
        k3b = q00 * yb + q01 * yd
        k3c = q10 * ya + q11 * yc
        k3d = q10 * yb + q11 * yd
        ya, yb, yc, yd = a + h * k3a, b + h * k3b, c + h * k3c, d + h * k3d
        k4a = w00 * ya + w01 * yc
        k4b = w00 * yb + w01 * yd
        k4c = w10 * ya + w11 * yc
        k4d = w10 * yb + w11 * yd
        a += h / 6 * (k1a + 2 * k2a + 2 * k3a + k4a)
        b += h / 6 * (k1b + 2 * k2b + 2 * k3b + k4b)
        c += h / 6 * (k1c + 2 * k2c + 2 * k3c + k4c)
        d += h / 6 * (k1d + 2 * k2d + 2 * k3d + k4d)
    return np.array([[a, b], [c, d]])


DET_DRIFT_LIMIT = 1e-6


def cocycle_with_diagnostics(
    sys: QpSystem, t0: float, t1: float, dt: float, richardson: bool = False
) -> CocycleRun:
    if dt <= 0:
        raise ValueError("dt must be positive")
    span = t1 - t0
    n = max(1, int(math.ceil(abs(span) / dt - 1e-12)))
    Phi = _rk4(sys, t0, t1, n) if span != 0 else np.eye(2)
    drift = abs(sl2core.det(Phi) - 1.0)
    if drift > DET_DRIFT_LIMIT:
        raise StepTooLarge(f"det drift {drift:.3e} with dt={dt}", drift=drift, dt=dt)
    err = None
    if richardson and span != 0:
        coarse = _rk4(sys, t0, t1, max(1, n // 2))
        err = float(np.abs(Phi - coarse).max() / 15.0)
    return CocycleRun(matrix=Phi, det_drift=drift, steps=n, richardson_error=err)


def integrate_cocycle(sys: QpSystem, t0: float, t1: float, dt: float) -> np.ndarray:
    """Fundamental matrix Phi(t1) Phi(t0)^{-1} by fixed-step RK4."""
    return cocycle_with_diagnostics(sys, t0, t1, dt).matrix


def integrate_path(sys: QpSystem, times: Sequence[float], dt: float) -> list[np.ndarray]:
    """Phi(t) from Phi(0) = I at each of the sorted ``times``."""
    out = []
    Phi = np.eye(2)
    last = 0.0
    for t in times:
        if t < last:
            raise ValueError("times must be sorted and non-negative")
        if t > last:
            Phi = integrate_cocycle(sys, last, t, dt) @ Phi
        out.append(Phi.copy())
        last = t
    return out


class TimeDependentMatrix(Protocol):
    def value(self, t: float) -> np.ndarray: ...

    def derivative(self, t: float) -> np.ndarray: ...


@dataclass(frozen=True)
class ConstantMatrix:
    M: np.ndarray = field(default_factory=lambda: np.eye(2))

    def value(self, t: float) -> np.ndarray:
        return self.M

    def derivative(self, t: float) -> np.ndarray:
        return np.zeros((2, 2))


def conjugation_residual(U: TimeDependentMatrix, sysA: QpSystem, sysB: QpSystem, t: float) -> float:
    """||U'(t) - A(t) U(t) + U(t) B(t)|| (entrywise sum norm)."""
    Ut = U.value(t)
    R = U.derivative(t) - sysA.matrix(t) @ Ut + Ut @ sysB.matrix(t)
    return sl2core.mat_norm(R)


def random_trigpoly(
    rng: np.random.Generator,
    d: int,
    keys: Iterable[Key],
    majorant: float,
    width: float,
) -> TrigPolySl2:
    """Random real series on the given one-sided keys, rescaled to a target majorant."""
    modes = {}
    for k in keys:
        c = rng.normal(size=3) + (0 if all(x == 0 for x in k) else 1j * rng.normal(size=3))
        modes[tuple(k)] = c
    F = TrigPolySl2.from_one_sided(modes, d, width)
    m = F.majorant_norm(width)
    return F.scale(majorant / m) if m > 0 else F
