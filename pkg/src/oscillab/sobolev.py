"""Sobolev norms built on the harmonic oscillator J = D^2 + X^2.

H^s is defined spectrally: with J h_n = (2n+1) h_n,

    ||psi||_{H^s}^2 = sum_n (2n+1)^s |<h_n, psi>|^2.

Besides grid-based analysis this module carries an exact Hermite-basis
engine.  For W in SL(2,R) the metaplectic image satisfies

    M(W)^{-1} X M(W) = aX + bD,    M(W)^{-1} D M(W) = cX + dD,

so ||M(W) psi||_{H^s}^2 = <psi, Q^s psi> with Q = (aX+bD)^2 + (cX+dD)^2.
Applying the tridiagonal ladder operators to a finite coefficient vector
is exact (the support grows by one per application), so integer-s norms of
M(W) psi are available for matrices far beyond what any grid can hold.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import kernels, sl2core
from .errors import NotConverged, NotElliptic, TailEscape, TruncationTail, ZeroState
from .metaengine import GridState, Grid, _fft_unitary, apply_meta

TAIL_BLOCK = 8
TAIL_TOL = 1e-10


# ---------------------------------------------------------------------------
# Hermite states


@dataclass(frozen=True, eq=False)
class HermiteState:
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def size(self) -> int:
        return len(self.coeffs)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def tail_fraction(self, block: int = TAIL_BLOCK) -> float:
        tot = float(np.sum(np.abs(self.coeffs) ** 2))
        if tot == 0:
            return 0.0
        return float(np.sum(np.abs(self.coeffs[-block:]) ** 2)) / tot


def basis_state(n: int, size: int | None = None) -> HermiteState:
    c = np.zeros(max(n + 1, size or 0), dtype=complex)
    c[n] = 1.0
    return HermiteState(c)


@lru_cache(maxsize=8)
def _table(N: int, nmax: int) -> np.ndarray:
    t = kernels.hermite_table(Grid(N).x, nmax)
    t.setflags(write=False)
    return t


def hermite_analyze(psi: GridState, N_h: int, check_tail: bool = True) -> HermiteState:
    """c_n = <h_n, psi> for n < N_h by grid quadrature."""
    if N_h > psi.N // 4:
        raise ValueError(f"N_h={N_h} exceeds N/4={psi.N // 4}")
    c = _table(psi.N, N_h - 1) @ psi.samples * psi.dx
    st = HermiteState(c)
    if check_tail and st.tail_fraction() > TAIL_TOL:
        raise TruncationTail(f"tail fraction {st.tail_fraction():.3e}", N_h=N_h)
    return st


def hermite_synthesize(state: HermiteState, N: int, check: bool = True) -> GridState:
    tab = _table(N, state.size - 1)
    return GridState(state.coeffs @ tab, check=check)


def hs_norm(state: HermiteState, s: float) -> float:
    w = (2.0 * np.arange(state.size) + 1.0) ** s
    return math.sqrt(float(np.sum(w * np.abs(state.coeffs) ** 2)))


def default_nh(N: int) -> int:
    return min(N // 4, 512)


def hs_norm_grid(psi: GridState, s: float, N_h: int | None = None) -> float:
    return hs_norm(hermite_analyze(psi, N_h or default_nh(psi.N)), s)


# ---------------------------------------------------------------------------
# grid moments


def aux_norms(psi: GridState, s: float) -> tuple[float, float, float]:
    """(||X^s psi||, ||D^s psi||, ||(1 + D^2)^{s/2} psi||) on the grid."""
    if s < 0:
        raise ValueError("s must be non-negative")
    x = psi.x
    dx = psi.dx
    u = psi.samples
    uh = _fft_unitary(u)
    xs = math.sqrt(dx * float(np.sum(np.abs(x) ** (2 * s) * np.abs(u) ** 2)))
    ds = math.sqrt(dx * float(np.sum(np.abs(x) ** (2 * s) * np.abs(uh) ** 2)))
    cl = math.sqrt(dx * float(np.sum((1 + x * x) ** s * np.abs(uh) ** 2)))
    return xs, ds, cl


def gamma_s(psi: GridState, s: float, N_h: int | None = None) -> float:
    """||psi||_{H^s} / ||D^s psi||."""
    if psi.norm() == 0:
        raise ZeroState("gamma_s of the zero state")
    if s == 0:
        return 1.0
    _, ds, _ = aux_norms(psi, s)
    return hs_norm_grid(psi, s, N_h) / ds


# ---------------------------------------------------------------------------
# exact ladder-operator engine


def apply_x(v: np.ndarray) -> np.ndarray:
    """X on Hermite coefficients; output is one entry longer."""
    n = len(v)
    out = np.zeros(n + 1, dtype=complex)
    sq = np.sqrt(np.arange(1, n + 1) / 2.0)  # sqrt(k/2), k = 1..n
    out[1:] += sq * v  # a^dagger part: h_k -> sqrt((k+1)/2) h_{k+1}
    out[: n - 1] += sq[: n - 1] * v[1:]  # a part: h_k -> sqrt(k/2) h_{k-1}
    return out


def apply_d(v: np.ndarray) -> np.ndarray:
    """D = -i d/dx on Hermite coefficients; output is one entry longer."""
    n = len(v)
    out = np.zeros(n + 1, dtype=complex)
    sq = np.sqrt(np.arange(1, n + 1) / 2.0)
    out[1:] += 1j * sq * v
    out[: n - 1] += -1j * sq[: n - 1] * v[1:]
    return out


def apply_linear(alpha: float, beta: float, v: np.ndarray) -> np.ndarray:
    """(alpha X + beta D) v."""
    return alpha * apply_x(v) + beta * apply_d(v)


def _q_apply(W: np.ndarray, v: np.ndarray) -> np.ndarray:
    a, b, c, d = (float(t) for t in np.asarray(W).ravel())
    p = apply_linear(a, b, v)
    q = apply_linear(c, d, v)
    return apply_linear(a, b, p) + apply_linear(c, d, q)


def _pad(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(u), len(v))
    return np.pad(u, (0, n - len(u))), np.pad(v, (0, n - len(v)))


def meta_hs_norm(W: np.ndarray, state: HermiteState | np.ndarray, s: int) -> float:
    """||M(W) psi||_{H^s} for integer s >= 0, exact up to rounding."""
    if int(s) != s or s < 0:
        raise ValueError("exact evaluation needs a non-negative integer s")
    s = int(s)
    v = state.coeffs if isinstance(state, HermiteState) else np.asarray(state, dtype=complex)
    m, odd = divmod(s, 2)
    for _ in range(m):
        v = _q_apply(W, v)
    if not odd:
        return float(np.linalg.norm(v))
    qv = _q_apply(W, v)
    a, b = _pad(v, qv)
    return math.sqrt(max(float(np.vdot(a, b).real), 0.0))


def meta_moment_norms(W: np.ndarray, state: HermiteState | np.ndarray, s: int) -> tuple[float, float]:
    """(||X^s M(W) psi||, ||D^s M(W) psi||) for integer s."""
    a, b, c, d = (float(t) for t in np.asarray(W).ravel())
    v0 = state.coeffs if isinstance(state, HermiteState) else np.asarray(state, dtype=complex)
    vx = v0
    vd = v0
    for _ in range(int(s)):
        vx = apply_linear(a, b, vx)
        vd = apply_linear(c, d, vd)
    return float(np.linalg.norm(vx)), float(np.linalg.norm(vd))


def hermite_gamma_s(state: HermiteState, s: int) -> float:
    """Gamma_s computed exactly in the Hermite basis."""
    if state.norm() == 0:
        raise ZeroState("gamma_s of the zero state")
    if s == 0:
        return 1.0
    _, ds = meta_moment_norms(sl2core.I2, state, s)
    return hs_norm(state, s) / ds


# ---------------------------------------------------------------------------
# chirp derivative coefficients


@dataclass(frozen=True)
class ChirpDerivTable:
    rows: tuple  # rows[alpha - 1] = (p_{alpha,0}, ..., p_{alpha,floor(alpha/2)})

    @property
    def alpha_max(self) -> int:
        return len(self.rows)

    def row(self, alpha: int) -> tuple:
        return self.rows[alpha - 1]

    def check_bounds(self) -> bool:
        """p_{a,0} = 1, p_{a,k} >= 1 and sum_{k>=1} p_{a,k} <= a! for every row."""
        for alpha, r in enumerate(self.rows, start=1):
            if r[0] != 1 or any(p < 1 for p in r):
                return False
            if sum(r[1:]) > math.factorial(alpha):
                return False
        return True

    def derivative(self, alpha: int, G: float, x: float) -> complex:
        """d^alpha/dx^alpha exp(iGx^2) assembled from the table."""
        g2 = 2j * G
        tot = sum(p * g2 ** (alpha - k) * x ** (alpha - 2 * k) for k, p in enumerate(self.row(alpha)))
        return complex(np.exp(1j * G * x * x) * tot)


def chirp_coeffs(alpha_max: int) -> ChirpDerivTable:
    """Exact integer table via p_{a+1,k} = p_{a,k} + (a - 2k + 2) p_{a,k-1}."""
    if not 1 <= alpha_max <= 64:
        raise ValueError("alpha_max must lie in 1..64")
    rows = [(1,)]
    for a in range(1, alpha_max):
        prev = rows[-1]
        new = []
        for k in range((a + 1) // 2 + 1):
            same = prev[k] if k < len(prev) else 0
            lower = (a - 2 * k + 2) * prev[k - 1] if k >= 1 else 0
            new.append(same + lower)
        rows.append(tuple(new))
    return ChirpDerivTable(tuple(rows))


def chirp_coeff_closed_form(alpha: int, k: int) -> int:
    """alpha! / (k! (alpha - 2k)! 2^k)."""
    return math.factorial(alpha) // (math.factorial(k) * math.factorial(alpha - 2 * k) * 2**k)


# ---------------------------------------------------------------------------
# audits


@dataclass
class AuditRecord:
    quantity: str
    measured: list
    bound_rhs: list
    fitted_constant: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def _as_hermite(psi, N_h: int | None = None) -> HermiteState:
    if isinstance(psi, HermiteState):
        return psi
    if isinstance(psi, GridState):
        return hermite_analyze(psi, N_h or default_nh(psi.N))
    return HermiteState(np.asarray(psi, dtype=complex))


def ugk_matrix(G: float, K: float) -> np.ndarray:
    """W with U_{G,K} = |K|^{-1/2} M(W) u up to a unimodular factor."""
    return sl2core.shear(2 * G) @ sl2core.dilation(1 / K)


def ugk_audit(
    G: float,
    K: float,
    psi,
    s: int,
    method: str = "exact",
    small: float = 1e-2,
) -> dict:
    """Measured ||U_{G,K}||_{H^s} against the upper bound and the applicable
    lower bound.  Returns raw ratios; constants are fitted by callers over a
    corpus.  ``small`` is the threshold used for the smallness hypotheses."""
    if K == 0:
        sl2core.dilation(0.0)
    st = _as_hermite(psi)
    W = ugk_matrix(G, K)
    if method == "exact":
        measured = abs(K) ** -0.5 * meta_hs_norm(W, st, s)
    elif method == "grid":
        if not isinstance(psi, GridState):
            raise TypeError("grid method needs a GridState")
        out = apply_meta(W, psi, "fast")
        measured = abs(K) ** -0.5 * hs_norm_grid(out, s)
    else:
        raise ValueError(method)
    u_hs = hs_norm(st, s)
    upper = abs(K) ** -0.5 * (abs(K) + abs(G / K) + 1 / abs(K)) ** s * u_hs
    xs_u, ds_u = meta_moment_norms(sl2core.I2, st, s)
    gam = u_hs / ds_u if s > 0 else 1.0
    gk2 = abs(G) / K**2
    rec = {"G": G, "K": K, "s": s, "measured": measured, "upper_rhs": upper, "upper_ratio": measured / upper}
    lowers = {}
    if gk2 * (1 + gam) ** 2 <= small:
        lowers["lower_j"] = abs(K) ** (s - 0.5) * ds_u + abs(K) ** (-s - 0.5) * xs_u
    if gk2 * max(1.0, abs(K) ** (4 * s)) <= small:
        lowers["lower_transf"] = abs(K) ** -0.5 * min(abs(K) ** s, abs(K) ** -s) * u_hs
    if K == 1 and abs(G) <= small:
        lowers["lower_k1"] = u_hs
    rec["lower_rhs"] = lowers
    rec["lower_ratio"] = {k: measured / v for k, v in lowers.items() if v > 0}
    return rec


def propagator_upper_rhs(L: np.ndarray, t: float, s: float) -> float:
    a20, a11, a02 = sl2core.quadratic_coefficients(L)
    rho = math.sqrt(sl2core.det(L))
    return 1 + (abs(a20) + abs(a11) + abs(a02)) ** s * abs(math.sin(rho * t) / rho) ** s


def propagator_lower_rhs(L: np.ndarray, t: float, s: float, xs: float, ds: float) -> float:
    _, _, a02 = sl2core.quadratic_coefficients(L)
    rho = math.sqrt(sl2core.det(L))
    q = abs(a02 * math.sin(rho * t) / rho)
    if q == 0:
        return 0.0
    return q**s * ds + q ** (-s) * xs


def propagator_bound_audit(
    cases: Sequence[tuple[np.ndarray, float]],
    s: int,
    corpus: Sequence,
    lower_threshold: float = 10.0,
    lower_floor: float = 0.1,
) -> dict:
    """Upper and lower bounds for exp(-itL) over (L, t) cases and a corpus.

    The upper constant is fitted as the worst ratio, so the violation count
    with that constant is the number of cases whose ratio is not finite.
    The lower bound is examined only where a11 = 0 and
    |a02 sin(rho t)/rho| / (1 + Gamma_s)^2 >= ``lower_threshold``; it passes
    when the fitted constant is at least ``lower_floor``.
    """
    states = [_as_hermite(p) for p in corpus]
    up_ratios, up_meas, up_rhs = [], [], []
    low_ratios = []
    for L, t in cases:
        L = np.asarray(L, dtype=float)
        if not sl2core.det(L) > 0:
            raise NotElliptic("propagator audit needs det(L) > 0")
        A = sl2core.expm(L, t)
        rhs = propagator_upper_rhs(L, t, s)
        for st in states:
            base = hs_norm(st, s)
            meas = meta_hs_norm(A, st, s)
            up_meas.append(meas / base)
            up_rhs.append(rhs)
            up_ratios.append(meas / base / rhs)
            a20, a11, a02 = sl2core.quadratic_coefficients(L)
            if a11 == 0 and s > 0:
                gam = hermite_gamma_s(st, s)
                rho = math.sqrt(sl2core.det(L))
                q = abs(a02 * math.sin(rho * t) / rho)
                if q / (1 + gam) ** 2 >= lower_threshold:
                    xs, ds = meta_moment_norms(sl2core.I2, st, s)
                    low_ratios.append(meas / propagator_lower_rhs(L, t, s, xs, ds))
    C = max(up_ratios)
    violations = sum(1 for r in up_ratios if not np.isfinite(r) or r > C)
    c_low = min(low_ratios) if low_ratios else math.nan
    return {
        "s": s,
        "upper": AuditRecord("propagator_upper", up_meas, up_rhs, C, violations == 0).to_json_obj(),
        "upper_violations": violations,
        "lower_cases": len(low_ratios),
        "lower_constant": c_low,
        "lower_pass": bool(low_ratios) and c_low >= lower_floor,
    }


def meta_upper_audit(mats: Sequence[np.ndarray], corpus: Sequence, s: int) -> AuditRecord:
    """||M(A) psi||_{H^s} / ||psi||_{H^s} against ||A||^s with one fitted constant."""
    states = [_as_hermite(p) for p in corpus]
    meas, rhs = [], []
    for A in mats:
        na = sl2core.mat_norm(A)
        for st in states:
            meas.append(meta_hs_norm(A, st, s) / hs_norm(st, s))
            rhs.append(na**s)
    ratios = np.array(meas) / np.array(rhs)
    C = float(ratios.max())
    return AuditRecord("meta_upper", meas, rhs, C, bool(np.all(np.isfinite(ratios))))


# ---------------------------------------------------------------------------
# commutator constant


def _ladder_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.sqrt(np.arange(1, n) / 2.0)
    X = np.diag(k, 1) + np.diag(k, -1)
    D = -1j * np.diag(k, 1) + 1j * np.diag(k, -1)
    return X.astype(complex), D


def commutator_matrices(s: float, N_h: int) -> list[np.ndarray]:
    """[Op, J^{s/2}] J^{-s/2} for Op in X^2, XD, DX, D^2 on the first N_h
    Hermite functions.  Products are formed at size N_h + 4 and then cut so
    that the retained block is exact."""
    X, D = _ladder_matrices(N_h + 4)
    lam = 2.0 * np.arange(N_h) + 1.0
    ratio = 1.0 - (lam[:, None] / lam[None, :]) ** (s / 2)
    out = []
    for op in (X @ X, X @ D, D @ X, D @ D):
        out.append(op[:N_h, :N_h] * ratio)
    return out


def power_norm(T: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value of T by power iteration on T^* T."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=T.shape[1]) + 0j
    v /= np.linalg.norm(v)
    prev = 0.0
    for _ in range(max_iter):
        w = T.conj().T @ (T @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 0.0
        v = w / lam
        if abs(lam - prev) <= tol * lam:
            return math.sqrt(lam)
        prev = lam
    raise NotConverged(f"power iteration stalled at {math.sqrt(prev):.6g}", iterations=max_iter)


def estimate_upsilon(s: float, N_h: int = 256, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    if N_h < 64:
        raise ValueError("N_h must be at least 64")
    if s == 0:
        return 0.0
    return max(power_norm(T, tol, max_iter) for T in commutator_matrices(s, N_h))


@dataclass(frozen=True)
class UpsilonReport:
    s: float
    N_h: int
    value: float
    value_doubled: float

    @property
    def relative_change(self) -> float:
        return abs(self.value_doubled - self.value) / max(self.value, 1e-300)


def upsilon_stabilization(s: float, N_h: int = 256) -> UpsilonReport:
    return UpsilonReport(s, N_h, estimate_upsilon(s, N_h), estimate_upsilon(s, 2 * N_h))
