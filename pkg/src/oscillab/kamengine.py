"""Almost-reducibility iteration for quasi-periodic sl(2,R) systems.

Each step conjugates y' = (A + F(omega t)) y by Y(omega t) to a system
y' = (A' + F'(omega t)) y with a smaller perturbation.

* non-resonant: Y = exp(Z), where Z solves the linearized homological
  equation  d_omega Z = [A, Z] + F_low - mean(F_low)  mode by mode;
* resonant: Y = C exp(Z) R_{<k,.>/2}, with C normalizing A to xi J, Z
  removing the non-resonant modes and the half-angle rotation moving the
  resonant mode into the constant part.

F' is computed without expansion: Y^{-1}(A+F)Y - Y^{-1} d_omega Y - A' is
evaluated on a torus grid and transformed back to Fourier modes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import qpfun, sl2core
from .errors import NotElliptic, SmallDivisorBlowup, Stalled
from .qpfun import FrequencyData, QpSystem, TrigPolySl2

Key = tuple

DIVISOR_FLOOR = 1e-14
F_FLOOR = 1e-13
DROP_FLOOR = 1e-18
DEFAULT_CAP = 0.5
NOISE_FACTOR = 32.0


# ---------------------------------------------------------------------------
# exponentials of traceless 2x2 matrices, vectorized


def _exp_parts(delta: np.ndarray):
    """c, s and their delta-derivatives for exp(Z) = c I + s Z, Z^2 = delta I."""
    delta = np.asarray(delta, dtype=float)
    small = np.abs(delta) < 1e-3
    c = np.empty_like(delta)
    s = np.empty_like(delta)
    dc = np.empty_like(delta)
    ds = np.empty_like(delta)
    d = delta[small]
    c[small] = 1 + d / 2 + d**2 / 24 + d**3 / 720 + d**4 / 40320
    s[small] = 1 + d / 6 + d**2 / 120 + d**3 / 5040 + d**4 / 362880
    dc[small] = 0.5 + d / 12 + d**2 / 240 + d**3 / 10080
    ds[small] = 1 / 6 + d / 60 + d**2 / 1680 + d**3 / 90720
    big = ~small
    if big.any():
        d = delta[big]
        sq = np.sqrt(d + 0j)
        cb = np.cosh(sq).real
        sb = (np.sinh(sq) / sq).real
        c[big] = cb
        s[big] = sb
        dc[big] = sb / 2
        ds[big] = (cb - sb) / (2 * d)
    return c, s, dc, ds


def expm_traceless(Z: np.ndarray) -> np.ndarray:
    """exp of a stack (..., 2, 2) of traceless matrices."""
    a, b, cc = Z[..., 0, 0], Z[..., 0, 1], Z[..., 1, 0]
    delta = a * a + b * cc
    c, s, _, _ = _exp_parts(delta)
    return c[..., None, None] * np.eye(2) + s[..., None, None] * Z


def expm_with_derivative(Z: np.ndarray, dZ: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """exp(Z) and its derivative along dZ, for stacks of traceless matrices."""
    a, b, cc = Z[..., 0, 0], Z[..., 0, 1], Z[..., 1, 0]
    da, db, dcc = dZ[..., 0, 0], dZ[..., 0, 1], dZ[..., 1, 0]
    delta = a * a + b * cc
    ddelta = 2 * a * da + db * cc + b * dcc
    c, s, dc, ds = _exp_parts(delta)
    eye = np.eye(2)
    E = c[..., None, None] * eye + s[..., None, None] * Z
    dE = (dc * ddelta)[..., None, None] * eye + (ds * ddelta)[..., None, None] * Z + s[..., None, None] * dZ
    return E, dE


# ---------------------------------------------------------------------------
# conjugation descriptors


@dataclass(frozen=True)
class Factor:
    """One factor of a conjugation: ``exp`` (of a trig polynomial), ``const``
    (a constant matrix) or ``rot`` (R_{<k, theta>/2})."""

    kind: str
    Z: TrigPolySl2 | None = None
    C: np.ndarray | None = None
    k: Key | None = None

    def value_derivative(self, t: float, omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "const":
            return self.C, np.zeros((2, 2))
        if self.kind == "rot":
            speed = 0.5 * float(np.dot(self.k, omega))
            R = sl2core.rotation(speed * t)
            return R, speed * sl2core.J @ R
        theta = omega * t
        Zt = self.Z.eval(theta)
        dZt = self.Z.derivative(omega).eval(theta)
        E, dE = expm_with_derivative(Zt[None], dZt[None])
        return E[0], dE[0]

    def describe(self) -> dict:
        if self.kind == "const":
            return {"kind": "const", "C": self.C.tolist()}
        if self.kind == "rot":
            return {"kind": "rot", "k": list(self.k)}
        return {"kind": "exp", "modes": len(self.Z), "norm": self.Z.majorant_norm(0.0)}


@dataclass(frozen=True)
class Conjugation:
    """Ordered product Y_0 Y_1 ... of factors, evaluated along theta = omega t."""

    factors: tuple = ()
    omega: np.ndarray | None = None

    def then(self, more: Iterable[Factor], omega: np.ndarray) -> "Conjugation":
        return Conjugation(self.factors + tuple(more), np.asarray(omega, dtype=float))

    def value(self, t: float) -> np.ndarray:
        out = np.eye(2)
        for f in self.factors:
            out = out @ f.value_derivative(t, self.omega)[0]
        return out

    def derivative(self, t: float) -> np.ndarray:
        vals = [f.value_derivative(t, self.omega) for f in self.factors]
        out = np.zeros((2, 2))
        for i in range(len(vals)):
            M = np.eye(2)
            for j, (v, dv) in enumerate(vals):
                M = M @ (dv if i == j else v)
            out += M
        return out

    def is_identity(self) -> bool:
        return not self.factors

    def sup_norm(self, T: float = 200.0, samples: int = 2001) -> float:
        """max over sampled t in [0, T] of the operator norm."""
        if not self.factors:
            return 1.0
        return max(np.linalg.norm(self.value(t), 2) for t in np.linspace(0.0, T, samples))

    def describe(self) -> list[dict]:
        return [f.describe() for f in self.factors]


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class HistoryEntry:
    kind: str
    k_res: Key | None
    normA: float
    normF: float
    r: float
    N: int
    dropped: float = 0.0

    def log_record(self, l: int) -> dict:
        return {
            "l": l,
            "kind": self.kind,
            "k_res": list(self.k_res) if self.k_res is not None else None,
            "normA": self.normA,
            "normF_log": math.log(self.normF) if self.normF > 0 else None,
            "r_l": self.r,
            "N_l": self.N,
        }


@dataclass(frozen=True)
class KamState:
    freq: FrequencyData
    A: np.ndarray
    F: TrigPolySl2
    eps: float
    r: float
    r0: float
    l: int = 0
    conj: Conjugation = field(default_factory=Conjugation)
    history: tuple = ()

    @classmethod
    def start(cls, sys: QpSystem, r0: float | None = None) -> "KamState":
        r0 = sys.perturbation.width if r0 is None else r0
        A = np.asarray(sys.constant, dtype=float) + sys.perturbation.mean()
        F = sys.perturbation.without_mean().with_width(r0)
        eps = F.majorant_norm(r0)
        return cls(sys.freq, A, F, eps, r0, r0, 0, Conjugation((), np.asarray(sys.freq.omega, dtype=float)))

    @property
    def xi(self) -> float:
        """Signed rotation number of A: A = C (xi J) C^{-1}."""
        ell = sl2core.normalize_elliptic(self.A)
        return ell.orientation * ell.rho

    def next_r(self) -> float:
        return self.r - self.r0 / 2 ** (self.l + 2)

    def truncation_order(self) -> int:
        """N_l = 2 |ln eps| / (r_l - r_{l+1})."""
        if self.eps <= 0:
            return 0
        return int(math.ceil(2 * abs(math.log(self.eps)) / (self.r - self.next_r())))

    def system(self) -> QpSystem:
        return QpSystem(self.freq, self.A, self.F)


# ---------------------------------------------------------------------------
# resonances


def resonance_scan(xi: float, freq: FrequencyData, N: int, threshold: float) -> list[Key]:
    """All k with 0 < |k|_1 <= N and |2 xi - <k>| < threshold, deepest first.

    The last coordinate is solved for, so the cost is O(N^{d-1}).
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if threshold <= 0:
        return []
    om = np.asarray(freq.omega, dtype=float)
    d = len(om)
    target = 2 * xi
    found: list[tuple[float, Key]] = []
    rng = range(-N, N + 1)
    import itertools

    for head in itertools.product(rng, repeat=d - 1):
        h1 = sum(abs(v) for v in head)
        if h1 > N:
            continue
        base = float(np.dot(head, om[:-1])) if d > 1 else 0.0
        w = om[-1]
        lo = (target - base - threshold) / w
        hi = (target - base + threshold) / w
        lo, hi = min(lo, hi), max(lo, hi)
        room = N - h1
        for kd in range(max(math.ceil(lo), -room), min(math.floor(hi), room) + 1):
            k = tuple(head) + (kd,)
            if not any(k):
                continue
            dev = abs(target - (base + kd * w))
            if dev < threshold:
                found.append((dev, k))
    found.sort()
    return [k for _, k in found]


def resonance_scan_bruteforce(xi: float, freq: FrequencyData, N: int, threshold: float) -> list[Key]:
    """Exhaustive reference implementation of :func:`resonance_scan`."""
    import itertools

    om = np.asarray(freq.omega, dtype=float)
    out = []
    for k in itertools.product(range(-N, N + 1), repeat=len(om)):
        if 0 < sum(map(abs, k)) <= N:
            dev = abs(2 * xi - float(np.dot(k, om)))
            if dev < threshold:
                out.append((dev, k))
    out.sort()
    return [k for _, k in out]


# ---------------------------------------------------------------------------
# homological solve


def _solve_modes(
    G: TrigPolySl2,
    xi: float,
    omega: np.ndarray,
    N: int,
    resonant: Key | None,
) -> TrigPolySl2:
    """W with d_omega W = [xi J, W] + G_low - mean(G), in the J basis.

    Components whose divisor belongs to the resonant pair are left out.
    """
    out = {}
    for k, c in G.modes.items():
        if not any(k) or sum(map(abs, k)) > N:
            continue
        bk = float(np.dot(k, omega))
        cJ, c1, c2 = c
        u, v = c1 + 1j * c2, c1 - 1j * c2
        res_v = resonant is not None and k == resonant
        res_u = resonant is not None and k == tuple(-x for x in resonant)
        w = np.zeros(3, dtype=complex)
        for coef, div, skip, slot in (
            (cJ, bk, False, "J"),
            (u, bk + 2 * xi, res_u, "u"),
            (v, bk - 2 * xi, res_v, "v"),
        ):
            if skip or coef == 0:
                continue
            if abs(div) < DIVISOR_FLOOR:
                raise SmallDivisorBlowup(
                    f"divisor {div:.3e} at k={k} outside the resonant set", k=list(k), divisor=div
                )
            val = coef / (1j * div)
            if slot == "J":
                w[0] = val
            elif slot == "u":
                w[1] += val / 2
                w[2] += val / (2j)
            else:
                w[1] += val / 2
                w[2] -= val / (2j)
        out[k] = w
    return TrigPolySl2(out, G.d, G.width)


def _grid_shape(polys: Sequence[TrigPolySl2], d: int) -> tuple[int, ...]:
    K = np.zeros(d, dtype=int)
    for P in polys:
        for k in P.modes:
            K = np.maximum(K, np.abs(np.array(k, dtype=int)))
    shape = []
    for Ki in K:
        m = 16
        while m < 6 * Ki + 8:
            m *= 2
        shape.append(m)
    return tuple(shape)


def _torus_points(shape: tuple[int, ...]) -> np.ndarray:
    axes = [2 * np.pi * np.arange(m) / m for m in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def _from_samples(
    vals: np.ndarray, shape: tuple[int, ...], d: int, width: float, floor: float = DROP_FLOOR
) -> tuple[TrigPolySl2, float]:
    """Fourier modes of sampled traceless matrices; returns the series and the
    majorant of coefficients dropped below ``floor``."""
    arr = vals.reshape(shape + (2, 2))
    coef = np.fft.fftn(arr, axes=tuple(range(d))) / np.prod(shape)
    modes = {}
    dropped = 0.0
    it = np.ndindex(*shape)
    for idx in it:
        C = coef[idx]
        k = tuple(int(i if i <= m // 2 else i - m) for i, m in zip(idx, shape))
        c = qpfun.basis_coords(C)
        size = float(np.abs(c).max())
        if size < floor:
            if size > 0:
                dropped += (2 * abs(c[1]) + abs(c[0] + c[2]) + abs(c[2] - c[0])) * math.exp(
                    width * sum(map(abs, k))
                )
            continue
        modes[k] = c
    return TrigPolySl2(modes, d, width), dropped


def _new_perturbation(
    A: np.ndarray,
    G: TrigPolySl2,
    W: TrigPolySl2,
    A_new: np.ndarray,
    omega: np.ndarray,
    width: float,
) -> tuple[TrigPolySl2, float]:
    """exp(-W)(A + G)exp(W) - exp(-W) d_omega exp(W) - A_new on a torus grid."""
    d = len(omega)
    shape = _grid_shape([G, W], d)
    pts = _torus_points(shape)
    Gv = G.eval_many(pts)
    Wv = W.eval_many(pts)
    dWv = W.derivative(omega).eval_many(pts)
    E, dE = expm_with_derivative(Wv, dWv)
    Einv = expm_traceless(-Wv)
    conj = Einv @ (A + Gv) @ E
    vals = conj - Einv @ dE - A_new
    # coefficients at the level of the rounding noise of the O(1) terms are
    # moved to the dropped majorant; dividing them by small divisors in the
    # next step would otherwise amplify pure noise
    scale = float(np.abs(conj).max()) + float(np.abs(A_new).max())
    floor = max(DROP_FLOOR, NOISE_FACTOR * np.finfo(float).eps * scale)
    return _from_samples(vals, shape, d, width, floor)


@dataclass(frozen=True)
class StepResult:
    kind: str
    k_res: Key | None
    factors: tuple
    state: KamState


def _active_resonance(state: KamState, G: TrigPolySl2, xi: float, N: int, threshold: float) -> Key | None:
    """Deepest scanned resonance that F actually excites strongly enough."""
    omega = np.asarray(state.freq.omega, dtype=float)
    Nscan = max(1, min(N, max((sum(map(abs, k)) for k in G.modes), default=1)))
    for k in resonance_scan(xi, state.freq, Nscan, threshold):
        if k not in G.modes:
            continue
        cJ, c1, c2 = G.modes[k]
        v = c1 - 1j * c2
        delta = abs(float(np.dot(k, omega)) - 2 * xi)
        if delta < DIVISOR_FLOOR:
            delta = 0.0  # exact resonance up to roundoff
        if abs(v) > 0 and abs(v) >= delta * math.sqrt(max(state.eps, 0.0)):
            return k
    return None


def pending_resonance(state: KamState, threshold: float | None = None, N_max: int | None = None) -> Key | None:
    """Resonance site the next step would remove, or None."""
    if state.F.is_zero() or sl2core.det(state.A) <= 0:
        return None
    ell = sl2core.normalize_elliptic(state.A)
    G = state.F.conjugate_const(sl2core.inv_sl2(ell.normalizer))
    N = state.truncation_order()
    if N_max is not None:
        N = min(N, N_max)
    thr = state.eps ** (1 / 15) if threshold is None else threshold
    return _active_resonance(state, G, ell.orientation * ell.rho, max(N, 1), thr)


def _is_floor(state: KamState, threshold: float | None, N_max: int | None) -> bool:
    if state.F.is_zero():
        return True
    return state.eps < F_FLOOR and pending_resonance(state, threshold, N_max) is None


def kam_step(
    state: KamState,
    cap: float = DEFAULT_CAP,
    threshold: float | None = None,
    N_max: int | None = None,
) -> StepResult:
    """One conjugation step.  ``threshold`` overrides eps^{1/15}."""
    omega = np.asarray(state.freq.omega, dtype=float)
    if state.F.is_zero():
        return StepResult("identity", None, (), state)
    if state.eps > cap:
        raise ValueError(f"perturbation majorant {state.eps:.3g} above the smallness cap {cap}")
    d = sl2core.det(state.A)
    if not d > 0:
        raise NotElliptic(f"det A = {d:.6g}; only the elliptic regime is implemented", det=d)
    ell = sl2core.normalize_elliptic(state.A)
    xi = ell.orientation * ell.rho
    C = ell.normalizer
    Ci = sl2core.inv_sl2(C)
    r_next = state.next_r()
    N = state.truncation_order()
    if N_max is not None:
        N = min(N, N_max)
    thr = state.eps ** (1 / 15) if threshold is None else threshold
    G = state.F.conjugate_const(Ci)  # C^{-1} F C
    k_res = _active_resonance(state, G, xi, N, thr)
    W = _solve_modes(G, xi, omega, N, k_res)
    base = xi * sl2core.J
    G0 = G.mean()
    A_G = base + G0
    Gp, dropped = _new_perturbation(base, G.without_mean(), W, A_G, omega, state.F.width)

    if k_res is None:
        # the second-order average also goes into the constant part
        A_new = C @ (A_G + Gp.mean()) @ Ci
        F_new = Gp.without_mean().conjugate_const(C)
        Z = W.conjugate_const(C)
        factors = () if Z.is_zero() else (Factor("exp", Z=Z),)
        kind = "nonresonant"
    else:
        # rotate by R_{<k,theta>/2}: theta-dependent part and constant together
        total = Gp + TrigPolySl2.constant(A_G, state.F.d, state.F.width)
        rotated = qpfun.shift_rotate(total, tuple(-x for x in k_res))
        half = 0.5 * float(np.dot(k_res, omega))
        A_new = rotated.mean() - half * sl2core.J
        F_new = rotated.without_mean()
        factors = (Factor("const", C=C),)
        if not W.is_zero():
            factors += (Factor("exp", Z=W),)
        factors += (Factor("rot", k=tuple(k_res)),)
        kind = "resonant"
    F_new = F_new.with_width(state.F.width)
    # coefficients under the rounding floor are reported in the history,
    # not added to eps: they carry no information beyond the arithmetic
    eps_new = F_new.majorant_norm(r_next)
    hist = HistoryEntry(kind, k_res, sl2core.mat_norm(A_new), eps_new, r_next, N, dropped)
    new_state = replace(
        state,
        A=A_new,
        F=F_new,
        eps=eps_new,
        r=r_next,
        l=state.l + 1,
        conj=state.conj.then(factors, omega),
        history=state.history + (hist,),
    )
    return StepResult(kind, k_res, factors, new_state)


# ---------------------------------------------------------------------------
# the full iteration


@dataclass(frozen=True)
class Snapshot:
    """State after a resonant step (and at the start and end)."""

    L: np.ndarray
    tail_norm: float
    conj: Conjugation
    eps: float
    k_res: Key | None
    step: int

    def growth_envelope(self, tau: float) -> float:
        """|ln eps|^{2 tau}."""
        return abs(math.log(self.eps)) ** (2 * tau) if 0 < self.eps < 1 else math.inf


@dataclass
class ReductionReport:
    snapshots: list[Snapshot]
    final: KamState
    reduced: bool
    log: list[dict]
    envelope_ok: list[bool]
    eps_sequence_ok: list[bool]
    xi_bound_ok: list[bool]

    def write_log(self, fh) -> None:
        for rec in self.log:
            fh.write(json.dumps(rec) + "\n")


def almost_reduce(
    sys: QpSystem,
    max_steps: int = 20,
    cap: float = DEFAULT_CAP,
    threshold: float | None = None,
    N_max: int | None = 64,
    sup_horizon: float = 200.0,
) -> ReductionReport:
    """Iterate :func:`kam_step`, snapshotting at resonant steps."""
    state = KamState.start(sys)
    snaps = [Snapshot(state.A, state.eps, state.conj, state.eps, None, 0)]
    log: list[dict] = []
    stall = 0
    reduced = _is_floor(state, threshold, N_max)
    while not reduced and state.l < max_steps:
        prev = state.eps
        res = kam_step(state, cap=cap, threshold=threshold, N_max=N_max)
        state = res.state
        log.append(state.history[-1].log_record(state.l))
        if res.kind == "resonant":
            snaps.append(Snapshot(state.A, state.eps, state.conj, state.eps, res.k_res, state.l))
        if _is_floor(state, threshold, N_max):
            reduced = True
            break
        stall = stall + 1 if state.eps >= prev else 0
        if stall >= 3:
            raise Stalled(f"no contraction for 3 steps at l={state.l}", l=state.l, eps=state.eps)
    if snaps[-1].step != state.l:
        snaps.append(Snapshot(state.A, state.eps, state.conj, state.eps, None, state.l))
    tau = sys.freq.tau
    env = []
    for s in snaps:
        if s.conj.is_identity():
            env.append(True)
            continue
        env.append(s.conj.sup_norm(sup_horizon) <= s.growth_envelope(tau))
    eps_ok = []
    res_snaps = [s for s in snaps if s.k_res is not None]
    for a, b in zip(res_snaps, res_snaps[1:]):
        eps_ok.append(eps_sequence_holds(a.eps, b.eps, sys.perturbation.width, tau))
    xi_ok = []
    for s in res_snaps:
        if sl2core.det(s.L) > 0 and 0 < s.eps < 1:
            ell = sl2core.normalize_elliptic(s.L)
            xi_ok.append(ell.rho > sys.freq.gamma / abs(math.log(s.eps)) ** tau)
        else:
            xi_ok.append(s.eps == 0)
    return ReductionReport(snaps, state, reduced, log, env, eps_ok, xi_ok)


def eps_sequence_holds(eps_j: float, eps_next: float, r: float, tau: float) -> bool:
    """eps_{j+1} < eps_j exp(-(r/2) eps_j^{-1/(18 tau)}), compared in logs."""
    if eps_next <= 0:
        return True
    if eps_j <= 0:
        return False
    rhs = math.log(eps_j) - 0.5 * r * math.exp(-math.log(eps_j) / (18 * tau))
    return math.log(eps_next) < rhs
