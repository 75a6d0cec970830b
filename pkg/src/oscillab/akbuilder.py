"""Resonance schedules and the perturbation that makes Sobolev norms oscillate.

A schedule is a list of lattice vectors k_0, k_1, ..., k_{J+1} with
rapidly shrinking brackets <k_j> = <k_j, omega>, together with times T_j at
which the rotating frames line up.  From it we assemble a perturbation P of
J whose cocycle is conjugated, level by level, to the constant matrices

    L_j = [[0, phi_j + lam_j], [-(phi_j - lam_j), 0]],

via U_j(t) = R_{<k0+k1> t} prod_{n=1}^{j-1} Z_n R_{<k_{n+1}> t} with
Z_n = diag(z_n, 1/z_n).

Brackets reach far below binary64 range, so every scalar of a schedule is an
``mpmath`` number and inequalities are compared through logarithms.  The
working precision grows with the depth of the smallest bracket; the guard
digits come from the ``OSCILLAB_PRECISION`` environment variable
(``double`` or ``extended``).
"""

from __future__ import annotations

import ast
import itertools
import math
import operator
import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from mpmath import mp

from . import qpfun, sl2core
from .errors import (
    DepthExceeded,
    InfeasibleDepth,
    NormBudgetExceeded,
    PrecisionExhausted,
    SearchExhausted,
)
from .qpfun import FrequencyData, TrigPolySl2

Key = tuple

PRECISION_ENV = "OSCILLAB_PRECISION"
GUARD_DIGITS = {"double": 40, "extended": 160}
MODES = ("relaxed", "faithful", "manual")
DEFAULT_CAP = 1.8
DEFAULT_MAX_LOG = 3.0e5
# coefficients whose log-magnitude falls below this are dropped from the
# binary64 assembly (their majorant is still accounted for)
UNDERFLOW_LOG = -700.0


def precision_mode() -> str:
    mode = os.environ.get(PRECISION_ENV, "double").strip().lower()
    if mode not in GUARD_DIGITS:
        raise ValueError(f"{PRECISION_ENV} must be one of {sorted(GUARD_DIGITS)}, got {mode!r}")
    return mode


def guard_digits() -> int:
    return GUARD_DIGITS[precision_mode()]


# ---------------------------------------------------------------------------
# big integers and exact frequencies


def _int_str(n: int) -> str:
    get = getattr(sys, "get_int_max_str_digits", None)
    if get is None:
        return str(n)
    old = get()
    sys.set_int_max_str_digits(0)
    try:
        return str(n)
    finally:
        sys.set_int_max_str_digits(old)


def _str_int(s: str) -> int:
    get = getattr(sys, "get_int_max_str_digits", None)
    if get is None:
        return int(s)
    old = get()
    sys.set_int_max_str_digits(0)
    try:
        return int(s)
    finally:
        sys.set_int_max_str_digits(old)


def _l1(k: Sequence[int]) -> int:
    return sum(abs(int(v)) for v in k)


def _add(a: Key, b: Key) -> Key:
    return tuple(int(x) + int(y) for x, y in zip(a, b))


_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}


def eval_exact(expr: str):
    """Evaluate a small arithmetic expression in the current mp precision.

    Allowed: numbers, + - * / **, unary minus, pi, e, sqrt(), log(), exp().
    """
    names = {"pi": +mp.pi, "e": +mp.e}
    funcs = {"sqrt": mp.sqrt, "log": mp.log, "exp": mp.exp}

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return mp.mpf(node.value) if isinstance(node.value, int) else mp.mpf(repr(node.value))
        if isinstance(node, ast.Name) and node.id in names:
            return names[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if (
            isinstance(node, ast.Call)
            and isinstance(node.func, ast.Name)
            and node.func.id in funcs
            and len(node.args) == 1
            and not node.keywords
        ):
            return funcs[node.func.id](ev(node.args[0]))
        raise ValueError(f"unsupported expression element in {expr!r}")

    return ev(ast.parse(expr, mode="eval"))


def omega_mp(freq: FrequencyData) -> list:
    """Frequency components at the current mp precision.

    Without exact expressions the binary64 values are taken literally, which
    makes the frequency rational and caps how small brackets can get.
    """
    if freq.exact is None:
        return [mp.mpf(float(w)) for w in freq.omega]
    return [eval_exact(e) for e in freq.exact]


def bracket_mp(k: Sequence[int], om: Sequence) -> "mp.mpf":
    return mp.fsum(mp.mpf(int(a)) * w for a, w in zip(k, om))


# ---------------------------------------------------------------------------
# growth profiles f and the exponent g


@dataclass(frozen=True)
class GrowthProfile:
    """Target growth f.  ``power``: t^{s(1-delta)}.  ``loglog``:
    t^s / log log log(e^e + t)."""

    kind: str = "power"
    s: float = 1.0
    delta: float = 0.5

    def __post_init__(self):
        if self.kind not in ("power", "loglog"):
            raise ValueError(f"unknown growth profile {self.kind!r}")
        if self.s <= 0:
            raise ValueError("s must be positive")
        if self.kind == "power" and not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")

    @classmethod
    def parse(cls, text: str, s: float = 1.0) -> "GrowthProfile":
        """``power:<delta>`` or ``loglog``."""
        head, _, arg = text.partition(":")
        head = head.strip().lower()
        if head == "power":
            return cls("power", s, float(arg) if arg else 0.5)
        if head == "loglog":
            return cls("loglog", s)
        raise ValueError(f"unknown growth profile {text!r}")

    def spec(self) -> str:
        return f"power:{self.delta!r}" if self.kind == "power" else "loglog"

    def _lll(self, t):
        return mp.log(mp.log(mp.log(mp.e ** mp.e + t)))

    def log_f(self, t):
        t = mp.mpf(t)
        if self.kind == "power":
            return mp.mpf(self.s) * (1 - mp.mpf(self.delta)) * mp.log(t)
        return mp.mpf(self.s) * mp.log(t) - mp.log(self._lll(t))

    def g(self, t):
        """g(t) = 1 - ln f(t) / (s ln t)."""
        if self.kind == "power":
            return mp.mpf(self.delta)
        t = mp.mpf(t)
        lll = self._lll(t)
        if lll <= 0:
            return mp.ninf
        return mp.log(lll) / (mp.mpf(self.s) * mp.log(t))

    def g_from_log_t(self, log_t: float) -> float:
        """g at t = exp(log_t), evaluated without forming t."""
        if self.kind == "power":
            return self.delta
        # ln(e^e + t) ~ ln t for the huge t of interest
        lt = max(log_t, math.e)
        inner = math.log(lt)
        if inner <= 1.0:
            return -math.inf
        lll = math.log(inner)
        if lll <= 1.0:
            return -math.inf if lll <= 0 else math.log(lll) / (self.s * log_t)
        return math.log(lll) / (self.s * log_t)

    def to_json_obj(self) -> dict:
        return {"kind": self.kind, "s": self.s, "delta": self.delta}

    @classmethod
    def from_json_obj(cls, obj) -> "GrowthProfile":
        return cls(obj["kind"], float(obj["s"]), float(obj.get("delta", 0.5)))


# ---------------------------------------------------------------------------
# k0, k1


def _box(d: int, K: int) -> np.ndarray:
    return np.array(list(itertools.product(range(-K, K + 1), repeat=d)), dtype=np.int64)


def k0k1_lhs(k0: Sequence[int], k1: Sequence[int], om: Sequence, r: float):
    """|1 - <k0+k1>| e^{2r|k0|} + <k1>, in mp."""
    b01 = bracket_mp(_add(tuple(k0), tuple(k1)), om)
    return abs(1 - b01) * mp.exp(2 * mp.mpf(r) * _l1(k0)) + bracket_mp(k1, om)


def search_k0k1(
    freq: FrequencyData,
    eps: float,
    r: float,
    gamma_s: float = math.sqrt(2.0),
    K_max: int = 10,
    cap: float = DEFAULT_CAP,
    strategy: str = "staged",
) -> tuple[Key, Key]:
    """Pick k0 with <k0> in (3/4, 1) and k1 with <k1> in (0, 1/4).

    Constraints: <k1>^{1/8} (1 + gamma_s) <= cap and
    |1 - <k0+k1>| e^{2r|k0|} + <k1> < eps / 64, with |k|_inf <= K_max.

    ``staged`` takes the k0 of smallest sup-norm (ties: l1 norm, then
    lexicographic) and then the admissible k1 with the smallest left-hand
    side.  ``joint`` minimizes the left-hand side over all pairs.
    """
    if strategy not in ("staged", "joint"):
        raise ValueError(f"unknown strategy {strategy!r}")
    om = np.asarray(freq.omega, dtype=float)
    pts = _box(freq.d, int(K_max))
    vals = pts @ om
    l1 = np.abs(pts).sum(axis=1)
    linf = np.abs(pts).max(axis=1)
    ok0 = (vals > 0.75) & (vals < 1.0)
    ok1 = (vals > 0.0) & (vals < 0.25) & (np.power(np.clip(vals, 0, None), 0.125) * (1 + gamma_s) <= cap)
    if not ok0.any() or not ok1.any():
        raise SearchExhausted("no lattice vector with the required brackets", K_max=K_max)
    i1 = np.flatnonzero(ok1)

    def best_k1(i0: int) -> tuple[float, int] | None:
        lhs = np.abs(1 - (vals[i0] + vals[i1])) * math.exp(2 * r * l1[i0]) + vals[i1]
        good = lhs < eps / 64
        if not good.any():
            return None
        cand = i1[good]
        order = sorted(range(len(cand)), key=lambda m: (lhs[good][m], l1[cand[m]], tuple(pts[cand[m]])))
        m = order[0]
        return float(lhs[good][m]), int(cand[m])

    i0s = np.flatnonzero(ok0)
    if strategy == "staged":
        i0 = min(i0s, key=lambda i: (linf[i], l1[i], tuple(pts[i])))
        got = best_k1(int(i0))
        if got is None:
            raise SearchExhausted("no k1 meets the smallness budget for the chosen k0",
                                  k0=[int(v) for v in pts[i0]], eps=eps)
        return tuple(int(v) for v in pts[i0]), tuple(int(v) for v in pts[got[1]])
    best = None
    for i0 in i0s:
        got = best_k1(int(i0))
        if got is None:
            continue
        key = (got[0], l1[i0], tuple(pts[i0]))
        if best is None or key < best[0]:
            best = (key, int(i0), got[1])
    if best is None:
        raise SearchExhausted("no (k0, k1) pair meets the smallness budget", eps=eps, K_max=K_max)
    return tuple(int(v) for v in pts[best[1]]), tuple(int(v) for v in pts[best[2]])


# ---------------------------------------------------------------------------
# the schedule


def _nearest_multiple(S, P):
    """m P closest to S; exact half-way ties round up (nonnegative shift)."""
    return mp.floor(S / P + mp.mpf(1) / 2) * P


@dataclass
class AkSchedule:
    freq: FrequencyData
    profile: GrowthProfile
    eps: float
    r: float
    mode: str
    ks: tuple
    decay: tuple[float, float]
    dps: int
    brackets: list = field(default_factory=list)   # <k_n>, n = 0..J+1
    b01: object = None                            # <k0 + k1>
    T: list = field(default_factory=list)          # T_j, j = 0..J
    Xi: list = field(default_factory=list)         # Xi[j][n], n = 1..j
    g: list = field(default_factory=list)          # g(T_j)
    phi: list = field(default_factory=list)        # index 1..J, None at 0
    lam: list = field(default_factory=list)
    z: list = field(default_factory=list)
    diff: list = field(default_factory=list)       # phi_j - lam_j, stably

    @property
    def depth(self) -> int:
        return len(self.ks) - 2

    @property
    def s(self) -> float:
        return self.profile.s

    # -- derivation -------------------------------------------------------
    @classmethod
    def derive(
        cls,
        freq: FrequencyData,
        ks: Sequence[Sequence[int]],
        profile: GrowthProfile,
        eps: float,
        r: float,
        mode: str = "relaxed",
        decay: tuple[float, float] | None = None,
        dps: int | None = None,
    ) -> "AkSchedule":
        """Compute T, Xi, g, phi, lam, z from the lattice vectors."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        ks = tuple(tuple(int(v) for v in k) for k in ks)
        if len(ks) < 2:
            raise ValueError("a schedule needs at least k0 and k1")
        decay = tuple(decay) if decay is not None else (4.0, 2.0 * r)
        if dps is None:
            biggest = max(max(abs(v) for v in k) for k in ks)
            digits = max(1, len(_int_str(biggest)))
            dps = 2 * digits + guard_digits() + 30
        sch = cls(freq, profile, eps, r, mode, ks, decay, int(dps))
        with mp.workdps(sch.dps):
            sch._fill()
        return sch

    def _fill(self) -> None:
        om = omega_mp(self.freq)
        ks = self.ks
        self.brackets = [bracket_mp(k, om) for k in ks]
        self.b01 = bracket_mp(_add(ks[0], ks[1]), om)
        if self.b01 <= 0:
            raise SearchExhausted("<k0 + k1> must be positive")
        for n in range(2, len(ks)):
            if self.brackets[n] <= 0:
                raise SearchExhausted(f"<k_{n}> must be positive", n=n)
        pi = +mp.pi
        self.T = [5 * pi / (2 * self.b01)]
        self.Xi = [{}]
        self.g = [self.profile.g(self.T[0])]
        self.phi, self.lam, self.z, self.diff = [None], [None], [None], [None]
        for j in range(1, self.depth + 1):
            bk = self.brackets[j + 1]
            S = 5 * pi / (2 * bk)
            xi = {}
            for n in range(j, 0, -1):
                P = 2 * pi / (self.brackets[n] if n >= 2 else self.b01)
                target = _nearest_multiple(S, P)
                xi[n] = target - S
                S = target
            self.T.append(S)
            self.Xi.append(xi)
            gj = self.profile.g(S)
            self.g.append(gj)
            phi = bk ** (3 * gj / 4) if gj > 0 else mp.mpf(1)
            lam = mp.sqrt(max(phi * phi - bk * bk, mp.mpf(0)))
            self.phi.append(phi)
            self.lam.append(lam)
            self.diff.append(bk * bk / (phi + lam))
            self.z.append(mp.sqrt((phi + lam) / bk))

    # -- conveniences -----------------------------------------------------
    def frequency(self, j: int):
        """Rotation speed of the j-th frame: <k0+k1> for j = 0, else <k_{j+1}>."""
        return self.b01 if j == 0 else self.brackets[j + 1]

    def L_matrix(self, j: int) -> np.ndarray:
        if j == 0:
            return sl2core.J.copy()
        self._check_level(j)
        return np.array(
            [[0.0, float(self.phi[j] + self.lam[j])], [-float(self.diff[j]), 0.0]]
        )

    def _check_level(self, j: int) -> None:
        if j < 0 or j > self.depth:
            raise DepthExceeded(f"level {j} beyond schedule depth {self.depth}", j=j, depth=self.depth)

    # -- persistence ------------------------------------------------------
    def to_json_obj(self) -> dict:
        def enc_int(v: int):
            return v if abs(v) < 2**53 else _int_str(v)

        with mp.workdps(self.dps):
            return {
                "mode": self.mode,
                "s": self.s,
                "eps": self.eps,
                "r": self.r,
                "depth": self.depth,
                "profile": self.profile.to_json_obj(),
                "freq": qpfun.frequency_to_json(self.freq),
                "decay": list(self.decay),
                "dps": self.dps,
                "k": [[enc_int(v) for v in k] for k in self.ks],
                "T": [encode_real(t) for t in self.T],
                "Xi": [[encode_real(self.Xi[j][n]) for n in range(1, j + 1)] for j in range(len(self.Xi))],
                "g": [encode_real(v) for v in self.g],
                "phi": [encode_real(v) for v in self.phi[1:]],
                "lam": [encode_real(v) for v in self.lam[1:]],
                "z": [encode_real(v) for v in self.z[1:]],
            }

    @classmethod
    def from_json_obj(cls, obj) -> "AkSchedule":
        """Rebuild from the lattice vectors and check the stored reals."""
        ks = [[_str_int(v) if isinstance(v, str) else int(v) for v in k] for k in obj["k"]]
        sch = cls.derive(
            qpfun.frequency_from_json(obj["freq"]),
            ks,
            GrowthProfile.from_json_obj(obj["profile"]),
            float(obj["eps"]),
            float(obj["r"]),
            obj["mode"],
            tuple(obj["decay"]),
            int(obj["dps"]),
        )
        with mp.workdps(sch.dps):
            for name, stored, fresh in (
                ("T", obj["T"], sch.T),
                ("phi", obj["phi"], sch.phi[1:]),
                ("z", obj["z"], sch.z[1:]),
            ):
                for a, b in zip(stored, fresh):
                    if not _reals_match(decode_real(a), b):
                        raise ValueError(f"stored {name} does not match the lattice vectors")
        return sch


def encode_real(x):
    """Plain float, or [sign, ln|x|] once |ln|x|| exceeds 600."""
    x = mp.mpf(x)
    if x == 0:
        return 0.0
    if mp.isinf(x):
        return [1 if x > 0 else -1, float("inf")]
    lg = mp.log(abs(x))
    if abs(lg) > 600:
        return [1 if x > 0 else -1, float(lg)]
    return float(x)


def decode_real(v):
    if isinstance(v, list):
        sign, lg = v
        return (sign, float(lg))
    x = float(v)
    if x == 0:
        return (0, -math.inf)
    return (1 if x > 0 else -1, math.log(abs(x)))


def _reals_match(stored, fresh, rtol: float = 1e-9) -> bool:
    sign, lg = stored
    if fresh == 0:
        return sign == 0
    fs = 1 if fresh > 0 else -1
    flg = float(mp.log(abs(fresh)))
    return fs == sign and abs(flg - lg) <= rtol * max(1.0, abs(flg))


# ---------------------------------------------------------------------------
# inequalities


@dataclass(frozen=True)
class InequalityCheck:
    """lhs < rhs (or <= when ``strict`` is False); both sides are logs unless
    ``space`` says linear."""

    name: str
    family: str
    j: int
    n: int | None
    lhs: float
    rhs: float
    required: bool
    strict: bool = True
    space: str = "log"
    certified: bool = True
    margin: float = 0.0  # rhs - lhs, formed at working precision
    passed: bool = False  # decided at working precision
    margin_log10: float = math.inf  # log10 |rhs - lhs|, survives underflow

    def to_json_obj(self) -> dict:
        return {
            "name": self.name,
            "family": self.family,
            "j": self.j,
            "n": self.n,
            "lhs": _json_float(self.lhs),
            "rhs": _json_float(self.rhs),
            "margin": _json_float(self.margin),
            "margin_log10": _json_float(self.margin_log10),
            "space": self.space,
            "required": self.required,
            "pass": self.passed,
            "certified": self.certified,
        }


def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass
class VerificationReport:
    checks: list[InequalityCheck]
    mode: str
    depth: int

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks if c.required)

    @property
    def lemma_checks(self) -> list[InequalityCheck]:
        return [c for c in self.checks if c.family == "lemma"]

    @property
    def failures(self) -> list[InequalityCheck]:
        return [c for c in self.checks if c.required and not c.passed]

    @property
    def uncertified(self) -> list[InequalityCheck]:
        return [c for c in self.checks if not c.certified]

    def min_margin(self, family: str | None = None) -> float:
        ms = [c.margin for c in self.checks if c.required and (family is None or c.family == family)]
        return min(ms) if ms else math.inf

    def to_json_obj(self) -> dict:
        return {
            "mode": self.mode,
            "depth": self.depth,
            "all_pass": self.all_passed,
            "checks": [c.to_json_obj() for c in self.checks],
        }

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            tag = "PASS" if c.passed else ("FAIL" if c.required else "info")
            where = f"j={c.j}" + (f",n={c.n}" if c.n is not None else "")
            if c.margin == 0 and math.isfinite(c.margin_log10):
                sign = "" if c.passed else "-"
                m = f"{sign}1e{c.margin_log10:.1f}"
            else:
                m = f"{c.margin:.6g}"
            out.append(f"{tag:4s} {c.name:16s} {where:10s} margin={m}")
        return out


def _ln(x):
    x = mp.mpf(x)
    if x <= 0:
        return mp.ninf
    return mp.log(x)


def _dist_2pi(x):
    """Distance from x to 2 pi Z."""
    two_pi = 2 * mp.pi
    y = x - mp.floor(x / two_pi + mp.mpf(1) / 2) * two_pi
    return abs(y)


class _Collector:
    def __init__(self, sched: AkSchedule):
        self.s = sched
        self.items: list[InequalityCheck] = []
        self.tol = mp.mpf(10) ** (-(sched.dps - guard_digits()))

    def add(self, name, family, j, n, lhs, rhs, required, strict=True, space="log"):
        lhs_m, rhs_m = mp.mpf(lhs), mp.mpf(rhs)
        certified = True
        if mp.isinf(lhs_m) or mp.isinf(rhs_m):
            margin = math.inf if (lhs_m < rhs_m) else (0.0 if lhs_m == rhs_m else -math.inf)
            passed = lhs_m < rhs_m or (not strict and lhs_m == rhs_m)
        else:
            diff = rhs_m - lhs_m
            scale = max(mp.mpf(1), abs(lhs_m), abs(rhs_m))
            certified = abs(diff) > self.tol * scale
            margin = float(diff)
            passed = diff > 0 or (not strict and diff == 0)
        mlog = math.inf if mp.isinf(lhs_m) or mp.isinf(rhs_m) else (
            -math.inf if lhs_m == rhs_m else float(mp.log10(abs(rhs_m - lhs_m))))
        self.items.append(
            InequalityCheck(name, family, j, n, float(lhs_m), float(rhs_m), required, strict, space,
                            certified, margin, bool(passed), mlog)
        )


def _base_checks(c: _Collector) -> None:
    s = c.s
    b0, b1 = s.brackets[0], s.brackets[1]
    c.add("defi_k0", "definition", 0, None, mp.log(mp.mpf(3) / 4), _ln(b0), True)
    c.add("defi_k0", "definition", 0, None, _ln(b0), 0, True)
    c.add("defi_k1", "definition", 1, None, 0, b1, True, space="linear")
    c.add("defi_k1", "definition", 1, None, _ln(b1), mp.log(mp.mpf(1) / 4), True)
    om = omega_mp(s.freq)
    lhs = k0k1_lhs(s.ks[0], s.ks[1], om, s.r)
    c.add("k0k1_small", "budget", 0, None, _ln(lhs), mp.log(mp.mpf(s.eps) / 64), True)
    g0 = s.g[0]
    c.add("g_range", "definition", 0, None, 0, g0, True, space="linear")
    c.add("g_range", "definition", 0, None, g0, 1, True, space="linear")


def _level_checks(c: _Collector, j: int) -> None:
    s = c.s
    r = mp.mpf(s.r)
    relaxed = s.mode != "faithful"
    bk = s.brackets[j + 1]
    lk = _ln(bk)
    gj = s.g[j]
    Tj = s.T[j]
    pi = +mp.pi

    c.add("g_range", "definition", j, None, 0, gj, True, space="linear")
    c.add("g_range", "definition", j, None, gj, 1, True, space="linear")

    # T_j construction: Xi ranges and lattice congruences
    S = 5 * pi / (2 * bk)
    for n in range(j, 0, -1):
        bn = s.brackets[n] if n >= 2 else s.b01
        xi = s.Xi[j][n]
        c.add("xi_range", "definition", j, n, _ln(abs(xi)), _ln(pi / bn), True, strict=False)
        S = S + xi
        resid = _dist_2pi(bn * S)
        # roundoff in bn * S scales with its magnitude
        tol = c.tol * max(mp.mpf(1), abs(bn * S))
        c.add("congruence", "definition", j, n, _ln(resid), _ln(tol), True, strict=False)

    # selection rules
    kj = s.ks[j]
    bj = s.brackets[j]
    c.add("decay", "selection", j, None, lk,
          mp.mpf(s.decay[0]) * _ln(bj) - mp.mpf(s.decay[1]) * _l1(kj), relaxed, strict=False)
    c.add("seq_k-1", "selection", j, None, _ln(mp.exp(_l1(kj)) + 10), _ln(_l1(s.ks[j + 1])), not relaxed)
    tau = mp.mpf(s.freq.tau)
    c.add("seq_k-2", "selection", j, None, gj / 2 * lk,
          s.g[j - 1] / 2 * _ln(bj) - 33 * r * _l1(kj) - bj ** (-(1 + 1 / (36 * tau))), not relaxed)

    # growth of the chain
    for n in range(1, j + 1):
        c.add("esti_chain_k", "lemma", j, n, gj / mp.mpf(33) ** (j + 1 - n) * lk,
              -2 * r * _l1(s.ks[n]) + _ln(s.brackets[n]), True)
    c.add("seqest_1", "lemma", j, None, gj / 32 * lk, mp.fsum(_ln(s.brackets[n]) for n in range(1, j + 1)), True)
    c.add("seqest_2", "lemma", j, None, _ln(abs(bk * Tj - 5 * pi / 2)), (1 - gj / 32) * lk, True)
    for n in range(2, j + 1):
        c.add("seqest_3", "lemma", j, n, _ln(_dist_2pi(s.brackets[n] * Tj)),
              (1 - s.g[n - 1] / 32) * _ln(s.brackets[n]), True)

    # z sequence
    zj = s.z[j]
    base = (3 * gj / 8 - mp.mpf(1) / 2) * lk
    c.add("seq_z0", "lemma", j, None, base - mp.log(2) / 2, _ln(zj), True)
    c.add("seq_z0", "lemma", j, None, _ln(zj), base + mp.log(2) / 2, True)
    for n in range(1, j):
        zn = s.z[n]
        c.add("seq_z1", "lemma", j, n, _ln(abs(zn * mp.sin(s.brackets[n + 1] * Tj))),
              -_ln(zn) + 5 * s.g[n] / 8 * _ln(s.brackets[n + 1]), True)
    lz = mp.fsum(_ln(s.z[n]) for n in range(1, j))
    c.add("seq_z2", "lemma", j, None, lz, -gj / 2200 * lk, True)
    c.add("seq_z2", "lemma", j, None, gj / 1100 * lk + lz, -lz, True)

    # size of the leading term F_j
    zprev = s.z[j - 1] if j >= 2 else mp.mpf(1)
    bound = 2 * zprev**2 * (s.phi[j] + 2 * s.lam[j] * mp.exp(2 * r * _l1(s.ks[j])))
    c.add("esti_F", "lemma", j, None, _ln(bound), 5 * gj / 8 * lk, True, strict=False)


def verify_schedule(sched: AkSchedule) -> VerificationReport:
    """Evaluate every inequality of the construction in log space."""
    with mp.workdps(sched.dps):
        c = _Collector(sched)
        _base_checks(c)
        for j in range(1, sched.depth + 1):
            _level_checks(c, j)
    return VerificationReport(c.items, sched.mode, sched.depth)


def _level_ok(sched: AkSchedule, j: int) -> tuple[bool, list[InequalityCheck]]:
    with mp.workdps(sched.dps):
        c = _Collector(sched)
        _level_checks(c, j)
    bad = [x for x in c.items if x.required and not x.passed]
    return not bad, c.items


# ---------------------------------------------------------------------------
# candidate generation


def _partial_quotients(alpha) -> Iterator[int]:
    man, exp = alpha.man, alpha.exp
    if alpha < 0:
        man = -man
    num, den = (man << exp, 1) if exp >= 0 else (man, 1 << -exp)
    while den:
        a, rem = divmod(num, den)
        yield a
        num, den = den, rem


def _convergent_candidates(om: Sequence, min_log: float = 0.0) -> Iterator[tuple[Key, object]]:
    """Lattice vectors from continued-fraction convergents of omega_2/omega_1,
    signed so the bracket is positive, in order of shrinking bracket.

    Partial quotients come from Euclid's algorithm on the exact binary value
    of the mp ratio.  Since |q_n alpha - p_n| > 1/(2 q_{n+1}), convergents
    whose successor denominator is below exp(min_log)/2 cannot reach a
    bracket under exp(-min_log) and are skipped without mp work.
    """
    min_bits = int(min_log / math.log(2)) - 2
    quotients = _partial_quotients(om[1] / om[0])
    a0 = next(quotients)
    p_prev, p = 1, a0
    q_prev, q = 0, 1
    for a in itertools.chain(quotients, [None]):
        q_next = None if a is None else a * q + q_prev
        if q_next is None or q_next.bit_length() >= min_bits:
            val = q * om[1] - p * om[0]
            if val != 0:
                k = (-int(p), int(q)) if val > 0 else (int(p), -int(q))
                yield k, abs(val)
        if a is None:
            return
        p_prev, p = p, a * p + p_prev
        q_prev, q = q, q_next


def _box_candidates(freq: FrequencyData, om: Sequence, K_max: int) -> Iterator[tuple[Key, object]]:
    pts = _box(freq.d, K_max)
    vals = pts @ np.asarray(freq.omega, dtype=float)
    order = np.argsort(-vals)
    for i in order:
        if vals[i] <= 0:
            continue
        k = tuple(int(v) for v in pts[i])
        yield k, bracket_mp(k, om)


def _required_log_depth(sched: AkSchedule, j: int, max_log: float) -> float:
    """Smallest x such that ln <k_{j+1}> < -x can satisfy the selection and
    chain inequalities at level j, given the g profile."""
    with mp.workdps(sched.dps):
        r = float(sched.r)
        lb = [float(-_ln(b)) for b in sched.brackets[: j + 1]]
        norms = [_l1(k) for k in sched.ks[: j + 1]]
        # constants C with x * g > C
        C = max(33.0 ** (j + 1 - n) * (lb[n] + 2 * r * norms[n]) for n in range(1, j + 1))
        C = max(C, 32.0 * sum(lb[1 : j + 1]))
        lz = sum(float(_ln(sched.z[n])) for n in range(1, j))
        C = max(C, 2200.0 * lz)
        if sched.mode == "faithful":
            bj = float(sched.brackets[j])
            tail = bj ** (-(1 + 1 / (36 * sched.freq.tau)))
            C = max(C, float(sched.g[j - 1]) * lb[j] + 66 * r * norms[j] + 2 * tail)
        x_decay = sched.decay[0] * lb[j] + sched.decay[1] * norms[j]
    prof = sched.profile

    def score(x: float) -> float:
        # ln T_j is about x + ln(5 pi / 2)
        return x * prof.g_from_log_t(x + math.log(2.5 * math.pi)) - C

    if score(max_log) <= 0:
        raise InfeasibleDepth(
            f"level {j} needs ln<k_{j + 1}> below -{max_log:g}",
            level=j,
            max_log=max_log,
        )
    lo, hi = 0.0, max_log
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if score(mid) > 0:
            hi = mid
        else:
            lo = mid
    return max(hi, x_decay)


def _next_vector(
    sched: AkSchedule,
    j: int,
    max_log: float,
    K_max: int,
    max_checks: int = 400,
) -> AkSchedule:
    x_need = _required_log_depth(sched, j, max_log)
    if sched.mode == "faithful" and _l1(sched.ks[j]) > max_log:
        raise InfeasibleDepth(
            f"|k_{j + 1}| must exceed exp({_l1(sched.ks[j])})", level=j, max_log=max_log
        )
    if x_need > max_log:
        raise InfeasibleDepth(f"level {j} needs ln<k_{j + 1}> below -{x_need:.6g}", level=j, max_log=max_log)
    slack = 60.0
    while True:
        dps = int(2 * (x_need + slack) / math.log(10)) + guard_digits() + 30
        dps = max(dps, sched.dps)
        checks = 0
        with mp.workdps(dps):
            om = omega_mp(sched.freq)
            gen = _convergent_candidates(om, x_need) if sched.freq.d == 2 else _box_candidates(sched.freq, om, K_max)
            hi, lo = mp.exp(-x_need), mp.exp(-(x_need + slack))
            for k, val in gen:
                if val < lo:
                    break
                if val >= hi:
                    continue
                if sched.mode == "faithful" and _l1(k) <= math.exp(min(_l1(sched.ks[j]), 700)) + 10:
                    continue
                trial = AkSchedule.derive(
                    sched.freq, sched.ks + (k,), sched.profile, sched.eps, sched.r,
                    sched.mode, sched.decay, dps,
                )
                ok, _ = _level_ok(trial, j)
                checks += 1
                if ok:
                    return trial
                if checks >= max_checks:
                    raise SearchExhausted(f"no admissible k_{j + 1} among {checks} candidates", level=j)
            else:
                raise SearchExhausted(f"candidate supply ran out for k_{j + 1}", level=j)
        slack *= 4
        if x_need + slack > max_log:
            raise InfeasibleDepth(f"no admissible k_{j + 1} above exp(-{max_log:g})", level=j, max_log=max_log)


def build_schedule(
    freq: FrequencyData,
    s: float = 1.0,
    profile: GrowthProfile | str = "power:0.5",
    eps: float = 30.0,
    r: float = 0.05,
    depth: int = 1,
    mode: str = "relaxed",
    *,
    k0k1: tuple[Sequence[int], Sequence[int]] | None = None,
    K_max: int = 10,
    cap: float = DEFAULT_CAP,
    strategy: str = "staged",
    gamma_s: float = math.sqrt(2.0),
    decay: tuple[float, float] | None = None,
    max_log: float = DEFAULT_MAX_LOG,
    check_budget: bool = True,
) -> AkSchedule:
    """Select k_0 .. k_{depth+1} and derive the full schedule.

    ``relaxed`` asks <k_{j+1}> <= <k_j>^{c1} exp(-c2 |k_j|) (``decay``,
    default c1 = 4, c2 = 2r) in place of the super-exponential selection
    rules, which ``faithful`` enforces.  Both modes require every chain
    inequality at every level.  ``max_log`` bounds ln(1/<k>) of any vector
    the builder will try to represent.
    """
    if mode not in ("relaxed", "faithful"):
        raise ValueError("build mode must be 'relaxed' or 'faithful'")
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    if mode == "faithful" and depth >= 3:
        raise InfeasibleDepth(
            "faithful selection at depth >= 3 needs |k_3| > exp(exp(...)) and cannot be represented",
            depth=depth,
        )
    if isinstance(profile, str):
        profile = GrowthProfile.parse(profile, s)
    elif profile.s != s:
        profile = GrowthProfile(profile.kind, s, profile.delta)
    if k0k1 is None:
        k0, k1 = search_k0k1(freq, eps, r, gamma_s, K_max, cap, strategy)
    else:
        k0, k1 = (tuple(int(v) for v in k) for k in k0k1)
    sched = AkSchedule.derive(freq, (k0, k1), profile, eps, r, mode, decay)
    g0 = sched.g[0]
    if not 0 < g0 < 1:
        raise InfeasibleDepth(f"g(T_0) = {mp.nstr(g0, 8)} is outside (0, 1)", g0=float(g0))
    for j in range(1, depth + 1):
        sched = _next_vector(sched, j, max_log, K_max)
    report = verify_schedule(sched)
    if not report.all_passed:
        names = sorted({c.name for c in report.failures})
        raise SearchExhausted(f"schedule fails {names}", failures=names)
    if report.uncertified:
        names = sorted({c.name for c in report.uncertified if c.required})
        if names:
            raise PrecisionExhausted(f"margins below working precision: {names}", checks=names)
    if check_budget:
        assemble_perturbation(sched)
    return sched


# ---------------------------------------------------------------------------
# leading terms and the assembled perturbation


def _g_term(phi: float, lam: float, k: Key, d: int, width: float) -> TrigPolySl2:
    """phi J + lam (sin(2<k,.>) S1 + cos(2<k,.>) S2)."""
    modes = {}
    zero = tuple([0] * d)
    modes[zero] = np.array([phi, 0, 0], dtype=complex)
    if lam != 0 and any(k):
        kp = tuple(2 * v for v in k)
        km = tuple(-2 * v for v in k)
        modes[kp] = np.array([0, -0.5j * lam, 0.5 * lam], dtype=complex)
        modes[km] = np.array([0, 0.5j * lam, 0.5 * lam], dtype=complex)
    elif lam != 0:
        modes[zero] = modes[zero] + np.array([0, 0, lam])
    return TrigPolySl2(modes, d, width)


def _zmat(z: float) -> np.ndarray:
    return np.array([[z, 0.0], [0.0, 1.0 / z]])


def _tail_from(sched: AkSchedule, m0: int, J: int, width: float) -> tuple[TrigPolySl2, float]:
    """P_{m0} of the level-m0 frame, truncated at depth J, plus a majorant
    bound for contributions too small for binary64."""
    d = sched.freq.d
    acc = TrigPolySl2.zero(d, width)
    dropped = 0.0
    with mp.workdps(sched.dps):
        for m in range(J, m0 - 1, -1):
            # build inner = G_m + R_{k_m} acc R^{-1}, then conjugate by Z_{m-1}
            if acc.is_zero():
                rot = acc
            else:
                rot = qpfun.rotation_conjugate(acc, sched.ks[m], +1)
            rel = mp.fsum(2 * _ln(sched.z[n]) for n in range(max(m0 - 1, 1), m))
            scale = _ln(sched.phi[m] + sched.lam[m]) + rel
            if scale < UNDERFLOW_LOG:
                spread = 2 * mp.mpf(width) * mp.fsum(_l1(sched.ks[n]) for n in range(m0, m + 1))
                dropped += float(mp.exp(mp.log(8) + scale + spread))
                inner = rot
            else:
                G = _g_term(float(sched.phi[m]), float(sched.lam[m]), sched.ks[m], d, width)
                inner = G + rot
            if m >= 2:
                acc = inner.conjugate_const(_zmat(float(sched.z[m - 1])))
            else:
                acc = inner
    return acc, dropped


def leading_term(sched: AkSchedule, j: int) -> TrigPolySl2:
    """F_j as a trigonometric polynomial on the torus."""
    sched._check_level(j)
    d = sched.freq.d
    w = sched.r
    with mp.workdps(sched.dps):
        if j == 0:
            return TrigPolySl2.constant(float(sched.b01 - 1) * sl2core.J, d, w)
        G = _g_term(float(sched.phi[j]), float(sched.lam[j]), sched.ks[j], d, w)
        if j == 1:
            return G
        return G.conjugate_const(_zmat(float(sched.z[j - 1])))


@dataclass
class Assembly:
    perturbation: TrigPolySl2
    majorant: float
    dropped_majorant: float


def assemble(sched: AkSchedule, depth: int | None = None) -> Assembly:
    J = sched.depth if depth is None else depth
    if J > sched.depth:
        raise DepthExceeded(f"depth {J} beyond schedule depth {sched.depth}", depth=J)
    d = sched.freq.d
    w = sched.r
    with mp.workdps(sched.dps):
        F0 = TrigPolySl2.constant(float(sched.b01 - 1) * sl2core.J, d, w)
    if J == 0:
        P = F0
        dropped = 0.0
    else:
        P1, dropped = _tail_from(sched, 1, J, w)
        P = F0 + qpfun.rotation_conjugate(P1, sched.ks[0], +1)
        with mp.workdps(sched.dps):
            dropped *= float(mp.exp(2 * w * _l1(sched.ks[0])))
    return Assembly(P, P.majorant_norm(w) + dropped, dropped)


def assemble_perturbation(sched: AkSchedule, depth: int | None = None, check_budget: bool = True) -> TrigPolySl2:
    """P = F_0 + R_{k0} (F_1 + R_{k1} (F_2 + ...) R^{-1}) R^{-1}, truncated at
    the schedule depth.  Raises NormBudgetExceeded unless ||P||_r < eps."""
    a = assemble(sched, depth)
    if check_budget and not a.majorant < sched.eps:
        raise NormBudgetExceeded(
            f"||P||_r = {a.majorant:.6g} is not below eps = {sched.eps:g}",
            majorant=a.majorant,
            eps=sched.eps,
        )
    return a.perturbation


# ---------------------------------------------------------------------------
# conjugation chain


class ConjugationChain:
    """U_j(t) conjugating J + P to L_j + P_{j+1}.

    All phases <k> t are reduced modulo 2 pi in mp before any binary64 work,
    so the chain can be evaluated at times far beyond 2^53.
    """

    def __init__(self, sched: AkSchedule, j: int):
        sched._check_level(j)
        self.sched = sched
        self.j = j
        w = sched.r
        self.P = assemble_perturbation(sched, check_budget=False)
        if j == 0:
            self.tail = self.P
        elif j >= sched.depth:
            self.tail = TrigPolySl2.zero(sched.freq.d, w)
        else:
            tail, _ = _tail_from(sched, j + 1, sched.depth, w)
            self.tail = tail
        self.L = sched.L_matrix(j)
        self._bracket_cache: dict[Key, object] = {}
        with mp.workdps(sched.dps):
            self._om = omega_mp(sched.freq)

    # speeds and stretches of the frames composing U_j
    def _frames(self) -> tuple[list, list]:
        s = self.sched
        speeds = [s.frequency(n) for n in range(self.j)]
        zs = [s.z[n] for n in range(1, self.j)]
        return speeds, zs

    def angle(self, k: Key, t) -> float:
        """<k, omega> t modulo 2 pi, as a binary64 angle."""
        with mp.workdps(self.sched.dps):
            b = self._bracket_cache.get(k)
            if b is None:
                b = bracket_mp(k, self._om)
                self._bracket_cache[k] = b
            a = b * mp.mpf(t)
            return float(a - mp.floor(a / (2 * mp.pi)) * 2 * mp.pi)

    def _angles(self, t) -> list[float]:
        speeds, _ = self._frames()
        with mp.workdps(self.sched.dps):
            tt = mp.mpf(t)
            out = []
            for v in speeds:
                a = v * tt
                out.append(float(a - mp.floor(a / (2 * mp.pi)) * 2 * mp.pi))
            return out

    def value(self, t) -> np.ndarray:
        if self.j == 0:
            return np.eye(2)
        ang = self._angles(t)
        _, zs = self._frames()
        U = sl2core.rotation(ang[0])
        for z, a in zip(zs, ang[1:]):
            U = U @ _zmat(float(z)) @ sl2core.rotation(a)
        return U

    def derivative(self, t) -> np.ndarray:
        if self.j == 0:
            return np.zeros((2, 2))
        ang = self._angles(t)
        speeds, zs = self._frames()
        factors = [sl2core.rotation(ang[0])]
        for z, a in zip(zs, ang[1:]):
            factors.append(_zmat(float(z)))
            factors.append(sl2core.rotation(a))
        rot_index = [0] + [2 * i for i in range(1, len(ang))]
        out = np.zeros((2, 2))
        for idx, v in zip(rot_index, speeds):
            M = np.eye(2)
            for i, F in enumerate(factors):
                M = M @ (float(v) * sl2core.J @ F if i == idx else F)
            out += M
        return out

    def A(self, t) -> np.ndarray:
        """J + P(omega t)."""
        return sl2core.J + self.P.eval_angles(lambda k: self.angle(k, t))

    def B(self, t) -> np.ndarray:
        """L_j + P_{j+1}(omega t)."""
        return self.L + self.tail.eval_angles(lambda k: self.angle(k, t))

    def residual(self, t) -> float:
        U = self.value(t)
        R = self.derivative(t) - self.A(t) @ U + U @ self.B(t)
        return sl2core.mat_norm(R)

    # exact matrices for growth probes
    def frame_mp(self, t, upto: int | None = None):
        """U_m(t) in mp for m = ``upto`` (default j)."""
        m = self.j if upto is None else upto
        s = self.sched
        with mp.workdps(s.dps):
            tt = mp.mpf(t)
            U = _rot_mp(s.b01 * tt)
            for n in range(1, m):
                U = U * _diag_mp(s.z[n]) * _rot_mp(s.brackets[n + 1] * tt)
            return U

    def flow_mp(self, t):
        """Cocycle of L_j seen in the original frame:
        U_j(t) exp(t L_j) U_j(0)^{-1} = U_{j+1}(t) U_{j+1}(0)^{-1}."""
        s = self.sched
        if self.j == 0:
            with mp.workdps(s.dps):
                return _rot_mp(mp.mpf(t))
        with mp.workdps(s.dps):
            tt = mp.mpf(t)
            Uj = self.frame_mp(tt)
            Uj0 = self.frame_mp(0)
            E = _diag_mp(s.z[self.j]) * _rot_mp(s.brackets[self.j + 1] * tt) * _diag_mp(1 / s.z[self.j])
            return Uj * E * mp.inverse(Uj0)

    def sup_norm_lower(self) -> float:
        """||U_j(0)|| (operator norm) = Z_j + 1/Z_j with Z_j = prod z_n."""
        with mp.workdps(self.sched.dps):
            Z = mp.fprod(self.sched.z[n] for n in range(1, self.j)) if self.j > 1 else mp.mpf(1)
            return float(max(Z, 1 / Z))


def _rot_mp(a):
    c, s = mp.cos(a), mp.sin(a)
    return mp.matrix([[c, s], [-s, c]])


def _diag_mp(z):
    return mp.matrix([[z, 0], [0, 1 / z]])


def conjugation_chain(sched: AkSchedule, j: int) -> ConjugationChain:
    return ConjugationChain(sched, j)


def mp_to_array(M) -> np.ndarray:
    return np.array([[float(M[0, 0]), float(M[0, 1])], [float(M[1, 0]), float(M[1, 1])]])
