"""Quantum evolution under y' = (J + P(omega t)) y and growth probes.

States evolve as psi(t) = M(Phi(t)) psi0, with Phi the classical fundamental
matrix.  Grid states go through the metaplectic engine; Hermite states with
integer s use the exact ladder-operator norms, which stay accurate for the
enormous matrices met at the spike times of an AK schedule.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from mpmath import mp

from . import akbuilder, metaengine, qpfun, sl2core, sobolev
from .akbuilder import AkSchedule, ConjugationChain
from .errors import DepthExceeded
from .metaengine import GridState
from .qpfun import QpSystem
from .sobolev import HermiteState

State = GridState | HermiteState

CSV_HEADER = "t,hs,l2,xs,ds"
UNITARITY_TOL = 1e-6


@dataclass(frozen=True)
class SeriesPoint:
    t: float
    hs: float
    l2: float
    xs: float
    ds: float


@dataclass
class RunRecord:
    schedule: str | None
    s: float
    probes: list[float]
    series: list[SeriesPoint]
    hs0: float
    l20: float
    final: GridState | None = None
    envelope: dict | None = None
    verdicts: dict = field(default_factory=dict)

    def l2_drift(self) -> float:
        if not self.series:
            return 0.0
        return max(abs(p.l2 - self.l20) for p in self.series) / self.l20

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for p in self.series:
            lines.append(",".join(f"{v:.17g}" for v in (p.t, p.hs, p.l2, p.xs, p.ds)))
        return "\n".join(lines) + "\n"

    def to_svg(self, marks: Sequence[float] = (), width: int = 640, height: int = 400) -> str:
        return series_svg([p.t for p in self.series], [p.hs for p in self.series], marks, width, height)


# ---------------------------------------------------------------------------
# norms of M(W) psi0


def _exact_s(s: float) -> bool:
    return float(s).is_integer() and s >= 0


def _point_hermite(t: float, W: np.ndarray, state: HermiteState, s: float) -> SeriesPoint:
    hs = sobolev.meta_hs_norm(W, state, int(s))
    l2 = sobolev.meta_hs_norm(W, state, 0)
    xs, ds = sobolev.meta_moment_norms(W, state, int(s))
    return SeriesPoint(float(t), hs, l2, xs, ds)


def _point_grid(t: float, W: np.ndarray, psi0: GridState, s: float, path: str) -> tuple[SeriesPoint, GridState]:
    psi = metaengine.apply_meta(W, psi0, path)
    hs = sobolev.hs_norm_grid(psi, s)
    xs, ds, _ = sobolev.aux_norms(psi, s)
    return SeriesPoint(float(t), hs, psi.norm(), xs, ds), psi


def _initial_norms(psi0: State, s: float) -> tuple[float, float]:
    if isinstance(psi0, HermiteState):
        return sobolev.hs_norm(psi0, s), psi0.norm()
    return sobolev.hs_norm_grid(psi0, s), psi0.norm()


# ---------------------------------------------------------------------------
# fundamental matrices


class ExactFlow:
    """Fundamental matrix of J + P for a schedule assembled to its full depth.

    At the deepest level the tail vanishes, so U_J(t) exp(t L_J) U_J(0)^{-1}
    is the exact cocycle; phases are reduced in multiprecision.
    """

    def __init__(self, sched: AkSchedule):
        self.sched = sched
        self.chain = ConjugationChain(sched, sched.depth)

    def matrix_mp(self, t):
        return self.chain.flow_mp(t)

    def __call__(self, t) -> np.ndarray:
        return akbuilder.mp_to_array(self.matrix_mp(t))


def _fundamentals(sys: QpSystem | AkSchedule, probes: Sequence[float], dt: float) -> list[np.ndarray]:
    if isinstance(sys, AkSchedule):
        flow = ExactFlow(sys)
        return [flow(t) for t in probes]
    return qpfun.integrate_path(sys, [float(t) for t in probes], dt)


def evolve_cocycle_lift(
    sys: QpSystem | AkSchedule,
    psi0: State,
    probes: Sequence[float],
    dt: float,
    s: float,
    path: str = "fast",
    workers: int = 4,
) -> RunRecord:
    """psi(t) = M(Phi(t)) psi0 at each probe time.

    ``sys`` may be an AkSchedule, in which case Phi is the exact cocycle of
    its assembled system and any probe time is admissible.
    """
    raw = list(probes)
    if any(b < a for a, b in zip(raw, raw[1:])):
        raise ValueError("probes must be sorted")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if isinstance(psi0, HermiteState) and not _exact_s(s):
        raise ValueError("Hermite states need a non-negative integer s")
    # exact flows take the raw (possibly multiprecision) times: rounding a
    # time near 1e94 to binary64 would scramble its phase
    mats = _fundamentals(sys, raw, dt)
    probes = [float(t) for t in raw]
    hs0, l20 = _initial_norms(psi0, s)
    final = None
    if isinstance(psi0, HermiteState):
        series = [_point_hermite(t, W, psi0, s) for t, W in zip(probes, mats)]
    else:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
            out = list(ex.map(lambda tw: _point_grid(tw[0], tw[1], psi0, s, path), zip(probes, mats)))
        series = [p for p, _ in out]
        final = out[-1][1] if out else psi0
    ref = sys.profile.spec() if isinstance(sys, AkSchedule) else None
    return RunRecord(ref, s, probes, series, hs0, l20, final)


def evolve_magnus(
    sys: QpSystem,
    psi0: GridState,
    t_end: float,
    dt: float,
    s: float,
    path: str = "fast",
) -> RunRecord:
    """Midpoint-frozen stepping: each step applies exp(-i h H_{L(t + h/2)})."""
    if dt <= 0 or t_end < 0:
        raise ValueError("need dt > 0 and t_end >= 0")
    limit = 1e-2 / max(sys.sup_norm_majorant(), 1.0)
    if dt > limit * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds 1e-2/||sys|| = {limit:.3g}")
    n = max(1, math.ceil(t_end / dt - 1e-9))
    h = t_end / n
    psi = psi0
    for i in range(n):
        L = sys.matrix((i + 0.5) * h)
        psi = metaengine.propagate_const(L, h, psi, path, check=False)
    metaengine._check_tails(psi)
    hs0, l20 = _initial_norms(psi0, s)
    xs, ds, _ = sobolev.aux_norms(psi, s)
    point = SeriesPoint(float(t_end), sobolev.hs_norm_grid(psi, s), psi.norm(), xs, ds)
    return RunRecord(None, s, [float(t_end)], [point], hs0, l20, psi)


@dataclass(frozen=True)
class MethodComparison:
    t_end: float
    dt: float
    distance: float
    distance_half: float

    @property
    def improvement(self) -> float:
        return self.distance / self.distance_half if self.distance_half > 0 else math.inf


def compare_methods(
    sys: QpSystem,
    psi0: GridState,
    t_end: float,
    dt: float = 1e-3,
    cocycle_dt: float = 1e-4,
    s: float = 0.0,
) -> MethodComparison:
    """Phase-aligned L2 distance between cocycle lift and Magnus stepping at
    dt and dt/2."""
    lift = evolve_cocycle_lift(sys, psi0, [t_end], cocycle_dt, s).final
    d1, _ = metaengine.phase_aligned_distance(lift, evolve_magnus(sys, psi0, t_end, dt, s).final)
    d2, _ = metaengine.phase_aligned_distance(lift, evolve_magnus(sys, psi0, t_end, dt / 2, s).final)
    return MethodComparison(t_end, dt, d1, d2)


# ---------------------------------------------------------------------------
# spike and return


@dataclass(frozen=True)
class LevelProbe:
    j: int
    T: float
    hs_T: float
    hs_4T: float
    log_f_T: float
    lower_target: float
    matrix_bound: float
    entry_bounds_ok: bool
    gamma_ratio: float
    remainder_log: float | None

    @property
    def spike_ratio(self) -> float:
        """||psi(T_j)||_{H^s} / f(T_j)."""
        return math.exp(math.log(self.hs_T) - self.log_f_T)

    @property
    def return_ratio(self) -> float:
        return self.hs_T / self.hs_4T

    def to_json_obj(self) -> dict:
        return {
            "j": self.j,
            "T": self.T,
            "hs_T": self.hs_T,
            "hs_4T": self.hs_4T,
            "log_f_T": self.log_f_T,
            "spike_ratio": self.spike_ratio,
            "return_ratio": self.return_ratio,
            "lower_target": self.lower_target,
            "matrix_bound": self.matrix_bound,
            "matrix_bound_ok": self.matrix_bound < 8,
            "entry_bounds_ok": self.entry_bounds_ok,
            "gamma_ratio": self.gamma_ratio,
            "remainder_log": self.remainder_log,
        }


@dataclass
class OscillationReport:
    s: float
    levels: list[LevelProbe]

    def to_json_obj(self) -> dict:
        return {"s": self.s, "levels": [p.to_json_obj() for p in self.levels]}


def _op_norm_mp(M) -> float:
    A = akbuilder.mp_to_array(M)
    return float(np.linalg.norm(A, 2))


def _entry_bounds(U, Z) -> bool:
    """|U_11|, |U_21| < 5/4 Z and |U_12|, |U_22| < 5/4 / Z."""
    q = mp.mpf(5) / 4
    return bool(
        abs(U[0, 0]) < q * Z and abs(U[1, 0]) < q * Z and abs(U[0, 1]) < q / Z and abs(U[1, 1]) < q / Z
    )


def _remainder_log(sched: AkSchedule, j: int) -> float | None:
    """ln of <k_{j+2}>^{g(T_{j+1})/4}, the Duhamel remainder scale; None when
    the tail beyond level j vanishes identically."""
    if j >= sched.depth:
        return None
    with mp.workdps(sched.dps):
        return float(sched.g[j + 1] / 4 * mp.log(abs(sched.brackets[j + 2])))


def probe_oscillation(
    sched: AkSchedule,
    psi0: HermiteState | None = None,
    s: int = 1,
    levels: Sequence[int] | None = None,
) -> OscillationReport:
    """Spike at T_j and return at 4T_j through the single matrix
    W = U_j(t) exp(t L_j) U_j(0)^{-1}."""
    if sched.depth < 1:
        raise DepthExceeded("oscillation probes need depth >= 1", depth=sched.depth)
    levels = list(range(1, sched.depth + 1)) if levels is None else list(levels)
    for j in levels:
        if not 1 <= j <= sched.depth:
            raise DepthExceeded(f"level {j} outside 1..{sched.depth}", j=j, depth=sched.depth)
    psi0 = sobolev.basis_state(0) if psi0 is None else psi0
    _, ds0 = sobolev.meta_moment_norms(sl2core.I2, psi0, s)
    gam0 = sobolev.hermite_gamma_s(psi0, s)
    out = []
    for j in levels:
        chain = ConjugationChain(sched, j)
        with mp.workdps(sched.dps):
            T = sched.T[j]
            W_T = chain.flow_mp(T)
            W_4T = chain.flow_mp(4 * T)
            U4 = chain.frame_mp(4 * T)
            Z = mp.fprod(sched.z[n] for n in range(1, j)) if j > 1 else mp.mpf(1)
            entry_ok = _entry_bounds(U4, Z)
            log_f = float(sched.profile.log_f(T))
            g = sched.g[j]
            lower = float(mp.exp((1 - mp.mpf(3) / 4 * g) * s * mp.log(T))) * ds0
            U0inv = akbuilder.mp_to_array(mp.inverse(chain.frame_mp(0)))
        hs_T = sobolev.meta_hs_norm(akbuilder.mp_to_array(W_T), psi0, s)
        hs_4T = sobolev.meta_hs_norm(akbuilder.mp_to_array(W_4T), psi0, s)
        hs_u = sobolev.meta_hs_norm(U0inv, psi0, s)
        _, ds_u = sobolev.meta_moment_norms(U0inv, psi0, s)
        gamma_ratio = (hs_u / ds_u) / gam0 if s > 0 else 1.0
        out.append(
            LevelProbe(
                j,
                float(T),
                hs_T,
                hs_4T,
                log_f,
                lower,
                _op_norm_mp(W_4T),
                entry_ok,
                gamma_ratio,
                _remainder_log(sched, j),
            )
        )
    return OscillationReport(float(s), out)


# ---------------------------------------------------------------------------
# envelope and upper-bound probes


@dataclass(frozen=True)
class EnvelopeResult:
    passed: bool
    margin: float  # min over probes of (allowed log - observed log)
    beta: float
    upsilon: float

    def to_json_obj(self) -> dict:
        return {"passed": self.passed, "margin": self.margin, "beta": self.beta, "upsilon": self.upsilon}


def envelope_check(run: RunRecord, beta: float, upsilon: float) -> EnvelopeResult:
    """log ||psi(t)||_{H^s} <= log(2 ||psi0||_{H^s}) + 4 beta upsilon t at every probe."""
    if not run.series:
        raise ValueError("empty run")
    base = math.log(2 * run.hs0)
    margins = [base + 4 * beta * upsilon * p.t - math.log(p.hs) for p in run.series]
    m = min(margins)
    run.envelope = {"beta": beta, "upsilon": upsilon, "margin": m}
    return EnvelopeResult(m >= 0, m, beta, upsilon)


@dataclass(frozen=True)
class UpperBoundReport:
    times: list[float]
    ratios: list[float]
    marked_times: list[float]
    marked_ratios: list[float]

    @property
    def decreasing(self) -> bool:
        r = self.marked_ratios
        return all(b < a for a, b in zip(r, r[1:]))

    def to_json_obj(self) -> dict:
        return {
            "times": self.times,
            "ratios": self.ratios,
            "marked_times": self.marked_times,
            "marked_ratios": self.marked_ratios,
            "decreasing": self.decreasing,
        }


def upper_bound_probe(kam_out, run: RunRecord, marks: Sequence[float] | None = None) -> UpperBoundReport:
    """||psi(t)||_{H^s} / t^s along the run, and along ``marks`` (default:
    the run's own probes, or 4 T_j when ``kam_out`` is an AkSchedule)."""
    s = run.s
    pts = [p for p in run.series if p.t > 0]
    times = [p.t for p in pts]
    ratios = [math.exp(math.log(p.hs) - s * math.log(p.t)) for p in pts]
    if marks is None and isinstance(kam_out, AkSchedule):
        marks = [float(4 * T) for T in kam_out.T]
    if marks is None:
        marks = times
    lookup = dict(zip(times, ratios))
    mt, mr = [], []
    for m in marks:
        hit = min(times, key=lambda t: abs(t - m) / max(m, 1.0)) if times else None
        if hit is not None and abs(hit - m) <= 1e-9 * max(m, 1.0):
            mt.append(hit)
            mr.append(lookup[hit])
    return UpperBoundReport(times, ratios, mt, mr)


def auto_probes(sched: AkSchedule) -> list:
    """0, then T_j and 4T_j for every level, sorted, as multiprecision
    numbers so exact flows see the true times."""
    with mp.workdps(sched.dps):
        ts = [mp.mpf(0)]
        for T in sched.T:
            ts += [T, 4 * T]
        return sorted(ts)


# ---------------------------------------------------------------------------
# SVG


def series_svg(ts: Sequence[float], ys: Sequence[float], marks: Sequence[float] = (), width: int = 640, height: int = 400) -> str:
    """Line plot of (t, y); both axes switch to log10 when the data spans
    more than three decades."""
    pad = 50
    ts = [float(t) for t in ts]
    ys = [float(y) for y in ys]

    def scale(vals):
        pos = [v for v in vals if v > 0]
        if pos and len(pos) == len(vals) and max(pos) / min(pos) > 1e3:
            return (lambda v: math.log10(v)), True
        return (lambda v: v), False

    fx, logx = scale([t for t in ts if t > 0] or [1.0])
    fy, logy = scale(ys or [1.0])
    px = [fx(t) if (t > 0 or not logx) else None for t in ts]
    py = [fy(y) for y in ys]
    pairs = [(a, b) for a, b in zip(px, py) if a is not None]
    xs = [a for a, _ in pairs] or [0.0, 1.0]
    yv = [b for _, b in pairs] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(yv), max(yv)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def X(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def Y(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for m in marks:
        m = float(m)
        if logx and m <= 0:
            continue
        v = fx(m)
        if x0 <= v <= x1:
            parts.append(f'<line x1="{X(v):.2f}" y1="{pad}" x2="{X(v):.2f}" y2="{height - pad}" stroke="gray" stroke-dasharray="4 3"/>')
    if pairs:
        pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in pairs)
        parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>')
    xl = "log10 t" if logx else "t"
    yl = "log10 hs" if logy else "hs"
    parts.append(f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">{xl}</text>')
    parts.append(f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})">{yl}</text>')
    parts.append(f'<text x="{pad}" y="{height - pad + 16}" font-size="10">{x0:.3g}</text>')
    parts.append(f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="end">{x1:.3g}</text>')
    parts.append(f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>')
    parts.append(f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
