"""Quick invariant checks across all modules, used by ``oscillab selftest``."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import akbuilder, growthlab, kamengine, metaengine, qpfun, sl2core, sobolev

Check = tuple[str, bool, str]


def _sl2(rng: np.random.Generator) -> Check:
    worst = 0.0
    for _ in range(50):
        A = sl2core.random_sl2(rng)
        worst = max(worst, float(np.abs(sl2core.chain_product(sl2core.decompose(A)) - A).max()))
    return "sl2core.decompose", worst < 1e-10, f"max error {worst:.2e}"


def _homomorphism(rng: np.random.Generator) -> Check:
    N = 1024
    psi = metaengine.gaussian(1.0, N)
    worst = 0.0
    for _ in range(5):
        A = sl2core.random_sl2(rng, 1.5)
        B = sl2core.random_sl2(rng, 1.5)
        ab = metaengine.apply_meta(A @ B, psi)
        a_b = metaengine.apply_meta(A, metaengine.apply_meta(B, psi))
        d, _ = metaengine.sign_aligned_distance(ab, a_b)
        worst = max(worst, d)
    return "metaengine.homomorphism", worst < 1e-6, f"max distance {worst:.2e}"


def _mehler(rng: np.random.Generator) -> Check:
    N = 1024
    worst = 0.0
    for n in (0, 3, 7):
        h = metaengine.hermite(n, N)
        t = float(rng.uniform(0, 2 * math.pi))
        out = metaengine.propagate_const(sl2core.J, t, h)
        target = h.scaled(np.exp(-1j * t * (n + 0.5)))
        d, _ = metaengine.sign_aligned_distance(out, target)
        worst = max(worst, d)
    return "metaengine.eigenphase", worst < 1e-6, f"max distance {worst:.2e}"


def _chirp(rng: np.random.Generator) -> Check:
    ok = sobolev.chirp_coeffs(12).check_bounds()
    return "sobolev.chirp_table", bool(ok), "row bounds hold" if ok else "row bound violated"


def _cocycle(rng: np.random.Generator) -> Check:
    freq = qpfun.golden_frequency()
    F = qpfun.random_trigpoly(rng, 2, [(1, 0), (0, 1)], 0.2, 0.3)
    U = qpfun.integrate_cocycle(qpfun.QpSystem(freq, sl2core.J, F), 0.0, 5.0, 1e-3)
    drift = abs(np.linalg.det(U) - 1)
    return "qpfun.cocycle_det", drift < 1e-9, f"det drift {drift:.2e}"


def _schedule(rng: np.random.Generator) -> Check:
    sched = akbuilder.build_schedule(qpfun.golden_frequency(), depth=1)
    rep = akbuilder.verify_schedule(sched)
    chain = akbuilder.ConjugationChain(sched, 1)
    T1 = float(4 * sched.T[1])
    res = max(chain.residual(t) for t in rng.uniform(0, T1, 20))
    ok = rep.all_passed and res <= 1e-12 * (1 + chain.P.majorant_norm())
    return "akbuilder.depth1", ok, f"verifier {'pass' if rep.all_passed else 'FAIL'}, residual {res:.2e}"


def _kam(rng: np.random.Generator) -> Check:
    freq = qpfun.golden_frequency()
    F = qpfun.random_trigpoly(rng, 2, [(1, 0), (0, 1), (1, 1), (1, -1)], 1e-3, 0.5)
    A = np.array([[0.05, 0.5], [-0.41, -0.05]])  # rotation number away from <k>/2 on the support
    state = kamengine.KamState.start(qpfun.QpSystem(freq, A, F))
    eps0 = state.eps
    for _ in range(2):
        state = kamengine.kam_step(state).state
    ok = state.eps <= eps0**1.5
    return "kamengine.contraction", ok, f"{eps0:.2e} -> {state.eps:.2e}"


def _growth(rng: np.random.Generator) -> Check:
    sched = akbuilder.build_schedule(qpfun.golden_frequency(), depth=1)
    rep = growthlab.probe_oscillation(sched)
    p = rep.levels[0]
    ok = p.return_ratio >= 5 and p.matrix_bound < 8
    return "growthlab.spike_return", ok, f"ratio {p.return_ratio:.3e}, bound {p.matrix_bound:.3f}"


CHECKS: list[Callable[[np.random.Generator], Check]] = [
    _sl2,
    _homomorphism,
    _mehler,
    _chirp,
    _cocycle,
    _schedule,
    _kam,
    _growth,
]


def run_all(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for fn in CHECKS:
        try:
            out.append(fn(rng))
        except Exception as exc:  # report, keep going
            out.append((fn.__name__.lstrip("_"), False, f"{type(exc).__name__}: {exc}"))
    return out
