import math

import numpy as np
import pytest
from mpmath import mp

from oscillab import akbuilder, growthlab as gl, metaengine as me, qpfun, sl2core, sobolev
from oscillab.errors import DepthExceeded
from oscillab.qpfun import QpSystem, TrigPolySl2

L_ELL = np.array([[0.1, 1.0], [-0.5, -0.1]])


def free_system(golden, L=sl2core.J):
    return QpSystem(golden, np.asarray(L, dtype=float), TrigPolySl2.zero(2, 0.5))


def test_free_flat_norm(golden):
    psi0 = me.gaussian(0.7 + 0.2j, 1024)
    run = gl.evolve_cocycle_lift(free_system(golden), psi0, [0.0, 0.4, 1.7, 3.9, 10.0], 1e-3, 2.0)
    for p in run.series:
        assert p.hs == pytest.approx(run.hs0, rel=1e-8)
    assert run.l2_drift() <= 1e-6


def test_constant_elliptic_period(golden):
    rho = math.sqrt(sl2core.det(L_ELL))
    probes = [0.3, 1.1, 0.3 + math.pi / rho, 0.3 + 2 * math.pi / rho]
    run = gl.evolve_cocycle_lift(free_system(golden, L_ELL), me.gaussian(1.0, 1024), probes, 1e-4, 1.0)
    hs = [p.hs for p in run.series]
    assert hs[2] == pytest.approx(hs[0], rel=1e-6)
    assert hs[3] == pytest.approx(hs[0], rel=1e-6)
    assert abs(hs[1] - hs[0]) > 1e-3  # the norm does move in between
    assert run.l2_drift() <= 1e-6


def test_hermite_and_grid_paths_agree(golden):
    probes = [0.0, 0.8, 2.5]
    a = gl.evolve_cocycle_lift(free_system(golden, L_ELL), sobolev.basis_state(0), probes, 1e-4, 1)
    b = gl.evolve_cocycle_lift(free_system(golden, L_ELL), me.gaussian(1.0, 1024), probes, 1e-4, 1)
    for p, q in zip(a.series, b.series):
        assert p.hs == pytest.approx(q.hs, rel=1e-8)


def test_probe_validation(golden):
    with pytest.raises(ValueError):
        gl.evolve_cocycle_lift(free_system(golden), me.gaussian(), [1.0, 0.5], 1e-3, 1)
    with pytest.raises(ValueError):
        gl.evolve_cocycle_lift(free_system(golden), me.gaussian(), [1.0], 0.0, 1)
    with pytest.raises(ValueError):
        gl.evolve_cocycle_lift(free_system(golden), sobolev.basis_state(0), [1.0], 1e-3, 0.5)


def test_ak_spike_oracle(sched1):
    """At T_1 the flow is L_1 / rho, so ||M(W) h_0||_{H^1} = sqrt((z^4 + z^-4) / 2)."""
    run = gl.evolve_cocycle_lift(sched1, sobolev.basis_state(0), gl.auto_probes(sched1), 1e-3, 1)
    by_t = {p.t: p.hs for p in run.series}
    with mp.workdps(sched1.dps):
        z = sched1.z[1]
        oracle = float(mp.sqrt((z**4 + z**-4) / 2))
        T1 = float(sched1.T[1])
    assert by_t[T1] == pytest.approx(oracle, rel=1e-9)
    assert by_t[T1] == pytest.approx(4.18905503982e57, rel=1e-10)
    assert by_t[4 * T1] == pytest.approx(1.0, abs=1e-9)
    assert run.l2_drift() <= 1e-6


def test_ak_spike_lower_bound(sched1):
    rep = gl.probe_oscillation(sched1)
    (lvl,) = rep.levels
    # ||psi(T_1)|| >= c T_1^{(1 - 3g/4) s} ||D psi0|| with c = 1/2
    assert lvl.hs_T >= 0.5 * lvl.lower_target
    assert lvl.spike_ratio >= 1
    assert lvl.matrix_bound < 8
    assert lvl.entry_bounds_ok
    assert lvl.return_ratio > 1e50
    assert lvl.gamma_ratio == pytest.approx(1.0)  # U_1(0) is a rotation at depth 1


def test_probe_depth_errors(sched1):
    with pytest.raises(DepthExceeded):
        gl.probe_oscillation(sched1, levels=[2])
    with pytest.raises(DepthExceeded):
        gl.probe_oscillation(akbuilder.build_schedule(sched1.freq, depth=0))


def test_magnus_free_matches_lift(golden):
    sys = free_system(golden, L_ELL)
    psi0 = me.gaussian(1.0, 512)
    lift = gl.evolve_cocycle_lift(sys, psi0, [2.0], 1e-4, 0).final
    mag = gl.evolve_magnus(sys, psi0, 2.0, 1e-3, 0).final
    d, _ = me.phase_aligned_distance(lift, mag)
    assert d <= 1e-8


def test_magnus_ak_close_to_lift(golden, sched1):
    sys = QpSystem(golden, sl2core.J, akbuilder.assemble_perturbation(sched1))
    cmp = gl.compare_methods(sys, me.gaussian(1.0, 512), 2.0, 1e-3)
    assert cmp.distance <= 1e-4


def test_magnus_dt_limit(golden):
    with pytest.raises(ValueError):
        gl.evolve_magnus(free_system(golden), me.gaussian(1.0, 256), 1.0, 0.1, 0)


def test_envelope_free_passes(golden):
    run = gl.evolve_cocycle_lift(free_system(golden), me.gaussian(1.0, 1024), [0.0, 1.0, 5.0], 1e-3, 1.0)
    res = gl.envelope_check(run, 1.0, sobolev.estimate_upsilon(1.0))
    assert res.passed
    assert res.margin == pytest.approx(math.log(2), rel=1e-8)


def test_envelope_ak_passes(golden, sched1):
    run = gl.evolve_cocycle_lift(sched1, sobolev.basis_state(0), gl.auto_probes(sched1), 1e-3, 1)
    beta = QpSystem(golden, sl2core.J, akbuilder.assemble_perturbation(sched1)).sup_norm_majorant()
    assert gl.envelope_check(run, beta, sobolev.estimate_upsilon(1.0)).passed


def test_envelope_synthetic_violation():
    pts = [gl.SeriesPoint(0.0, 1.0, 1.0, 1.0, 1.0), gl.SeriesPoint(1.0, 100.0, 1.0, 1.0, 1.0)]
    run = gl.RunRecord(None, 1.0, [0.0, 1.0], pts, 1.0, 1.0)
    res = gl.envelope_check(run, 0.1, 1.0)
    assert not res.passed and res.margin < 0
    with pytest.raises(ValueError):
        gl.envelope_check(gl.RunRecord(None, 1.0, [], [], 1.0, 1.0), 1.0, 1.0)


def test_upper_bound_free_decreasing(golden):
    run = gl.evolve_cocycle_lift(free_system(golden), me.gaussian(1.0, 1024), [1.0, 2.0, 5.0, 9.0], 1e-3, 1.0)
    rep = gl.upper_bound_probe(None, run)
    assert rep.decreasing
    assert rep.ratios == pytest.approx([run.hs0 / t for t in (1.0, 2.0, 5.0, 9.0)], rel=1e-8)


def test_upper_bound_ak_marks(sched1):
    run = gl.evolve_cocycle_lift(sched1, sobolev.basis_state(0), gl.auto_probes(sched1), 1e-3, 1)
    rep = gl.upper_bound_probe(sched1, run)
    assert len(rep.marked_ratios) == 2
    assert rep.marked_ratios[1] < rep.marked_ratios[0]


def test_upper_bound_elliptic_tends_to_zero(golden):
    ts = [1.0, 10.0, 100.0, 1000.0]
    run = gl.evolve_cocycle_lift(free_system(golden, L_ELL), sobolev.basis_state(0), ts, 1e-3, 1)
    rep = gl.upper_bound_probe(None, run)
    assert rep.ratios[-1] < 1e-2 * rep.ratios[0]


def test_csv_format(golden):
    run = gl.evolve_cocycle_lift(free_system(golden), me.gaussian(1.0, 256), [0.0, 1.0 / 3], 1e-3, 1.0)
    lines = run.to_csv().splitlines()
    assert lines[0] == "t,hs,l2,xs,ds"
    assert len(lines) == 3
    row = lines[2].split(",")
    assert row[0] == "0.33333333333333331"
    assert all(float(v) >= 0 for v in row)


def test_svg_has_marks(sched1):
    run = gl.evolve_cocycle_lift(sched1, sobolev.basis_state(0), gl.auto_probes(sched1), 1e-3, 1)
    svg = run.to_svg(marks=[float(T) for T in sched1.T])
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert "<polyline" in svg or "<path" in svg
