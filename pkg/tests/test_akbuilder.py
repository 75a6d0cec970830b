import json
import math

import mpmath as mp
import numpy as np
import pytest

from oscillab import akbuilder, qpfun, sl2core
from oscillab.akbuilder import AkSchedule
from oscillab.errors import DepthExceeded, InfeasibleDepth, NormBudgetExceeded, SearchExhausted


@pytest.fixture(scope="module")
def sched2(golden):
    """Depth-2 relaxed schedule; the level-3 bracket sits near exp(-1e5)."""
    return akbuilder.build_schedule(golden, depth=2, r=1e-100)


def brute_force_k0(golden, K=10):
    """Smallest sup norm, then l1 norm, then lexicographic, with <k> in (3/4, 1)."""
    om = golden.omega
    best = None
    for a in range(-K, K + 1):
        for b in range(-K, K + 1):
            v = a * om[0] + b * om[1]
            if 0.75 < v < 1:
                key = (max(abs(a), abs(b)), abs(a) + abs(b), (a, b))
                best = key if best is None or key < best else best
    return best[2]


def test_search_k0k1(golden):
    k0, k1 = akbuilder.search_k0k1(golden, 30.0, 0.05)
    assert k0 == (2, -2) == brute_force_k0(golden)
    assert k1 == (-3, 5)
    assert golden.bracket(k0) == pytest.approx(0.7639320225002103, rel=1e-14)
    assert golden.bracket(k1) == pytest.approx(0.09016994374947424, rel=1e-13)


def test_search_joint_meets_budget(golden):
    k0, k1 = akbuilder.search_k0k1(golden, 30.0, 0.05, strategy="joint")
    om = akbuilder.omega_mp(golden)
    assert akbuilder.k0k1_lhs(k0, k1, om, 0.05) < 30.0 / 64
    assert 0.75 < golden.bracket(k0) < 1 and 0 < golden.bracket(k1) < 0.25


def test_search_exhausted(golden):
    with pytest.raises(SearchExhausted):
        akbuilder.search_k0k1(golden, 1e-30, 0.05, K_max=10)


def test_depth0(golden):
    s = akbuilder.build_schedule(golden, depth=0)
    assert s.depth == 0 and len(s.ks) == 2
    assert float(s.T[0]) == pytest.approx(9.1956018652677863, rel=1e-15)
    with mp.workdps(s.dps):
        assert abs(s.T[0] - 5 * mp.pi / (2 * s.b01)) < mp.mpf(10) ** (-s.dps + 5)
    rep = akbuilder.verify_schedule(s)
    assert rep.all_passed
    assert not [c for c in rep.checks if c.family == "lemma"]


def test_depth1_verifier(sched1):
    rep = akbuilder.verify_schedule(sched1)
    assert rep.all_passed
    lemma = rep.lemma_checks
    assert lemma and all(c.margin > 0 for c in lemma if c.required)
    assert rep.min_margin("lemma") > 0


def test_depth1_values(sched1):
    assert sched1.ks[:2] == ((2, -2), (-3, 5))
    assert float(sched1.T[0]) == pytest.approx(9.1956018652677863, rel=1e-15)
    assert float(sched1.b01) == pytest.approx(0.8541019662496847, rel=1e-14)


def test_sequence_definitions(sched1):
    s = sched1
    with mp.workdps(s.dps):
        assert mp.mpf(3) / 4 < s.brackets[0] < 1 and 0 < s.brackets[1] < mp.mpf(1) / 4
        tol = mp.mpf(10) ** (-s.dps + 10)
        for j in range(1, s.depth + 1):
            bk = s.brackets[j + 1]
            phi = bk ** (mp.mpf(3) / 4 * s.g[j])
            assert abs(s.phi[j] / phi - 1) < tol
            assert abs(s.lam[j] / mp.sqrt(phi**2 - bk**2) - 1) < tol
            assert abs(s.z[j] / mp.sqrt((phi + s.lam[j]) / bk) - 1) < tol
            # T_j lands on the lattice of every earlier frame
            assert abs(s.T[j] * s.b01 / (2 * mp.pi) - mp.nint(s.T[j] * s.b01 / (2 * mp.pi))) < tol * s.T[j]
            assert 0 < s.g[j] < 1


def test_faithful_depth3_infeasible(golden):
    with pytest.raises(InfeasibleDepth):
        akbuilder.build_schedule(golden, depth=3, mode="faithful")


def test_inflated_z_fails_seq_z0(sched1):
    bad = AkSchedule.derive(sched1.freq, sched1.ks, sched1.profile, sched1.eps, sched1.r, sched1.mode, sched1.decay, sched1.dps)
    bad.z[1] = bad.z[1] * 10
    rep = akbuilder.verify_schedule(bad)
    assert not rep.all_passed
    assert "seq_z0" in {c.name for c in rep.failures}


@pytest.mark.slow
def test_depth2_verifier(sched2):
    rep = akbuilder.verify_schedule(sched2)
    assert rep.all_passed
    # seq_z0 at j=2 clears by ~1e-119723 relative: positive, certified, below float resolution
    assert all(c.passed and c.certified for c in rep.checks if c.family == "lemma")
    names = {c.name for c in rep.checks}
    assert {"seq_z1", "seqest_3", "seq_z2"} <= names


@pytest.mark.slow
def test_depth2_invariants(sched2):
    rep = akbuilder.verify_schedule(sched2)
    for c in rep.checks:
        if c.name in ("seqest_2", "seq_z2", "g_range"):
            assert c.passed and c.margin > 0
    # sup_t ||U_j(t)|| grows with j and exceeds Z_j
    norms = [akbuilder.ConjugationChain(sched2, j).sup_norm_lower() for j in (1, 2)]
    assert norms[0] <= norms[1]
    with mp.workdps(sched2.dps):
        assert norms[1] >= float(sched2.z[1]) * (1 - 1e-12)


@pytest.mark.slow
def test_depth2_chain_residual(sched2, rng):
    # U_2 carries z_1 ~ 6e21, so binary64 cancellation is measured against the
    # size of the cancelling terms rather than in absolute terms
    for j in (1, 2):
        chain = akbuilder.ConjugationChain(sched2, j)
        T = 4 * sched2.T[j]
        worst = 0.0
        with mp.workdps(sched2.dps):
            for u in rng.uniform(0, 1, 20):
                t = T * mp.mpf(float(u))
                U, dU, A, B = chain.value(t), chain.derivative(t), chain.A(t), chain.B(t)
                scale = sl2core.mat_norm(dU) + sl2core.mat_norm(A @ U) + sl2core.mat_norm(U @ B)
                worst = max(worst, sl2core.mat_norm(dU - A @ U + U @ B) / scale)
        assert worst <= 1e-14


def test_leading_term_examples(sched1, rng):
    F0 = akbuilder.leading_term(sched1, 0)
    b = float(sched1.b01)
    assert np.allclose(F0.eval([0.0, 0.0]), [[0.0, -1 + b], [1 - b, 0.0]], atol=1e-15)
    F1 = akbuilder.leading_term(sched1, 1)
    k1 = sched1.ks[1]
    theta = np.array([k1[1], -k1[0]], dtype=float) * 0.37  # <k1, theta> = 0
    phi, lam = float(sched1.phi[1]), float(sched1.lam[1])
    expected = np.array([[0.0, phi + lam], [-phi + lam, 0.0]])
    # float theta leaves <k1, theta> ~ 1e-15, so the diagonal is ~ phi * 1e-15
    assert np.allclose(F1.eval(theta), expected, rtol=1e-12, atol=1e-12 * (phi + lam))
    assert set(F1.support()) == {(0, 0), tuple(2 * v for v in k1), tuple(-2 * v for v in k1)}
    for F in (F0, F1):
        for th in rng.uniform(0, 2 * math.pi, size=(100, 2)):
            assert abs(np.trace(F.eval(th))) <= 1e-14


def test_leading_term_depth_exceeded(sched1):
    with pytest.raises(DepthExceeded):
        akbuilder.leading_term(sched1, 2)


def test_assemble_depth0(sched1):
    P0 = akbuilder.assemble_perturbation(sched1, 0)
    F0 = akbuilder.leading_term(sched1, 0)
    assert P0.support() == F0.support()
    assert np.allclose(P0.coeff((0, 0)), F0.coeff((0, 0)))


def test_assemble_depth1(sched1, rng):
    P = akbuilder.assemble_perturbation(sched1)
    assert P.majorant_norm(sched1.r) < sched1.eps
    assert P.majorant_norm(sched1.r) == pytest.approx(0.2918, abs=1e-4)
    kk = tuple(2 * (a + b) for a, b in zip(*sched1.ks[:2]))
    assert set(P.support()) == {(0, 0), kk, tuple(-v for v in kk)}
    for th in rng.uniform(0, 2 * math.pi, size=(100, 2)):
        assert P.eval_imag_residue(th) <= 1e-12
        assert abs(np.trace(P.eval(th))) <= 1e-14
    # the rotation-conjugated series agrees with direct pointwise conjugation
    F1 = akbuilder.leading_term(sched1, 1)
    F0 = akbuilder.leading_term(sched1, 0)
    for th in rng.uniform(0, 2 * math.pi, size=(20, 2)):
        R = sl2core.rotation(float(np.dot(sched1.ks[0], th)))
        direct = F0.eval(th) + R @ F1.eval(th) @ sl2core.inv_sl2(R)
        assert np.abs(P.eval(th) - direct).max() <= 1e-14


def test_norm_budget(golden, sched1):
    tight = AkSchedule.derive(golden, sched1.ks, sched1.profile, 0.1, sched1.r, sched1.mode, sched1.decay, sched1.dps)
    with pytest.raises(NormBudgetExceeded):
        akbuilder.assemble_perturbation(tight)


def test_chain_level1(sched1, rng):
    chain = akbuilder.conjugation_chain(sched1, 1)
    for t in (0.0, 1.3, 17.0):
        assert np.allclose(chain.value(t), sl2core.rotation(float(sched1.b01) * t), atol=1e-14)
    phi, lam = sched1.phi[1], sched1.lam[1]
    assert np.allclose(chain.L, [[0, float(phi + lam)], [-float(phi - lam), 0]], rtol=1e-12, atol=0)
    scale = 1 + chain.P.majorant_norm()
    T = 4 * float(sched1.T[1])
    worst = max(chain.residual(t) for t in rng.uniform(0, T, 200))
    assert worst <= 1e-12 * scale
    for t in rng.uniform(0, T, 20):
        assert abs(sl2core.det(chain.value(t)) - 1) <= 1e-15


def test_chain_depth_exceeded(sched1):
    with pytest.raises(DepthExceeded):
        akbuilder.conjugation_chain(sched1, 2)


def test_json_round_trip(sched1, tmp_path):
    obj = json.loads(json.dumps(sched1.to_json_obj()))
    assert {"mode", "s", "eps", "r", "k", "T", "Xi", "phi", "lam", "z", "g"} <= set(obj)
    # magnitudes past exp(600) are stored as (sign, log)
    assert isinstance(obj["T"][1], list) or abs(math.log(obj["T"][1])) <= 600
    back = AkSchedule.from_json_obj(obj)
    assert back.ks == sched1.ks
    assert akbuilder.verify_schedule(back).lines() == akbuilder.verify_schedule(sched1).lines()


def test_json_tamper_detected(sched1):
    obj = json.loads(json.dumps(sched1.to_json_obj()))
    obj["z"][0] = obj["z"][0] * 2 if not isinstance(obj["z"][0], list) else [1, obj["z"][0][1] + 1]
    with pytest.raises(ValueError):
        AkSchedule.from_json_obj(obj)


def test_real_encoding():
    assert akbuilder.encode_real(2.5) == 2.5
    big = mp.mpf(10) ** 800
    enc = akbuilder.encode_real(big)
    assert enc[0] == 1 and enc[1] == pytest.approx(800 * math.log(10))
    assert akbuilder.decode_real(enc) == (1, enc[1])


def test_extended_precision_adds_digits(golden, monkeypatch):
    monkeypatch.setenv("OSCILLAB_PRECISION", "double")
    a = akbuilder.build_schedule(golden, depth=1)
    monkeypatch.setenv("OSCILLAB_PRECISION", "extended")
    b = akbuilder.build_schedule(golden, depth=1)
    assert b.dps > a.dps
    assert a.ks == b.ks


def test_growth_profiles():
    p = akbuilder.GrowthProfile.parse("power:0.25", 2.0)
    assert float(p.g(1e9)) == 0.25
    q = akbuilder.GrowthProfile.parse("loglog", 1.0)
    g = float(q.g(mp.mpf(10) ** 50))
    assert 0 < g < 1
    # t^{g(t)} grows without bound
    vals = [float(q.g(mp.mpf(10) ** e) * e * math.log(10)) for e in (50, 100, 400)]
    assert vals == sorted(vals)
