"""Acceptance suite: one pass/fail verdict line per criterion, echoed in
the terminal summary by the conftest hook.

Criterion 9 needs externally published measurement datasets and is skipped
unless QKDRATES_DATA_DIR points at a directory holding overlap_d4.json and
mub_d3.json in the counts schema of qkdrates.bayes.
"""

import os
import time

import numpy as np
import pytest
from scipy import stats

from qkdrates import bayes
from qkdrates import entropysdp as es
from qkdrates.bases import approximate_mubs, mub_set
from qkdrates.qcore import subspace_key_rate, tomographic_key_rate
from qkdrates.quadrature import gauss_radau

VERDICTS = []


def report(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    VERDICTS.append(line)
    print(line)


def rate_for(d, v, m, **proto_kw):
    prob = es.build_mub_protocol(d, v, mub_set(d), **proto_kw)
    return es.compute_rate(es.EntropyProblem(prob, gauss_radau(m)))


def test_criterion_1_quadrature_exactness():
    t0 = time.time()
    worst = 0.0
    endpoint_ok = True
    for m in range(1, 21):
        rule = gauss_radau(m)
        endpoint_ok &= abs(rule.t[-1] - 1.0) < 1e-12
        endpoint_ok &= abs(rule.w[-1] - 1.0 / m**2) < 1e-10
        for j in range(2 * m - 1):
            err = abs(rule.t**j @ rule.w - 1.0 / (j + 1))
            worst = max(worst, err)
    dt = time.time() - t0
    ok = worst < 1e-10 and endpoint_ok and dt < 1.0
    report(1, ok, f"monomial error {worst:.2e}, endpoint node/weight exact, {dt:.2f}s")
    assert worst < 1e-10
    assert endpoint_ok
    assert dt < 1.0


def test_criterion_2_isotropic_rates_match_closed_form():
    t0 = time.time()
    results = []
    ok = True
    for d, vs in ((2, (0.85, 0.9, 0.95, 1.0)), (4, (0.95, 1.0))):
        for v in vs:
            exact = tomographic_key_rate(v, d)
            res = rate_for(d, v, 8)
            inside = exact - 5e-3 <= res.rate <= exact + 1e-4
            ok &= inside
            results.append(f"d={d} v={v:g} gap {res.rate - exact:+.2e}")
    dt = time.time() - t0
    report(2, ok, f"m=8 vs closed form: {'; '.join(results)} ({dt:.0f}s)")
    assert ok, results


def test_criterion_3_subspace_rates_match_closed_form():
    t0 = time.time()
    ok = True
    gaps = []
    for v in (0.7, 0.9):
        exact = subspace_key_rate(v, 2, 4)
        prob = es.build_subspace_protocol(4, 2, v, mub_set(2))
        res = es.compute_rate(es.EntropyProblem(prob, gauss_radau(8)))
        ok &= abs(res.rate - exact) <= 5e-3
        gaps.append(f"v={v:g} gap {res.rate - exact:+.2e}")
    dt = time.time() - t0
    report(3, ok, f"d=4 k=2 m=8: {'; '.join(gaps)} ({dt:.0f}s)")
    assert ok, gaps


def two_constraint_protocol(x):
    z0 = np.diag([1.0, 0.0])
    z1 = np.diag([0.0, 1.0])
    plus = np.full((2, 2), 0.5)
    minus = np.array([[0.5, -0.5], [-0.5, 0.5]])
    f0 = np.kron(z0, z0) + np.kron(z1, z1)
    f1 = np.kron(plus, plus) + np.kron(minus, minus)
    return es.ProtocolInstance(
        d=2, key_ops=(z0, z1), constraint_ops=(f0, f1), freqs=(1.0, x),
        label="pinned", key_joint=np.diag([0.5, 0.5]))


def test_criterion_4_facial_reduction_scenario():
    t0 = time.time()
    p85 = two_constraint_protocol(0.85)
    _, v85 = es.strict_feasibility_check(p85)
    dim85 = None if v85 is None else v85.shape[1]
    reduced = es.compute_rate(es.EntropyProblem(p85, gauss_radau(4)))
    plain = es.compute_rate(es.EntropyProblem(
        p85, gauss_radau(4), options=es.SolveOptions(facial="off")))
    agree = abs(reduced.rate - plain.rate)

    p1 = two_constraint_protocol(1.0)
    _, v1 = es.strict_feasibility_check(p1)
    dim1 = None if v1 is None else v1.shape[1]
    unit = es.compute_rate(es.EntropyProblem(p1, gauss_radau(4)))
    dt = time.time() - t0
    ok = dim85 == 2 and agree <= 1e-5 and dim1 == 1 and abs(unit.rate - 1.0) <= 1e-4
    report(4, ok, f"x=0.85 support {dim85}, reduced/plain diff {agree:.2e}; "
                  f"x=1 support {dim1}, rate {unit.rate:.6f} ({dt:.1f}s)")
    assert dim85 == 2 and dim1 == 1
    assert agree <= 1e-5
    assert abs(unit.rate - 1.0) <= 1e-4
    assert dt < 10.0


def test_criterion_5_symmetrization_equivalence():
    t0 = time.time()
    prob = es.build_mub_protocol(3, 0.9, mub_set(3), full_data=False)
    ep = es.EntropyProblem(prob, gauss_radau(4))
    pi = [1, 2, 0]
    u = np.zeros((3, 3))
    u[pi, range(3)] = 1.0
    sym = es.apply_permutation_symmetry(ep, pi, u.conj())
    perm_diff = abs(es.compute_rate(sym).rate - es.compute_rate(ep).rate)

    real_prob = es.EntropyProblem(two_constraint_protocol(0.85), gauss_radau(4))
    flag, lifted = es.apply_real_symmetry(real_prob)
    r_real = es.compute_rate(lifted)
    r_cplx = es.compute_rate(es.EntropyProblem(
        two_constraint_protocol(0.85), gauss_radau(4),
        options=es.SolveOptions(real_mode="off", conjugation="off")))
    real_diff = abs(r_real.rate - r_cplx.rate)
    dt = time.time() - t0
    ok = perm_diff <= 1e-5 and flag and real_diff <= 1e-6 and dt < 60.0
    report(5, ok, f"permutation diff {perm_diff:.2e}; real-vs-complex diff "
                  f"{real_diff:.2e} ({dt:.0f}s)")
    assert perm_diff <= 1e-5
    assert flag and real_diff <= 1e-6
    assert dt < 60.0


def test_criterion_6_attack_reconstruction():
    t0 = time.time()
    ok = True
    parts = []
    for v in (0.9, 1.0):
        res = es.compute_rate(es.EntropyProblem(
            es.build_mub_protocol(2, v, mub_set(2)), gauss_radau(4)))
        atk = es.reconstruct_attack(res.problem, res.solution)
        obj_err = abs(atk.objective - res.H_AE_bound)
        good = (atk.residual_max <= 1e-7 and obj_err <= 1e-6
                and atk.h_ae_exact >= res.H_AE_bound - 1e-6)
        ok &= good
        parts.append(f"v={v:g} residual {atk.residual_max:.1e} "
                     f"obj err {obj_err:.1e} exact-bound "
                     f"{atk.h_ae_exact - res.H_AE_bound:+.1e}")
    dt = time.time() - t0
    ok &= dt < 30.0
    report(6, ok, f"{'; '.join(parts)} ({dt:.0f}s)")
    assert ok, parts
    assert dt < 30.0


def test_criterion_7_split_bound_below_joint():
    t0 = time.time()
    ok = True
    parts = []
    for m in (2, 4, 8):
        ep = es.EntropyProblem(es.build_mub_protocol(2, 0.8, mub_set(2)),
                               gauss_radau(m))
        split = es.split_lower_bound(ep)
        joint = es.compute_rate(ep).H_AE_bound
        ok &= split <= joint + 1e-6
        parts.append(f"m={m} split-joint {split - joint:+.1e}")
    dt = time.time() - t0
    ok &= dt < 60.0
    report(7, ok, f"d=2 v=0.8: {'; '.join(parts)} ({dt:.0f}s)")
    assert ok, parts
    assert dt < 60.0


def test_criterion_8_bayes_calibration():
    t0 = time.time()
    # stubbed compatibility: the radius must reproduce the Gaussian quantile
    ds = bayes.CountsDataset(tuple(
        bayes.SettingCounts(f"s{i}", (2 * i, 2 * i + 1), np.array([60, 40]))
        for i in range(3)))
    reg = bayes.calibrate_region(ds, None, alpha=0.05, n_samples=20000,
                                 seed=7, compatible=lambda x: True)
    target = 7.814727903251179
    # binomial mass error propagated to the chi^2 scale through the density
    se = np.sqrt(0.05 * 0.95 / 20000) / stats.chi2.pdf(target, 3)
    chi_ok = abs(reg.chi**2 - target) <= 3 * se

    # coverage: the calibrated region contains the true frequencies
    d, v, shots = 2, 0.9, 10000
    proto = es.build_mub_protocol(d, None, mub_set(d))
    block = np.array([v * (i == j) / d + (1 - v) / d**2
                      for i in range(d) for j in range(d)])
    truth = np.concatenate([block[:-1]] * 3)
    hits = 0
    for rep in range(100):
        data = bayes.simulate_mub_counts(d, v, mub_set(d), proto, shots,
                                         seed=5000 + rep)
        r = bayes.calibrate_region(data, proto, alpha=0.1, n_samples=1000,
                                   seed=rep)
        diff = truth - r.f
        dist = float(np.sqrt(diff @ np.linalg.pinv(r.sigma) @ diff))
        hits += dist <= r.chi
    dt = time.time() - t0
    ok = chi_ok and hits >= 85
    report(8, ok, f"stub chi^2 {reg.chi**2:.4f} vs {target:.4f} "
                  f"(3 SE = {3 * se:.4f}); coverage {hits}/100 ({dt:.0f}s)")
    assert chi_ok
    assert hits >= 85


@pytest.mark.skipif("QKDRATES_DATA_DIR" not in os.environ,
                    reason="external reference datasets not provided "
                           "(set QKDRATES_DATA_DIR)")
def test_criterion_9_published_datasets():
    base = os.environ["QKDRATES_DATA_DIR"]
    t0 = time.time()
    results = {}
    for fname, protocol, d, expect in (
        ("overlap_d4.json", "overlap", 4, 0.4038),
        ("mub_d3.json", "mub", 3, 1.3310),
    ):
        data = bayes.load_counts(os.path.join(base, fname))
        if protocol == "overlap":
            proto = es.build_overlap_protocol(d, None)
        else:
            proto = es.build_mub_protocol(d, None, mub_set(d))
        reg = bayes.calibrate_region(data, proto, alpha=0.05,
                                     n_samples=20000, seed=0)
        res = es.compute_rate(es.EntropyProblem(proto, gauss_radau(8),
                                                region=reg))
        results[fname] = (res.rate, expect)
    dt = time.time() - t0
    ok = all(abs(rate - expect) <= 0.02 for rate, expect in results.values())
    detail = "; ".join(f"{k}: {rate:.4f} vs {expect:.4f}"
                       for k, (rate, expect) in results.items())
    report(9, ok, f"{detail} ({dt:.0f}s)")
    assert ok, results


def test_criterion_10_mub_properties():
    t0 = time.time()
    worst = 0.0
    for d in (2, 3, 4, 5, 7, 8):
        bs = mub_set(d)
        for a in range(bs.n):
            for b in range(a + 1, bs.n):
                g = np.abs(bs.unitaries[a].conj().T @ bs.unitaries[b]) ** 2
                worst = max(worst, np.abs(g - 1.0 / d).max())
    overlap_ok = worst < 1e-9

    _, objective = approximate_mubs(6, 7, restarts=20, seed=1)
    d6_ok = objective < 1e-3
    dt = time.time() - t0
    ok = overlap_ok and d6_ok and dt < 60.0
    report(10, ok, f"cross-overlap error {worst:.1e}; d=6 n=7 objective "
                   f"{objective:.3e} after 20 restarts ({dt:.0f}s)")
    assert overlap_ok
    assert dt < 60.0
    # the d=6 search plateaus near 1.5e-2 from every tested start; the
    # 1e-3 target appears unreachable for a 7-basis set in dimension 6
    assert d6_ok, f"best objective {objective:.3e} is not below 1e-3"
