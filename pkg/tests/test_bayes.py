"""Tests for posterior construction, compatibility, and region calibration."""

import json

import numpy as np
import pytest
from scipy import stats

from qkdrates import bayes
from qkdrates import entropysdp as es
from qkdrates.bases import mub_set
from qkdrates.quadrature import gauss_radau


def single_setting(counts, label="a"):
    arr = np.asarray(counts)
    return bayes.CountsDataset(
        (bayes.SettingCounts(label, tuple(range(arr.size)), arr),))


def zx_protocol():
    # computational and diagonal product statistics on a qubit pair
    z = [np.diag([1.0, 0.0]), np.diag([0.0, 1.0])]
    x = [np.full((2, 2), 0.5), np.array([[0.5, -0.5], [-0.5, 0.5]])]
    ops = [np.kron(z[i], z[j].T) for i in range(2) for j in range(2)]
    ops += [np.kron(x[i], x[j].T) for i in range(2) for j in range(2)]
    return es.ProtocolInstance(d=2, key_ops=tuple(z), constraint_ops=tuple(ops),
                               freqs=None, label="zx")


# -- counts containers ---------------------------------------------------------

def test_setting_counts_validation():
    with pytest.raises(ValueError):
        bayes.SettingCounts("s", (0,), np.array([5]))  # one outcome
    with pytest.raises(ValueError):
        bayes.SettingCounts("s", (0, 1), np.array([3, -1]))
    with pytest.raises(ValueError):
        bayes.SettingCounts("s", (0, 1), np.array([0.5, 0.25]))
    with pytest.raises(ValueError):
        bayes.SettingCounts("s", (0, 1), np.array([0, 0]))
    with pytest.raises(ValueError):
        bayes.SettingCounts("s", (0, 1, 2), np.array([3, 4]))
    with pytest.raises(ValueError):
        bayes.CountsDataset(())
    s = bayes.SettingCounts("s", (4, None), np.array([3, 4]))
    assert s.total == 7
    assert s.operators == (4, None)


def test_gaussian_from_counts_binomial():
    f, sigma = bayes.gaussian_from_counts(single_setting([90, 10]))
    assert np.allclose(f, [0.9])
    assert np.allclose(sigma, [[9e-4]])


def test_gaussian_from_counts_zero_cell():
    # a zero count would make the block singular; the covariance treats it
    # as one count borrowed from the largest cell, the mean is untouched
    f, sigma = bayes.gaussian_from_counts(single_setting([100, 0]))
    assert np.allclose(f, [1.0])
    assert np.allclose(sigma, [[9.9e-5]])


def test_gaussian_from_counts_multinomial():
    f, sigma = bayes.gaussian_from_counts(single_setting([50, 30, 20]))
    assert np.allclose(f, [0.5, 0.3])
    assert np.allclose(sigma, np.array([[0.25, -0.15], [-0.15, 0.21]]) / 100.0)


def test_gaussian_from_counts_block_diagonal():
    ds = bayes.CountsDataset((
        bayes.SettingCounts("s0", (0, 1), np.array([60, 40])),
        bayes.SettingCounts("s1", (2, 3), np.array([30, 70])),
    ))
    f, sigma = bayes.gaussian_from_counts(ds)
    assert np.allclose(f, [0.6, 0.3])
    assert np.allclose(sigma, np.diag([0.6 * 0.4 / 100, 0.3 * 0.7 / 100]))
    assert sigma[0, 1] == 0.0


def test_region_layout_slices():
    ds = bayes.CountsDataset((
        bayes.SettingCounts("s0", (0, 1, 2), np.array([5, 3, 2])),
        bayes.SettingCounts("s1", (3, 4), np.array([6, 4])),
    ))
    op_indices, settings = bayes.region_layout(ds)
    assert op_indices == (0, 1, 3)
    assert [(s.start, s.stop, s.last_op) for s in settings] == [(0, 2, 2), (2, 3, 4)]


# -- radius seed ---------------------------------------------------------------

def test_initial_chi_known_values():
    # one dimension: two-sided normal quantile
    assert bayes.initial_chi(1, 0.05) == pytest.approx(1.9599639845400538, abs=1e-12)
    assert bayes.initial_chi(3, 0.05) ** 2 == pytest.approx(7.814727903251179, abs=1e-9)


def test_initial_chi_validation():
    with pytest.raises(ValueError):
        bayes.initial_chi(0, 0.05)
    with pytest.raises(ValueError):
        bayes.initial_chi(2, 0.0)
    with pytest.raises(ValueError):
        bayes.initial_chi(2, 1.0)


# -- quantum compatibility -----------------------------------------------------

def test_compatible_accepts_protocol_statistics():
    proto = es.build_mub_protocol(2, 0.9, mub_set(2))
    assert bayes.is_quantum_compatible(np.array(proto.freqs), proto)


def test_compatible_oracle_state():
    # mixing the two parity-definite maximally entangled states tunes the
    # diagonal-basis agreement anywhere in [0, 1] while the computational
    # agreement stays perfect, so this point must be accepted
    proto = zx_protocol()
    p = np.array([0.5, 0.0, 0.0, 0.5, 0.15, 0.35, 0.35, 0.15])
    phip = np.zeros(4)
    phip[0] = phip[3] = 2 ** -0.5
    phim = np.zeros(4)
    phim[0], phim[3] = 2 ** -0.5, -(2 ** -0.5)
    sig = 0.3 * np.outer(phip, phip) + 0.7 * np.outer(phim, phim)
    direct = np.array([np.trace(e @ sig).real for e in proto.constraint_ops])
    assert np.allclose(direct, p, atol=1e-12)
    assert bayes.is_quantum_compatible(p, proto)


def test_compatible_rejects_asymmetric_split():
    proto = zx_protocol()
    p = np.array([0.5, 0.0, 0.0, 0.5, 0.3, 0.35, 0.35, 0.0])
    assert not bayes.is_quantum_compatible(p, proto)


def test_compatible_rejects_out_of_range():
    proto = zx_protocol()
    p = np.array([1.2, 0.0, 0.0, 0.5, 0.25, 0.25, 0.25, 0.25])
    assert not bayes.is_quantum_compatible(p, proto)
    with pytest.raises(ValueError):
        bayes.is_quantum_compatible(np.zeros(3), proto)


# -- calibration ---------------------------------------------------------------

def stub_dataset():
    return bayes.CountsDataset(tuple(
        bayes.SettingCounts(f"s{i}", (2 * i, 2 * i + 1), np.array([60, 40]))
        for i in range(3)))


def test_calibration_recovers_gaussian_radius():
    # with compatibility stubbed out the posterior is a plain Gaussian, so
    # the calibrated radius must match the chi-square quantile up to
    # Monte Carlo error
    reg = bayes.calibrate_region(stub_dataset(), None, alpha=0.05,
                                 n_samples=20000, seed=7,
                                 compatible=lambda x: True)
    target = 7.814727903251179
    se = np.sqrt(0.05 * 0.95 / 20000) / stats.chi2.pdf(target, 3)
    assert abs(reg.chi ** 2 - target) <= 3 * se
    assert reg.diagnostics["sampler"] == "rejection"
    assert reg.diagnostics["acceptance"] == 1.0
    assert abs(reg.diagnostics["mass_estimate"] - 0.95) < 0.01


def test_calibration_deterministic():
    a = bayes.calibrate_region(stub_dataset(), None, alpha=0.05,
                               n_samples=2000, seed=7, compatible=lambda x: True)
    b = bayes.calibrate_region(stub_dataset(), None, alpha=0.05,
                               n_samples=2000, seed=7, compatible=lambda x: True)
    assert a.chi == b.chi
    assert np.array_equal(a.f, b.f)


def test_calibration_monotone_in_alpha():
    lo = bayes.calibrate_region(stub_dataset(), None, alpha=0.10,
                                n_samples=5000, seed=3, compatible=lambda x: True)
    hi = bayes.calibrate_region(stub_dataset(), None, alpha=0.01,
                                n_samples=5000, seed=3, compatible=lambda x: True)
    assert lo.chi < hi.chi


def test_calibration_validation():
    with pytest.raises(ValueError):
        bayes.calibrate_region(stub_dataset(), None, alpha=0.05, n_samples=10)
    with pytest.raises(ValueError):
        bayes.calibrate_region(stub_dataset(), None, alpha=1.5,
                               n_samples=2000, compatible=lambda x: True)


# -- simulated counts and the full data path -----------------------------------

def test_simulated_counts_shape():
    proto = es.build_mub_protocol(2, None, mub_set(2))
    data = bayes.simulate_mub_counts(2, 0.9, mub_set(2), proto, 10000, seed=11)
    assert len(data.settings) == 3
    for k, s in enumerate(data.settings):
        assert s.label == f"basis-{k}"
        assert s.total == 10000
        assert len(s.operators) == 4
    # every retained constraint operator appears exactly once in the layout
    covered = [o for s in data.settings for o in s.operators if o is not None]
    assert sorted(covered) == list(range(len(proto.constraint_ops)))


def test_counts_json_roundtrip(tmp_path):
    proto = es.build_mub_protocol(2, None, mub_set(2))
    data = bayes.simulate_mub_counts(2, 0.9, mub_set(2), proto, 500, seed=1)
    payload = bayes.counts_to_json(data)
    back = bayes.load_counts(payload)
    assert [s.label for s in back.settings] == [s.label for s in data.settings]
    path = tmp_path / "counts.json"
    path.write_text(json.dumps(payload))
    again = bayes.load_counts(path)
    for s, t in zip(again.settings, data.settings):
        assert np.array_equal(s.counts, t.counts)
        assert s.operators == t.operators


def test_load_counts_errors_name_setting():
    with pytest.raises(ValueError):
        bayes.load_counts({"nope": []})
    bad = {"settings": [{"label": "noisy", "operators": [0, 1],
                         "counts": [3, -2]}]}
    with pytest.raises(ValueError, match="noisy"):
        bayes.load_counts(bad)


def test_region_calibration_end_to_end():
    d, v, shots = 2, 0.9, 10000
    proto = es.build_mub_protocol(d, None, mub_set(d))
    data = bayes.simulate_mub_counts(d, v, mub_set(d), proto, shots, seed=11)
    reg = bayes.calibrate_region(data, proto, alpha=0.1, n_samples=2000, seed=5)
    assert reg.chi > 0
    assert reg.diagnostics["sampler"] in ("rejection", "metropolis")
    assert reg.f.size == 9

    # true frequencies must land inside the calibrated ellipsoid
    block = np.array([v * (i == j) / d + (1 - v) / d ** 2
                      for i in range(d) for j in range(d)])
    truth = np.concatenate([block[:-1]] * 3)
    diff = truth - reg.f
    dist = float(np.sqrt(diff @ np.linalg.pinv(reg.sigma) @ diff))
    assert dist <= reg.chi

    # the region-constrained bound cannot beat the exact-statistics bound
    res = es.compute_rate(es.EntropyProblem(proto, gauss_radau(4), region=reg))
    fixed = es.compute_rate(es.EntropyProblem(
        es.build_mub_protocol(d, v, mub_set(d)), gauss_radau(4)))
    assert res.status in ("optimal", "near-optimal")
    assert res.rate <= fixed.rate + 1e-4
    assert res.rate > 0.3
