import numpy as np
import pytest

import mmpid


def atoms(d):
    return np.array([d["redundancy"], d["unique1"], d["unique2"], d["synergy"]])


@pytest.mark.parametrize(
    "gate,expected",
    [
        ("xor", [0, 0, 0, 1]),
        ("copy", [1, 0, 0, 0]),
        ("unq1", [0, 1, 0, 0]),
        ("and", [0.311278, 0, 0, 0.5]),
    ],
)
def test_gate_atoms(gate, expected):
    p = mmpid.gate_joint(gate)
    assert p.shape == (2, 2, 2) or p.shape[2] == 2
    assert np.allclose(atoms(mmpid.decompose(p)), expected, atol=1e-3)
    assert np.allclose(atoms(mmpid.brute_force_pid(p)), expected, atol=1e-3)


def test_identities_on_random_joint():
    rng = np.random.default_rng(0)
    p = rng.random((3, 4, 3))
    p /= p.sum()
    d = mmpid.decompose(p)
    a = atoms(d)
    assert a.min() >= -1e-9
    assert abs(a[0] + a[1] - d["mi_x1"]) < 1e-6
    assert abs(a[0] + a[2] - d["mi_x2"]) < 1e-6
    assert abs(a.sum() - d["mi_joint"]) < 1e-6
    q = d["coupling"]
    assert np.allclose(q.sum(axis=1), p.sum(axis=1), atol=1e-6)
    assert np.allclose(q.sum(axis=0), p.sum(axis=0), atol=1e-6)


def test_bad_joint_raises():
    with pytest.raises(mmpid.DomainError):
        mmpid.decompose(np.full((2, 2, 2), 0.2))
    with pytest.raises(mmpid.Error):
        mmpid.decompose(np.ones((2, 2)))


def test_statistics():
    rho, p = mmpid.spearman([1, 2, 3, 4, 5], [1, 3, 2, 5, 4])
    assert abs(rho - 0.8) < 1e-12
    assert 0 < p < 1
    assert mmpid.spearman([1, 2, 3], [3, 2, 1])[0] == -1.0
    with pytest.raises(mmpid.DegenerateError):
        mmpid.spearman([1, 1, 1], [1, 2, 3])
    assert mmpid.pid_shares(1, 1, 1, 1) == [0.25] * 4


def test_pipeline_constants():
    probs, fallback = mmpid.threshold_regularize([0.3, 0.2])
    assert not fallback and np.allclose(probs, [0.6, 0.4])
    assert mmpid.threshold_regularize([0.05, 0.05]) == ([0.5, 0.5], True)
    assert not mmpid.threshold_regularize([0.25, 0.05])[1]
    assert mmpid.split_sizes(4329) == (3246, 1083)
    assert mmpid.split_sizes(2150) == (1612, 538)


def test_continuous_estimate_matches_oracle():
    r = mmpid.estimate_continuous("synergy", samples=800, seed=3)
    est, ref = atoms(r["batch"]), atoms(r["oracle"])
    assert r["test_count"] == 200
    assert est.argmax() == ref.argmax() == 3
    assert np.abs(est - ref).max() <= 0.15
