import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fogsense.errors import AlignmentError
from fogsense.select import (
    FCBFSelector, discretize, fcbf, fcbf_from_su, su_matrix, symmetrical_uncertainty,
    write_su_report,
)


def h2(p):
    return -p * np.log2(p) - (1 - p) * np.log2(1 - p)


def test_su_identity():
    x = np.random.default_rng(0).integers(0, 4, size=500)
    assert symmetrical_uncertainty(x, x) == 1.0


def test_su_independent_near_zero():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 3, size=10_000)
    y = rng.integers(0, 2, size=10_000)
    assert symmetrical_uncertainty(x, y) <= 0.02


def test_su_binary_symmetric_channel():
    rng = np.random.default_rng(2)
    x = rng.integers(0, 2, size=100_000)
    flip = rng.random(100_000) < 0.1
    y = np.where(flip, 1 - x, x)
    assert symmetrical_uncertainty(x, y) == pytest.approx(1 - h2(0.1), abs=0.01)


def test_su_constant_is_zero():
    assert symmetrical_uncertainty(np.zeros(50, int), np.arange(50) % 2) == 0.0


def test_su_length_mismatch():
    with pytest.raises(AlignmentError):
        symmetrical_uncertainty(np.zeros(20), np.zeros(19))


@given(st.integers(0, 2 ** 16))
def test_su_symmetric_and_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 5, size=300)
    y = (x + rng.integers(0, 3, size=300)) % 4
    assert symmetrical_uncertainty(x, y) == symmetrical_uncertainty(y, x)
    perm = rng.permutation(5)
    assert symmetrical_uncertainty(perm[x], y) == pytest.approx(
        symmetrical_uncertainty(x, y), abs=1e-12)
    assert 0.0 <= symmetrical_uncertainty(x, y) <= 1.0


def test_discretize_equal_frequency():
    x = np.random.default_rng(3).normal(size=1000)
    codes = discretize(x, 10)
    assert np.array_equal(np.bincount(codes), np.full(10, 100))
    x[5] = np.nan
    assert discretize(x, 10)[5] == -1


def test_su_matrix_invariants():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 4))
    y = (X[:, 0] > 0).astype(int)
    m = su_matrix(X, y)
    sf = m.su_feature_feature
    assert np.array_equal(sf, sf.T)
    assert np.array_equal(np.diag(sf), np.ones(4))
    assert np.all((sf >= 0) & (sf <= 1)) and np.all((m.su_feature_class >= 0) & (m.su_feature_class <= 1))


# ------------------------------------------------------------------ FCBF rules

def test_fcbf_hand_trace_redundant_pair():
    # f1 survives first; SU(f1, f2) = 0.95 >= SU(f2, c) = 0.88 removes f2
    su_c = [0.9, 0.88]
    su_ff = [[1.0, 0.95], [0.95, 1.0]]
    assert fcbf_from_su(su_c, su_ff, 0.85) == [0]


def test_fcbf_below_threshold_empty():
    assert fcbf_from_su([0.5], [[1.0]], 0.85) == []


def test_fcbf_redundancy_tie_removes():
    # equality counts as redundant
    assert fcbf_from_su([0.9, 0.88], [[1.0, 0.88], [0.88, 1.0]], 0.85) == [0]


def test_fcbf_chain_hand_trace():
    # ranking f2 (0.95), f0 (0.9), f1 (0.87), f3 (0.86)
    # f2 removes f1 (0.9 >= 0.87); f0 kept; f0 removes f3 (0.9 >= 0.86)
    su_c = [0.9, 0.87, 0.95, 0.86]
    su_ff = np.array([[1.0, 0.1, 0.2, 0.9],
                      [0.1, 1.0, 0.9, 0.1],
                      [0.2, 0.9, 1.0, 0.5],
                      [0.9, 0.1, 0.5, 1.0]])
    assert fcbf_from_su(su_c, su_ff, 0.85) == [2, 0]


def test_fcbf_independent_informative_features():
    rng = np.random.default_rng(5)
    a = rng.integers(0, 2, size=20_000)
    b = rng.integers(0, 2, size=20_000)
    y = 2 * a + b
    assert fcbf([a, b], y, threshold=0.2) == [0, 1]
    assert fcbf([b, a], y, threshold=0.2) == [1, 0]


@given(st.integers(0, 2 ** 16), st.floats(0.0, 0.9))
def test_fcbf_subset_of_survivors_in_order(seed, threshold):
    rng = np.random.default_rng(seed)
    k = 5
    su_c = rng.random(k)
    a = rng.random((k, k))
    su_ff = (a + a.T) / 2
    np.fill_diagonal(su_ff, 1.0)
    out = fcbf_from_su(su_c, su_ff, threshold)
    assert set(out) <= {i for i in range(k) if su_c[i] > threshold}
    assert list(su_c[out]) == sorted(su_c[out], reverse=True)
    for i, p in enumerate(out):
        for q in out[i + 1:]:
            assert su_ff[p, q] < su_c[q]


def test_selector_fallback_and_transform(tmp_path):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(400, 3))
    y = (X[:, 1] + 0.5 * rng.normal(size=400) > 0).astype(int)
    sel = FCBFSelector(threshold=0.85).fit(X, y)
    assert sel.selected_ == [] and not sel.fallback_used_
    sel = FCBFSelector(threshold=0.85, empty_fallback=True).fit(X, y)
    assert sel.fallback_used_ and sel.selected_[0] == 1
    assert np.array_equal(sel.transform(X), X[:, sel.selected_])
    write_su_report(tmp_path / "su.csv", ["a", "b", "c"], sel.su_class_, sel.selected_)
    lines = (tmp_path / "su.csv").read_text().splitlines()
    assert lines[0] == "feature,su_class,selected,rank"
    assert lines[2].startswith("b,") and lines[2].endswith(",1,1")
