import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from abmcal.surrogate.pca import n_components_for, pca_fit, pca_project, pca_reconstruct


def test_rank_one_data():
    rng = np.random.default_rng(0)
    pattern = rng.normal(size=30)
    data = 5.0 + rng.normal(size=(40, 1)) * pattern
    b = pca_fit(data, 0.95)
    assert b.k == 1
    assert b.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)


def test_identical_rows_zero_variance():
    row = np.arange(12.0)
    b = pca_fit(np.tile(row, (8, 1)))
    assert b.k == 0
    np.testing.assert_array_equal(pca_reconstruct(b, np.empty(0)), row)
    assert pca_project(b, row).shape == (0,)


def test_ratios_match_covariance_eigen_oracle():
    data = np.random.default_rng(1).normal(size=(50, 20))
    b = pca_fit(data, 0.95)
    ev = np.linalg.eigvalsh(np.cov(data, rowvar=False))[::-1]
    ratio = ev / ev.sum()
    np.testing.assert_allclose(b.explained_variance_ratio[:len(ratio)], ratio, atol=1e-8)
    np.testing.assert_allclose(b.cumulative_ratio(), np.cumsum(b.explained_variance_ratio))
    k = int(np.argmax(np.cumsum(ratio) >= 0.95)) + 1
    assert b.k == k


def test_threshold_selection_rule():
    r = np.array([0.6, 0.3, 0.06, 0.04])
    assert n_components_for(r, 0.95) == 3
    assert n_components_for(r, 0.9) == 2
    assert n_components_for(r, 1.0) == 4


def test_projection_examples():
    data = np.random.default_rng(2).normal(size=(30, 8))
    b = pca_fit(data, 0.99)
    np.testing.assert_allclose(pca_project(b, b.mean), 0, atol=1e-12)
    e1 = np.zeros(b.k)
    e1[0] = 1
    np.testing.assert_allclose(pca_project(b, b.mean + b.components[0]), e1, atol=1e-12)
    np.testing.assert_array_equal(pca_reconstruct(b, np.zeros(b.k)), b.mean)


def test_length_mismatch_rejected():
    b = pca_fit(np.random.default_rng(3).normal(size=(10, 6)))
    with pytest.raises(ValueError):
        pca_project(b, np.zeros(5))
    with pytest.raises(ValueError):
        pca_reconstruct(b, np.zeros(b.k + 1))
    with pytest.raises(ValueError):
        pca_fit(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        pca_fit(np.zeros((4, 4)), 0.0)


def test_truncation_error_equals_dropped_coefficients():
    rng = np.random.default_rng(4)
    data = rng.normal(size=(60, 10)) @ rng.normal(size=(10, 10))
    full = pca_fit(data, 1.0, n_components=10)
    row = data[7]
    alpha = pca_project(full, row)
    for k in range(1, 10):
        b = full.truncated(k)
        err = np.linalg.norm(pca_reconstruct(b, pca_project(b, row)) - row)
        assert err == pytest.approx(np.linalg.norm(alpha[k:]), rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 15), st.integers(2, 12)),
              elements=st.floats(-1e3, 1e3)))
def test_full_round_trip_and_orthonormality(data):
    b = pca_fit(data, 1.0)
    if b.k == 0:
        return
    full = pca_fit(data, 1.0, n_components=len(b.components))
    C = full.retained
    np.testing.assert_allclose(C @ C.T, np.eye(len(C)), atol=1e-8)
    assert np.all(np.diff(full.explained_variance_ratio) <= 1e-12)
    # rows lie in the span of the centred data, so the full basis reproduces them
    back = pca_reconstruct(full, pca_project(full, data))
    scale = max(1.0, np.abs(data).max())
    np.testing.assert_allclose(back, data, atol=1e-8 * scale)
    assert b.cumulative_ratio()[b.k - 1] >= 1.0 - 1e-12 or b.k == len(b.components)
