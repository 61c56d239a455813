import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abmcal.doe import DEFAULT_PRIOR_BOX, generate_design
from abmcal.surrogate import (Hyperparams, cv_search, expand_grid, fold_indices, load_grid,
                              load_surrogate, median_abs_rel_error, pca_reconstruct,
                              save_surrogate, surrogate_predict, train_surrogate)


def toy_design(m=40, n=15, seed=0):
    """Smooth epidemic-like curves driven by the four parameters."""
    X = generate_design(m)
    u = DEFAULT_PRIOR_BOX.unscale(X)
    t = np.arange(n)
    peak = 3 + 8 * u[:, 1:2]
    hosp = 50 * (0.5 + u[:, :1]) * np.exp(-((t - peak) / (2 + 2 * u[:, 2:3])) ** 2)
    deaths = np.cumsum(0.1 * hosp * (1 + u[:, 3:4]), axis=1)
    noise = np.random.default_rng(seed).normal(scale=0.1, size=hosp.shape)
    return X, np.hstack([hosp + noise, deaths])


def test_relative_error_metric():
    assert median_abs_rel_error(np.array([1.1, 2.0, 5.0]), np.array([1.0, 2.0, 4.0])) == \
        pytest.approx(0.1)
    # entries under the floor are ignored
    assert median_abs_rel_error(np.array([9.0, 2.2]), np.array([0.0, 2.0])) == pytest.approx(0.1)
    assert np.isnan(median_abs_rel_error(np.ones(3), np.zeros(3)))


def test_lookup_limit_reproduces_training_rows():
    X, Y = toy_design(20, 10)
    full = min(X.shape[0], Y.shape[1])
    model = train_surrogate(X, Y, Hyperparams(1, "squared_error", 1, 4, bootstrap=False),
                            variance_threshold=1.0, n_components=full)
    for i in (0, 7, 19):
        np.testing.assert_allclose(model.predict_concat(X[i])[0], Y[i], atol=1e-8)


def test_prediction_is_mean_of_tree_reconstructions():
    X, Y = toy_design()
    model = train_surrogate(X, Y, Hyperparams(25, "absolute_error", 3, 4), seed=3)
    theta = X[:5] * 1.001
    per_tree = [pca_reconstruct(model.basis, t.predict(theta)) for t in model.forest.trees]
    np.testing.assert_allclose(model.predict_concat(theta), np.mean(per_tree, axis=0),
                               atol=1e-9)


def test_predict_splits_outputs_and_flags_extrapolation():
    X, Y = toy_design()
    model = train_surrogate(X, Y, Hyperparams(10, "squared_error", 1, 4))
    inside = model.predict(X[3])
    assert inside.hosp.shape == inside.deaths.shape == (15,)
    assert not inside.extrapolated
    outside = surrogate_predict(model.basis, model.forest, X[3] * 2)
    assert outside.extrapolated
    hosp, deaths = model(X[3])
    np.testing.assert_array_equal(hosp, inside.hosp)


def test_save_load_round_trip(tmp_path):
    X, Y = toy_design()
    model = train_surrogate(X, Y, Hyperparams(12, "absolute_error", 3, 4), seed=9)
    path = tmp_path / "model.bin"
    save_surrogate(model, path)
    back = load_surrogate(path)
    probe = generate_design(30)
    np.testing.assert_array_equal(back.predict_concat(probe), model.predict_concat(probe))
    assert back.box == model.box and back.basis.k == model.basis.k
    np.testing.assert_array_equal(back.training_set().outputs(), Y)
    np.testing.assert_array_equal(back.train_thetas, X)
    (tmp_path / "junk.bin").write_bytes(b"not a model")
    with pytest.raises(ValueError):
        load_surrogate(tmp_path / "junk.bin")


def test_zero_variance_outputs_give_mean_model():
    X = generate_design(10)
    Y = np.tile(np.arange(8.0), (10, 1))
    model = train_surrogate(X, Y)
    assert model.basis.k == 0 and model.forest is None
    np.testing.assert_array_equal(model.predict_concat(X[0])[0], Y[0])


def test_fold_partition():
    parts = fold_indices(23, 5, seed=1)
    assert sorted(np.concatenate(parts).tolist()) == list(range(23))
    assert [len(p) for p in parts] == [5, 5, 5, 4, 4]
    assert all(np.array_equal(a, b) for a, b in zip(parts, fold_indices(23, 5, seed=1)))
    with pytest.raises(ValueError):
        fold_indices(3, 5, 0)
    with pytest.raises(ValueError):
        fold_indices(10, 1, 0)


def test_grid_of_one():
    X, Y = toy_design()
    hp = Hyperparams(10, "squared_error", 1, 4)
    best, rep = cv_search(X, Y, [hp], folds=4, seed=0)
    assert best == hp
    assert len(rep.records) == 4
    assert rep.mean_scores()[0] == pytest.approx(np.mean([r[2] for r in rep.records]))


def test_duplicate_grid_entries_score_identically():
    X, Y = toy_design()
    hp = Hyperparams(10, "absolute_error", 3, 4)
    _, rep = cv_search(X, Y, [hp, hp], folds=3, seed=2)
    s = rep.mean_scores()
    assert s[0] == s[1]


def test_depth_zero_setting_is_dominated():
    X, Y = toy_design()
    good = Hyperparams(30, "squared_error", 1, 4)
    stump = Hyperparams(30, "squared_error", 1, 4, max_depth=0)
    best, rep = cv_search(X, Y, [stump, good], folds=5, seed=0)
    assert best == good
    assert rep.mean_scores()[1] < rep.mean_scores()[0]


def test_cv_rejects_bad_arguments():
    X, Y = toy_design(4)
    with pytest.raises(ValueError):
        cv_search(X, Y, [Hyperparams(5)], folds=5)
    with pytest.raises(ValueError):
        cv_search(X, Y, [], folds=2)


def test_grid_file_forms(tmp_path):
    a = tmp_path / "a.yaml"
    a.write_text("grid:\n  n_trees: [5]\n  criterion: [absolute_error, squared_error]\n"
                 "  min_samples_leaf: [1, 3]\n")
    assert len(load_grid(a)) == 4
    b = tmp_path / "b.yaml"
    b.write_text("- {n_trees: 5, criterion: squared_error}\n")
    assert load_grid(b) == [Hyperparams(5, "squared_error")]
    assert expand_grid({"n_trees": 7}) == [Hyperparams(7)]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_training_is_deterministic_in_seed(seed):
    X, Y = toy_design(25, 8)
    hp = Hyperparams(5, "absolute_error", 2, 3)
    a = train_surrogate(X, Y, hp, seed=seed)
    b = train_surrogate(X, Y, hp, seed=seed)
    np.testing.assert_array_equal(a.predict_concat(X), b.predict_concat(X))
