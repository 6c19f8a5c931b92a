import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import random_integer_dataset, stagewise_mse, stump_mismatch
from saha_forecast import gbdt
from saha_forecast.gbdt import DataError, FitError, GbdtHyperparams, GradientBoostedEnsemble, ShapeError

STUMP = GbdtHyperparams(n_estimators=1, learning_rate=1.0, max_depth=1, min_samples_leaf=1, subsample=1.0)


def _data(seed, n=60, d=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.sin(X[:, 0]) + 0.5 * X[:, 1] * (X[:, 2] > 0) + 0.1 * rng.normal(size=n)
    return X, y


def test_stump_matches_brute_force_on_six_points():
    X = np.array([[1, 5], [2, 4], [3, 3], [4, 2], [5, 1], [6, 0]], dtype=float)
    y = np.array([0, 0, 1, 4, 4, 5], dtype=float)
    model = gbdt.fit(X, y, STUMP)
    assert stump_mismatch(model, X, y, 1) == ""
    # the split at x0 = 3.5 and at x1 = 2.5 are mirror images; the lower feature wins
    assert model.feature[0, 0] == 0 and model.threshold[0, 0] == 3.5


def test_stump_oracle_random_suite():
    rng = np.random.default_rng(20240601)
    bad = []
    for case in range(200):
        X, y, leaf = random_integer_dataset(rng)
        model = gbdt.fit(X, y, STUMP.with_(min_samples_leaf=leaf))
        msg = stump_mismatch(model, X, y, leaf)
        if msg:
            bad.append((case, msg))
    assert bad == []


def test_training_mse_non_increasing():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(5, 80))
        X = rng.normal(size=(n, int(rng.integers(1, 5))))
        y = rng.normal(size=n)
        hp = GbdtHyperparams(n_estimators=40, learning_rate=float(rng.uniform(0.01, 1.0)),
                             max_depth=int(rng.integers(1, 4)), min_samples_leaf=int(rng.integers(1, 5)),
                             subsample=1.0)
        curve = stagewise_mse(gbdt.fit(X, y, hp), X, y)
        assert np.all(np.diff(curve) <= 1e-12 * max(1.0, curve[0]))


def test_constant_target():
    X, _ = _data(0)
    y = np.full(len(X), 0.93)
    model = gbdt.fit(X, y, GbdtHyperparams(n_estimators=20, subsample=1.0, min_samples_leaf=2))
    assert np.all(model.feature == -1)
    # residuals are zero up to the rounding of mean(y)
    assert np.all(np.abs(model.value[:, 0]) < 1e-15)
    assert np.allclose(model.predict(X), 0.93, rtol=0, atol=1e-15)


def test_single_point_memorised():
    model = gbdt.fit(np.array([[1.0, 2.0]]), np.array([0.97]), GbdtHyperparams(n_estimators=5, min_samples_leaf=1))
    assert model.predict(np.array([[5.0, -1.0]]))[0] == pytest.approx(0.97, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 10), st.sampled_from([0.5, 0.7, 1.0]))
def test_leaf_occupancy_and_depth(seed, depth, leaf, sub):
    X, y = _data(seed, n=50)
    hp = GbdtHyperparams(n_estimators=5, learning_rate=0.1, max_depth=depth, min_samples_leaf=leaf, subsample=sub,
                         rng_seed=seed)
    model = gbdt.fit(X, y, hp)
    assert max(model.tree_depths()) <= depth
    if sub == 1.0:
        for m in range(model.n_trees):
            leaves = np.array([_leaf_of(x, model.feature[m], model.threshold[m]) for x in X])
            _, counts = np.unique(leaves, return_counts=True)
            assert counts.min() >= leaf


def _leaf_of(x, feat, thr):
    node = 0
    while feat[node] >= 0:
        node = 2 * node + 1 if x[feat[node]] <= thr[node] else 2 * node + 2
    return node


def test_determinism_and_bagging_seed():
    X, y = _data(3)
    hp = GbdtHyperparams(n_estimators=50, learning_rate=0.1, subsample=0.7, min_samples_leaf=3, rng_seed=11)
    a, b = gbdt.fit(X, y, hp), gbdt.fit(X, y, hp)
    assert np.array_equal(a.feature, b.feature) and np.array_equal(a.threshold, b.threshold)
    assert np.array_equal(a.predict(X), b.predict(X))
    c = gbdt.fit(X, y, hp.with_(rng_seed=12))
    assert not np.array_equal(a.predict(X), c.predict(X))


def test_row_order_does_not_matter_without_bagging():
    X, y = _data(4)
    hp = GbdtHyperparams(n_estimators=30, learning_rate=0.2, max_depth=3, min_samples_leaf=2, subsample=1.0)
    perm = np.random.default_rng(0).permutation(len(y))
    a, b = gbdt.fit(X, y, hp), gbdt.fit(X[perm], y[perm], hp)
    assert np.array_equal(a.feature, b.feature)
    assert np.allclose(a.predict(X), b.predict(X), rtol=0, atol=1e-12)


def test_in_sample_predictions_match_predict():
    X, y = _data(5)
    model, pred = gbdt.fit_with_predictions(X, y, GbdtHyperparams(n_estimators=60, learning_rate=0.05))
    assert np.array_equal(pred, model.predict(X))


def test_staged_predict_and_truncate():
    X, y = _data(6)
    model = gbdt.fit(X, y, GbdtHyperparams(n_estimators=25, learning_rate=0.1))
    staged = gbdt.staged_predict(model, X)
    assert staged.shape == (26, len(y))
    assert np.all(staged[0] == model.base_value)
    assert np.array_equal(staged[-1], gbdt.predict(model, X))
    assert np.array_equal(gbdt.truncate(model, 25).predict(X), model.predict(X))
    zero = gbdt.truncate(model, 0)
    assert zero.n_trees == 0 and np.all(zero.predict(X) == model.base_value)
    assert np.array_equal(model.truncate(10).predict(X), staged[10])
    with pytest.raises(ValueError):
        model.truncate(26)


def test_truncation_equals_shorter_fit_with_bagging():
    X, y = _data(7)
    hp = GbdtHyperparams(n_estimators=40, learning_rate=0.1, subsample=0.7, rng_seed=5)
    long = gbdt.fit(X, y, hp)
    short = gbdt.fit(X, y, hp.with_(n_estimators=15))
    assert np.array_equal(long.truncate(15).predict(X), short.predict(X))


def test_early_stopping_curve_matches_manual_scan():
    X, y = _data(8, n=120)
    Xf, yf, Xv, yv = X[:90], y[:90], X[90:], y[90:]
    hp = GbdtHyperparams(n_estimators=400, learning_rate=0.1, max_depth=3, min_samples_leaf=4, subsample=0.7)
    model, curve = gbdt.fit_early_stopping(Xf, yf, Xv, yv, hp, patience=10)
    manual = stagewise_mse(model, Xv, yv)
    assert len(curve) == model.n_trees + 1
    assert np.allclose(curve, manual, rtol=1e-12, atol=1e-15)
    best = int(np.argmin(manual))
    assert int(np.argmin(curve)) == best
    if model.n_trees < 400:
        assert model.n_trees - best == 10
    # early stopping never changes the trees it did grow
    full = gbdt.fit(Xf, yf, hp.with_(n_estimators=model.n_trees))
    assert np.array_equal(full.predict(Xv), model.predict(Xv))


def test_json_roundtrip():
    X, y = _data(9)
    model = gbdt.fit(X, y, GbdtHyperparams(n_estimators=12, learning_rate=0.3, max_depth=2))
    back = GradientBoostedEnsemble.from_json(model.to_json())
    assert np.array_equal(back.predict(X), model.predict(X))
    with pytest.raises(ValueError):
        GradientBoostedEnsemble.from_json('{"format": "other"}')


@pytest.mark.parametrize("kw", [dict(n_estimators=0), dict(learning_rate=0.0), dict(learning_rate=1.5),
                                dict(max_depth=0), dict(min_samples_leaf=0), dict(subsample=0.0)])
def test_hyperparam_validation(kw):
    with pytest.raises(ValueError):
        GbdtHyperparams(**kw)


def test_errors():
    hp = GbdtHyperparams(n_estimators=3)
    with pytest.raises(FitError):
        gbdt.fit(np.zeros((0, 2)), np.zeros(0), hp)
    with pytest.raises(DataError):
        gbdt.fit(np.array([[0.0], [np.nan]]), np.array([1.0, 2.0]), hp)
    with pytest.raises(DataError):
        gbdt.fit(np.array([[0.0], [1.0]]), np.array([1.0, np.inf]), hp)
    with pytest.raises(ShapeError):
        gbdt.fit(np.zeros((3, 2)), np.zeros(4), hp)
    model = gbdt.fit(np.zeros((3, 2)), np.arange(3.0), hp)
    with pytest.raises(ShapeError):
        model.predict(np.zeros((2, 3)))
    with pytest.raises(FitError):
        gbdt.fit_early_stopping(np.zeros((3, 2)), np.arange(3.0), np.zeros((0, 2)), np.zeros(0), hp)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 3)), elements=st.floats(-1e3, 1e3)),
       st.integers(0, 2**31))
def test_predictions_within_target_hull(X, seed):
    # with learning rate 1 and one stage, every leaf is a mean of training targets
    y = np.random.default_rng(seed).uniform(0.5, 1.0, size=len(X))
    model = gbdt.fit(X, y, GbdtHyperparams(n_estimators=1, learning_rate=1.0, max_depth=3, min_samples_leaf=1,
                                           subsample=1.0))
    pred = model.predict(X)
    assert np.all(pred >= y.min() - 1e-12) and np.all(pred <= y.max() + 1e-12)
