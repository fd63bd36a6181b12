"""The sklearn-style wrapper around the training loop."""

import numpy as np
import pytest
from sklearn.base import clone

from affield.datasets import BlobShape, SceneSpec, generate
from affield.estimator import AAFSegmenter


def image_batch(n=6, sigma=0.0, seed=2):
    spec = SceneSpec(
        height=10,
        width=10,
        shapes=(BlobShape(2.0, 3.0),),
        feature_noise_sigma=sigma,
        label_bleed=0.0,
        seed=seed,
    )
    scenes = generate(spec, n)
    X = np.stack([s.features.features for s in scenes])
    y = np.stack([s.gt.labels for s in scenes])
    return X, y


def quick_estimator(**kwargs):
    defaults = dict(iters=20, base_lr=0.02, seed=0)
    defaults.update(kwargs)
    return AAFSegmenter(**defaults)


def test_get_params_round_trip():
    est = AAFSegmenter(iters=7, margin=2.0)
    params = est.get_params()
    assert params["iters"] == 7
    assert params["margin"] == 2.0
    est2 = AAFSegmenter(**params)
    assert est2.get_params() == params


def test_clone_preserves_params():
    est = quick_estimator(kernel_sizes=(3, 7), w_lr=0.2)
    dup = clone(est)
    assert dup.get_params() == est.get_params()


def test_set_params_chains():
    est = AAFSegmenter()
    assert est.set_params(iters=3).iters == 3


def test_fit_predict_shapes():
    X, y = image_batch()
    est = quick_estimator().fit(X, y)
    assert est.n_features_in_ == 3
    np.testing.assert_array_equal(est.classes_, [0, 1])
    pred = est.predict(X)
    assert pred.shape == y.shape
    assert pred.dtype.kind == "i"
    assert set(np.unique(pred)) <= {0, 1}


def test_predict_proba_sums_to_one():
    X, y = image_batch(3)
    est = quick_estimator().fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (3, 10, 10, 2)
    np.testing.assert_allclose(proba.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(proba.argmax(axis=-1), est.predict(X))


def test_score_is_mean_pixel_accuracy():
    X, y = image_batch()
    est = quick_estimator(loss_mode="unary", iters=150, base_lr=0.05).fit(X, y)
    score = est.score(X, y)
    assert 0.0 <= score <= 1.0
    manual = (est.predict(X) == y).mean()
    assert score == pytest.approx(manual)
    assert score > 0.9


def test_fit_is_deterministic():
    X, y = image_batch(4)
    p1 = quick_estimator(seed=3).fit(X, y).predict_proba(X)
    p2 = quick_estimator(seed=3).fit(X, y).predict_proba(X)
    np.testing.assert_array_equal(p1, p2)


def test_adaptive_mode_exposes_weights():
    X, y = image_batch(3)
    est = quick_estimator(iters=5).fit(X, y)  # default mode is unary+aaf
    assert est.weights_ is not None
    assert est.weights_.weights.shape == (2, 2, 2)
    assert len(est.loss_curve_) == 5

    plain = quick_estimator(iters=5, loss_mode="unary").fit(X, y)
    assert plain.weights_ is None


def test_unfitted_predict_raises():
    est = AAFSegmenter()
    X, _ = image_batch(1)
    with pytest.raises(ValueError, match="not fitted"):
        est.predict(X)
    with pytest.raises(ValueError, match="not fitted"):
        est.predict_proba(X)


def test_fit_validation_errors():
    X, y = image_batch(2)
    est = quick_estimator(iters=1)
    with pytest.raises(ValueError):
        est.fit(X[0], y)  # X must be 4-D
    with pytest.raises(ValueError):
        est.fit(X, y.astype(float))
    with pytest.raises(ValueError):
        est.fit(X, y - 1)  # negative labels
    with pytest.raises(ValueError):
        est.fit(X, np.zeros_like(y))  # single class
    with pytest.raises(ValueError):
        est.fit(X, y[:1])  # count mismatch
    with pytest.raises(ValueError):
        quick_estimator(loss_mode="psychic", iters=1).fit(X, y)


def test_predict_rejects_wrong_feature_count():
    X, y = image_batch(2)
    est = quick_estimator(iters=1).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :, :, :2])
