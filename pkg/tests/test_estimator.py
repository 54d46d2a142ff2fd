import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from coswin import CoSwinClassifier
from coswin.data import synthetic_dataset
from coswin.exceptions import ConfigError, DataError

SMALL = dict(embed_dim=6, stage_depths=(2, 2), num_heads=(2, 3), window_size=2,
             drop_path_max=0.0, batch_size=8, warmup_epochs=1.0)


@pytest.fixture(scope="module")
def blobs():
    ds = synthetic_dataset(0, 24, (8, 8, 1), k=3)
    names = np.array(["cat", "dog", "eel"])
    return ds.images[..., 0], names[ds.labels]


@pytest.fixture(scope="module")
def fitted(blobs):
    X, y = blobs
    return CoSwinClassifier(epochs=3, **SMALL).fit(X, y)


def test_fit_sets_learned_attributes(fitted, blobs):
    X, _ = blobs
    assert list(fitted.classes_) == ["cat", "dog", "eel"]
    assert fitted.n_features_in_ == 64 and len(fitted.history_) == 3
    assert fitted.model_.config.in_channels == 1


def test_predictions_shapes_and_labels(fitted, blobs):
    X, _ = blobs
    proba = fitted.predict_proba(X)
    assert proba.shape == (24, 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert set(fitted.predict(X)) <= {"cat", "dog", "eel"}
    assert np.array_equal(fitted.predict(X), fitted.classes_[proba.argmax(axis=1)])
    assert 0.0 <= fitted.score(X, blobs[1]) <= 1.0


def test_same_random_state_same_model(fitted, blobs):
    X, y = blobs
    again = clone(fitted).fit(X, y)
    assert np.array_equal(again.decision_function(X), fitted.decision_function(X))


def test_clone_keeps_params():
    est = CoSwinClassifier(variant="c", epochs=2)
    params = clone(est).get_params()
    assert params["variant"] == "c" and params["epochs"] == 2


def test_not_fitted():
    with pytest.raises(NotFittedError):
        CoSwinClassifier().predict(np.zeros((1, 8, 8)))


def test_shape_mismatch_on_predict(fitted):
    with pytest.raises(DataError):
        fitted.predict(np.zeros((2, 8, 8, 3)))


def test_label_count_mismatch(blobs):
    X, y = blobs
    with pytest.raises(DataError):
        CoSwinClassifier(epochs=1, **SMALL).fit(X, y[:-1])


def test_invalid_geometry_is_config_error(blobs):
    X, y = blobs
    with pytest.raises(ConfigError):
        CoSwinClassifier(epochs=1, **{**SMALL, "window_size": 3}).fit(X, y)
