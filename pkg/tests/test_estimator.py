import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mmccnet.data import DataError, stack_samples, synth_polyp_dataset
from mmccnet.estimator import MmccSegmenter
from mmccnet.validation import check_images, check_masks


@pytest.fixture(scope="module")
def xy():
    return stack_samples(synth_polyp_dataset(6, h=16, w=24, seed=4))


def test_params_round_trip():
    est = MmccSegmenter(lr=3e-4, epochs=5)
    params = est.get_params()
    assert params["lr"] == 3e-4 and params["epochs"] == 5
    assert clone(est).get_params() == params
    est.set_params(variant="network2")
    assert est.variant == "network2"


def test_fit_predict_score(xy):
    X, y = xy
    est = MmccSegmenter(base_channels=4, epochs=2, batch_size=4, validation_fraction=0.34)
    assert est.fit(X, y) is est
    proba = est.predict_proba(X)
    assert proba.shape == y.shape and ((proba > 0) & (proba < 1)).all()
    pred = est.predict(X)
    assert set(np.unique(pred)) <= {0, 1}
    assert 0 <= est.score(X, y) <= 1
    assert len(est.train_log_.records) == 2 and est.n_parameters_ > 0


def test_unfitted_and_invalid_inputs(xy):
    X, y = xy
    with pytest.raises(NotFittedError):
        MmccSegmenter().predict(X)
    with pytest.raises(DataError):
        MmccSegmenter().fit(X[:, :2], y)
    with pytest.raises(DataError):
        MmccSegmenter().fit(X, y[:3])


def test_validation_helpers():
    x = check_images(np.zeros((3, 8, 8)))
    assert x.shape == (1, 3, 8, 8) and x.dtype == np.float32
    with pytest.raises(DataError):
        check_images(np.zeros((1, 3, 6, 8)))
    with pytest.raises(DataError):
        check_images(np.full((1, 3, 8, 8), 1.5))
    with pytest.raises(DataError):
        check_images(np.zeros((0, 3, 8, 8)))
    assert check_masks(np.ones((2, 8, 8))).shape == (2, 1, 8, 8)
    with pytest.raises(DataError):
        check_masks(np.full((1, 1, 8, 8), 0.3))
