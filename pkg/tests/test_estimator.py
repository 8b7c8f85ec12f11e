"""Estimator facade: parameter contract, validation, fit/predict/score."""

import numpy as np
import pytest

from microdet import MicroTargetDetector
from microdet.estimator import NotFittedError
from microdet.synth import SynthConfig, generate_scene
from microdet.validation import check_image_batch, check_labels


def toy_dataset(n=24, size=64, seed0=0):
    cfg = SynthConfig(image_size=size, max_targets=2, size_max=16.0,
                      small_cutoff=12.0, condition_weights=(1.0, 0.0, 0.0, 0.0))
    X = np.zeros((n, 3, size, size), dtype=np.float32)
    y = []
    for i in range(n):
        scene = generate_scene(seed0 + i, cfg)
        X[i] = scene.image.data
        y.append(np.array([[cls, b.cx, b.cy, b.w, b.h] for b, cls in scene.gts],
                          dtype=np.float32))
    return X, y


# ---------------------------------------------------------------------------
# parameter contract
# ---------------------------------------------------------------------------


def test_get_params_round_trip():
    est = MicroTargetDetector(epochs=3, input_size=64)
    params = est.get_params()
    assert params["epochs"] == 3 and params["input_size"] == 64
    clone = MicroTargetDetector(**params)
    assert clone.get_params() == params


def test_set_params_returns_self_and_validates():
    est = MicroTargetDetector()
    assert est.set_params(epochs=7) is est
    assert est.epochs == 7
    with pytest.raises(ValueError, match="invalid parameter"):
        est.set_params(bogus=1)


def test_sklearn_clone_interop():
    sklearn = pytest.importorskip("sklearn")
    from sklearn.base import clone
    est = MicroTargetDetector(epochs=2, seed=3)
    cloned = clone(est)
    assert cloned is not est
    assert cloned.get_params() == est.get_params()


def test_repr_contains_params():
    assert "epochs=4" in repr(MicroTargetDetector(epochs=4))


# ---------------------------------------------------------------------------
# input validation
# ---------------------------------------------------------------------------


def test_check_image_batch_accepts_hwc():
    X = np.random.default_rng(0).random((2, 32, 32, 3)).astype(np.float32)
    out = check_image_batch(X)
    assert out.shape == (2, 3, 32, 32)


def test_check_image_batch_rescales_uint8_range():
    X = (np.random.default_rng(0).random((1, 3, 16, 16)) * 255).astype(np.float32)
    out = check_image_batch(X)
    assert out.max() <= 1.0


def test_check_image_batch_rejects_bad_shapes():
    with pytest.raises(ValueError, match="rank"):
        check_image_batch(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="channels"):
        check_image_batch(np.zeros((1, 5, 16, 16), dtype=np.float32))
    with pytest.raises(ValueError, match="square"):
        check_image_batch(np.zeros((1, 3, 16, 32), dtype=np.float32))


def test_check_labels_validates_ranges():
    with pytest.raises(ValueError, match="class 4"):
        check_labels([np.array([[4, 0.5, 0.5, 0.1, 0.1]])], 1, num_classes=1)
    with pytest.raises(ValueError, match="cx=1.5"):
        check_labels([np.array([[0, 1.5, 0.5, 0.1, 0.1]])], 1, num_classes=1)
    with pytest.raises(ValueError, match="expected 2"):
        check_labels([np.zeros((0, 5))], 2, num_classes=1)


# ---------------------------------------------------------------------------
# fit / predict / score
# ---------------------------------------------------------------------------


def test_predict_before_fit_raises():
    est = MicroTargetDetector()
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 3, 64, 64), dtype=np.float32))


def test_fit_predict_score_smoke():
    X, y = toy_dataset(n=24)
    est = MicroTargetDetector(input_size=64, epochs=12, batch_size=8, seed=0,
                              conf_thresh=0.3)
    assert est.fit(X, y) is est
    assert len(est.history_) == 12
    preds = est.predict(X[:4])
    assert len(preds) == 4
    for rows in preds:
        assert rows.shape[1] == 6
        if len(rows) > 1:
            assert all(rows[i, 1] >= rows[i + 1, 1] for i in range(len(rows) - 1))
    s = est.score(X, y)
    assert 0.0 <= s <= 1.0


def test_fit_is_deterministic():
    X, y = toy_dataset(n=16)
    a = MicroTargetDetector(input_size=64, epochs=3, seed=1).fit(X, y)
    b = MicroTargetDetector(input_size=64, epochs=3, seed=1).fit(X, y)
    for ha, hb in zip(a.history_, b.history_):
        assert ha["total"] == hb["total"]


def test_save_and_reload_round_trip(tmp_path):
    X, y = toy_dataset(n=16)
    est = MicroTargetDetector(input_size=64, epochs=3, seed=0).fit(X, y)
    path = tmp_path / "est.mdt"
    est.save(path)
    loaded = MicroTargetDetector.from_checkpoint(path, conf_thresh=est.conf_thresh)
    pa = est.predict(X[:2])
    pb = loaded.predict(X[:2])
    for a, b in zip(pa, pb):
        np.testing.assert_array_equal(a, b)


def test_wrong_input_size_rejected():
    X, y = toy_dataset(n=8)
    est = MicroTargetDetector(input_size=96, epochs=1)
    with pytest.raises(ValueError, match="96px"):
        est.fit(X, y)
