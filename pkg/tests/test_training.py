import io
import math

import numpy as np
import pytest

from dilres.resnet import build, build_from_arch, miniature_arch
from dilres.training import (HISTORY_COLUMNS, NumericalError, SGDState, TrainConfig, predict, scce_loss, sgd_step,
                             softmax, train, train_step, write_history)


def test_softmax_examples():
    assert softmax(np.array([[0.0, 0.0]])).tolist() == [[0.5, 0.5]]
    assert np.allclose(softmax(np.zeros((1, 8))), 0.125)
    p = softmax(np.array([[1.0, 2.0]]))[0]
    assert p[0] == pytest.approx(0.2689414213699951, abs=1e-15)
    assert p[1] == pytest.approx(0.7310585786300049, abs=1e-15)


def test_softmax_stable_and_rejects_nan():
    p = softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(p).all() and p[0, 0] == 1.0
    with pytest.raises(ValueError):
        softmax(np.array([[np.nan, 0.0]]))


def test_scce_examples():
    assert scce_loss(np.array([[0.0, 1.0]]), [1]) == 0.0
    assert scce_loss(np.full((1, 8), 0.125), [3]) == pytest.approx(math.log(8), abs=1e-12)
    assert scce_loss(np.array([[0.5, 0.5]]), [0]) == pytest.approx(math.log(2), abs=1e-12)
    assert scce_loss(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        scce_loss(np.array([[0.5, 0.5]]), [2])


def cfg(**kw):
    base = dict(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
    base.update(kw)
    return TrainConfig(**base)


def test_sgd_examples():
    theta = {"w": np.array([1.0, -2.0])}
    sgd_step(theta, {"w": np.zeros(2)}, cfg())
    assert theta["w"].tolist() == [1.0, -2.0]
    theta = {"w": np.array([0.0])}
    sgd_step(theta, {"w": np.array([1.0])}, cfg())
    assert theta["w"].tolist() == [-0.1]
    theta = {"w": np.array([0.0])}
    state = SGDState()
    c = cfg(learning_rate=1.0, momentum=0.9)
    for _ in range(2):
        state = sgd_step(theta, {"w": np.array([1.0])}, c, state)
    assert theta["w"][0] == pytest.approx(-2.9, abs=1e-15)


def test_sgd_weight_decay_and_shape_check():
    theta = {"w": np.array([2.0])}
    sgd_step(theta, {"w": np.array([0.0])}, cfg(weight_decay=0.5, learning_rate=1.0))
    assert theta["w"].tolist() == [1.0]
    with pytest.raises(ValueError):
        sgd_step(theta, {"w": np.zeros(2)}, cfg())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_overfit_single_sample(rng):
    net = build_from_arch(miniature_arch(class_count=4), seed=1)
    x = rng.random((1, 3, 8, 8)).astype(np.float32)
    y = np.array([2])
    state = SGDState()
    losses = []
    for _ in range(4):
        loss, state = train_step(net, x, y, cfg(learning_rate=0.05), state)
        losses.append(loss)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def _toy_data(rng, n=24, classes=3):
    y = np.arange(n) % classes
    x = rng.random((n, 3, 8, 8)).astype(np.float32) * 0.2
    for i, c in enumerate(y):
        x[i, c, 2:6, 2:6] += 0.8
    return x, y


def test_train_deterministic(rng):
    x, y = _toy_data(rng)
    runs = []
    for _ in range(2):
        net = build_from_arch(miniature_arch(), seed=2)
        hist = train(net, x, y, TrainConfig(learning_rate=0.05, epochs=2, batch_size=8, seed=9))
        runs.append((hist, net))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1].params:
        assert np.array_equal(runs[0][1].params[k], runs[1][1].params[k])


def test_train_learns_toy_task(rng):
    x, y = _toy_data(rng)
    net = build_from_arch(miniature_arch(), seed=2)
    hist = train(net, x, y, TrainConfig(learning_rate=0.05, epochs=15, batch_size=8, seed=1))
    assert hist[-1].train_loss < hist[0].train_loss
    assert hist[-1].val_accuracy == 1.0
    assert np.array_equal(predict(net, x), y)


def test_uniform_labels_converge_to_uniform(rng):
    # every image appears once per class, so the best prediction is uniform
    classes = 3
    base = rng.random((8, 3, 8, 8)).astype(np.float32)
    x = np.repeat(base, classes, axis=0)
    y = np.tile(np.arange(classes), 8)
    net = build_from_arch(miniature_arch(class_count=classes), seed=0)
    hist = train(net, x, y, TrainConfig(learning_rate=0.05, epochs=20, batch_size=24, seed=0))
    assert abs(hist[-1].train_loss - math.log(classes)) < 0.05


def test_train_errors(rng):
    net = build_from_arch(miniature_arch(), seed=0)
    with pytest.raises(ValueError):
        train(net, np.zeros((0, 3, 8, 8), dtype=np.float32), np.zeros(0, dtype=int), TrainConfig())
    with pytest.raises(ValueError):
        train(net, np.zeros((2, 3, 8, 8), dtype=np.float32), np.array([0, 3]), TrainConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises(rng):
    net = build_from_arch(miniature_arch(), seed=0)
    net.params["fc.bias"][0] = np.inf
    with pytest.raises(NumericalError):
        train_step(net, rng.random((2, 3, 8, 8)).astype(np.float32), np.array([0, 1]), cfg(), SGDState())


def test_history_csv():
    from dilres.training import EpochRecord
    buf = io.StringIO()
    write_history([EpochRecord(1, 0.5, 0.25, 0.125)], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS) == "epoch,train_loss,val_accuracy,val_macro_f1"
    assert lines[1] == "1,0.5,0.25,0.125"


def test_predict_ties_go_to_lowest_index():
    net = build(18, base_width=2, class_count=3)
    for k in net.params:
        if k.startswith("fc"):
            net.params[k][...] = 0
    assert predict(net, np.zeros((2, 3, 32, 32), dtype=np.float32)).tolist() == [0, 0]
