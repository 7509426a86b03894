import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import cnn
from cnn import CheckpointError, Dataset, Model, ModelConfig, ModelError, ShapeMismatchError, TrainConfig


def reduced_model(seed=0, num_classes=3):
    config = ModelConfig(input_shape=(8, 8, 3), conv_filters=[2], dense_hidden=5, num_classes=num_classes)
    return cnn.init_model(config, seed)


def separable_images(n_per_class=20, seed=0):
    # Each class lights up a different image quadrant.
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, (r, c) in enumerate([(0, 0), (0, 4), (4, 0)]):
        for _ in range(n_per_class):
            img = rng.uniform(0, 0.1, size=(8, 8, 3))
            img[r:r + 4, c:c + 4] += 1.0
            images.append(img)
            labels.append(label)
    return np.array(images), np.array(labels)


# Layers

def test_conv_of_ones():
    out = cnn.conv2d_forward(np.ones((3, 3, 1)), np.ones((2, 2, 1, 1)), np.zeros(1))
    assert out.shape == (2, 2, 1)
    assert np.all(out == 4.0)


def test_conv_delta_kernel_crops():
    x = np.random.default_rng(0).normal(size=(5, 6, 2))
    kernels = np.zeros((3, 3, 2, 2))
    kernels[0, 0, 0, 0] = 1.0
    kernels[0, 0, 1, 1] = 1.0
    out = cnn.conv2d_forward(x, kernels, np.zeros(2))
    np.testing.assert_array_equal(out, x[:3, :4])


def test_conv_bias_only():
    out = cnn.conv2d_forward(np.ones((4, 4, 3)), np.zeros((3, 3, 3, 2)), np.array([5.0, 5.0]))
    assert np.all(out == 5.0)


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatchError):
        cnn.conv2d_forward(np.ones((4, 4, 2)), np.ones((3, 3, 3, 1)), np.zeros(1))
    with pytest.raises(ShapeMismatchError):
        cnn.conv2d_forward(np.ones((2, 2, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))


def test_conv_is_linear_without_bias():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(2, 9, 9, 3))
    kernels = rng.normal(size=(3, 3, 3, 4))
    bias = np.zeros(4)
    a, b = 2.5, -0.75
    combined = cnn.conv2d_forward(a * x + b * y, kernels, bias)
    separate = a * cnn.conv2d_forward(x, kernels, bias) + b * cnn.conv2d_forward(y, kernels, bias)
    np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-12)


def test_maxpool_single_window():
    out, argmax = cnn.maxpool_forward(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
    assert out.tolist() == [[[4.0]]]
    assert argmax.tolist() == [[[3]]]


def test_maxpool_constant_and_odd_crop():
    out, _ = cnn.maxpool_forward(np.full((5, 7, 2), 2.5))
    assert out.shape == (2, 3, 2)
    assert np.all(out == 2.5)


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[1.0, 9.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    out, argmax = cnn.maxpool_forward(x)
    dx = cnn.maxpool_backward(np.full(out.shape, 7.0), argmax, x.shape)
    assert dx.reshape(2, 2).tolist() == [[0.0, 7.0], [0.0, 0.0]]


@pytest.mark.parametrize("shape", [(2, 7, 9, 3), (1, 5, 5, 1), (3, 8, 11, 2)])
def test_maxpool_backward_conserves_gradient_mass(shape):
    rng = np.random.default_rng(sum(shape))
    x = rng.normal(size=shape)
    out, argmax = cnn.maxpool_forward(x)
    dout = rng.normal(size=out.shape)
    dx = cnn.maxpool_backward(dout, argmax, x.shape)
    assert dx.shape == x.shape
    assert abs(dx.sum() - dout.sum()) < 1e-12
    assert np.count_nonzero(dx) == dout.size
    h, w = out.shape[1] * 2, out.shape[2] * 2
    assert not dx[:, h:].any()
    assert not dx[:, :, w:].any()


def test_dense_forward():
    x = np.array([2.0, 3.0])
    assert cnn.dense_forward(x, np.eye(2), np.zeros(2)).tolist() == [2.0, 3.0]
    assert cnn.dense_forward(x, np.zeros((2, 2)), np.array([1.0, -1.0])).tolist() == [1.0, -1.0]
    assert cnn.dense_forward(x, np.array([[1.0, 1.0]]), np.zeros(1)).tolist() == [5.0]
    with pytest.raises(ShapeMismatchError):
        cnn.dense_forward(x, np.ones((1, 3)), np.zeros(1))


def test_softmax_uniform():
    probs, loss = cnn.softmax_xent(np.zeros(3), 1)
    assert probs == pytest.approx([1 / 3] * 3)
    assert loss == pytest.approx(math.log(3))


def test_softmax_confident_label_has_no_loss():
    _, loss = cnn.softmax_xent(np.array([1000.0, 0.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-12)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(logits):
    probs, _ = cnn.softmax_xent(logits, [0, 1, 4])
    assert np.all(probs > 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)


@given(arrays(np.float64, 4, elements=st.floats(-50, 50)), st.floats(-1e3, 1e3), st.integers(0, 3))
def test_softmax_shift_invariance(logits, shift, label):
    probs, loss = cnn.softmax_xent(logits, label)
    shifted_probs, shifted_loss = cnn.softmax_xent(logits + shift, label)
    np.testing.assert_allclose(shifted_probs, probs, rtol=1e-9, atol=1e-12)
    assert shifted_loss == pytest.approx(loss, rel=1e-9, abs=1e-9)


# Gradients

def test_gradients_match_finite_differences():
    model = reduced_model(seed=3)
    rng = np.random.default_rng(4)
    images = rng.uniform(size=(4, 8, 8, 3))
    labels = np.array([0, 1, 2, 1])
    grads, _ = cnn.backward(model, images, labels)

    h = 1e-5
    for name, theta in model.params.items():
        numeric = np.zeros_like(theta)
        for index in np.ndindex(theta.shape):
            original = theta[index]
            theta[index] = original + h
            _, up = cnn.softmax_xent(cnn.forward(model, images)[0], labels)
            theta[index] = original - h
            _, down = cnn.softmax_xent(cnn.forward(model, images)[0], labels)
            theta[index] = original
            numeric[index] = (up - down) / (2 * h)
        np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-8, err_msg=name)


def test_duplicated_sample_gives_same_gradient():
    model = reduced_model(seed=1)
    image = np.random.default_rng(2).uniform(size=(1, 8, 8, 3))
    single, _ = cnn.backward(model, image, [2])
    double, _ = cnn.backward(model, np.concatenate([image, image]), [2, 2])
    for name in single:
        np.testing.assert_allclose(double[name], single[name], rtol=1e-12, atol=1e-15)


def test_output_bias_gradient_with_zero_output_weights():
    model = reduced_model(seed=1)
    model.params["output.weight"][:] = 0.0
    images = np.random.default_rng(2).uniform(size=(3, 8, 8, 3))
    labels = np.array([0, 2, 2])
    grads, _ = cnn.backward(model, images, labels)
    expected = np.full(3, 1 / 3) - np.eye(3)[labels].mean(axis=0)
    np.testing.assert_allclose(grads["output.bias"], expected, atol=1e-12)


# Optimiser

def scalar_model(theta=0.0):
    return Model(config=reduced_model().config, params={"w": np.array(theta)}, rms_state={"w": np.array(0.0)})


def test_rmsprop_first_step():
    cfg = TrainConfig(lr=1e-3, rho=0.9, epsilon=1e-8)
    updated = cnn.rmsprop_step(scalar_model(), {"w": np.array(1.0)}, cfg)
    assert float(updated.rms_state["w"]) == pytest.approx(0.1)
    assert float(updated.params["w"]) == pytest.approx(-1e-3 / (math.sqrt(0.1) + 1e-8), rel=1e-12)
    assert float(updated.params["w"]) == pytest.approx(-3.1623e-3, rel=1e-4)


def test_rmsprop_zero_gradient_decays_accumulator():
    cfg = TrainConfig()
    model = Model(config=reduced_model().config, params={"w": np.array(2.0)}, rms_state={"w": np.array(0.5)})
    updated = cnn.rmsprop_step(model, {"w": np.array(0.0)}, cfg)
    assert float(updated.params["w"]) == 2.0
    assert float(updated.rms_state["w"]) == pytest.approx(0.45)
    assert float(model.rms_state["w"]) == 0.5


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
def test_rmsprop_first_step_magnitude_is_scale_free(scale):
    cfg = TrainConfig(lr=1e-3, rho=0.9, epsilon=1e-12)
    updated = cnn.rmsprop_step(scalar_model(), {"w": np.array(scale)}, cfg)
    assert abs(float(updated.params["w"])) == pytest.approx(1e-3 / math.sqrt(0.1), rel=1e-6)


# Evaluation

def test_uniform_model_scores_class_zero_fraction():
    model = reduced_model()
    model.params["output.weight"][:] = 0.0
    images, labels = separable_images(n_per_class=4)
    result = cnn.evaluate(model, images, labels)
    assert result.accuracy == pytest.approx(1 / 3)
    assert result.confusion[:, 0].tolist() == [4, 4, 4]
    assert result.confusion.sum() == 12
    assert result.mean_loss == pytest.approx(math.log(3))


def test_evaluate_errors():
    model = reduced_model()
    with pytest.raises(ModelError):
        cnn.evaluate(model, np.zeros((0, 8, 8, 3)), np.zeros(0, dtype=int))
    with pytest.raises(ShapeMismatchError):
        cnn.evaluate(model, np.zeros((2, 8, 8, 3)), np.array([0, 3]))
    with pytest.raises(ShapeMismatchError):
        cnn.evaluate(model, np.zeros((2, 9, 9, 3)), np.array([0, 1]))


def test_predict_proba_rows_sum_to_one():
    images, _ = separable_images(n_per_class=3)
    probs = cnn.predict_proba(reduced_model(), images)
    assert probs.shape == (9, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


# Splits

def test_split_sizes():
    labels = np.repeat([0, 1, 2, 3], 25)
    train, val, test = cnn.split_dataset(np.arange(100), labels, (0.7, 0.15, 0.15), seed=3)
    assert (len(train.labels), len(val.labels), len(test.labels)) == (70, 15, 15)
    everything = np.concatenate([train.images, val.images, test.images])
    assert sorted(everything.tolist()) == list(range(100))


def test_split_is_stratified():
    labels = np.repeat([0, 1, 2], [50, 30, 20])
    for part, fraction in zip(cnn.split_dataset(np.arange(100), labels, seed=1), (0.7, 0.15, 0.15)):
        counts = np.bincount(part.labels, minlength=3)
        expected = np.array([50, 30, 20]) * len(part.labels) / 100
        assert np.all(np.abs(counts - expected) <= 1)


def test_split_is_seeded():
    labels = np.repeat([0, 1], 20)
    first = cnn.split_dataset(np.arange(40), labels, seed=5)
    again = cnn.split_dataset(np.arange(40), labels, seed=5)
    other = cnn.split_dataset(np.arange(40), labels, seed=6)
    for a, b in zip(first, again):
        assert np.array_equal(a.images, b.images)
    assert not np.array_equal(first[0].images, other[0].images)


def test_split_errors():
    with pytest.raises(ModelError):
        cnn.split_dataset(np.arange(7), np.array([0, 0, 0, 0, 0, 1, 1]))
    with pytest.raises(ModelError):
        cnn.split_dataset(np.zeros(0), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        cnn.split_dataset(np.arange(10), np.zeros(10, dtype=int), (0.7, 0.7, 0.1))


def test_group_split_holds_out_whole_subjects():
    groups = np.repeat(np.arange(6), 10)
    labels = np.tile(np.arange(2), 30)
    train, val, test = cnn.split_by_group(np.arange(60), labels, groups, seed=2)
    subjects = [set(groups[part.images]) for part in (train, val, test)]
    assert all(subjects)
    assert not (subjects[0] & subjects[1] or subjects[0] & subjects[2] or subjects[1] & subjects[2])
    assert len(train.labels) + len(val.labels) + len(test.labels) == 60

    with pytest.raises(ModelError):
        cnn.split_by_group(np.arange(20), labels[:20], np.repeat([0, 1], 10))


# Training

def test_training_separates_quadrants():
    images, labels = separable_images(n_per_class=30)
    train_set, val_set, _ = cnn.split_dataset(images, labels, seed=0)
    config = ModelConfig(input_shape=(8, 8, 3), conv_filters=[6], dense_hidden=16, num_classes=3)
    model, history = cnn.train(cnn.init_model(config, seed=0), train_set, val_set,
                               TrainConfig(lr=5e-3, epochs=15, batch_size=8, seed=0))
    assert len(history) == 15
    assert set(history[0]) == {"epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"}
    assert cnn.evaluate(model, val_set.images, val_set.labels).accuracy == max(h["val_accuracy"] for h in history)
    assert max(h["val_accuracy"] for h in history) >= 0.9


def test_training_loss_falls_by_epoch_five():
    images, labels = separable_images(n_per_class=30)
    config = ModelConfig(input_shape=(8, 8, 3), conv_filters=[6], dense_hidden=16, num_classes=3)
    _, history = cnn.train(cnn.init_model(config, seed=0), Dataset(images, labels), None,
                           TrainConfig(lr=5e-3, epochs=5, batch_size=8, seed=0))
    assert history[4]["train_loss"] < history[0]["train_loss"]


def test_training_is_deterministic():
    images, labels = separable_images(n_per_class=6)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=9)
    _, first = cnn.train(reduced_model(), Dataset(images, labels), Dataset(images, labels), cfg)
    _, second = cnn.train(reduced_model(), Dataset(images, labels), Dataset(images, labels), cfg)
    assert first == second


def test_zero_learning_rate_keeps_parameters():
    images, labels = separable_images(n_per_class=4)
    model = reduced_model()
    trained, history = cnn.train(model, Dataset(images, labels), None, TrainConfig(lr=0.0, epochs=2))
    for name in model.params:
        assert np.array_equal(trained.params[name], model.params[name])
    assert history[-1]["train_accuracy"] == cnn.evaluate(model, images, labels).accuracy


def test_training_rejects_empty_dataset():
    with pytest.raises(ModelError):
        cnn.train(reduced_model(), Dataset(np.zeros((0, 8, 8, 3)), np.zeros(0, dtype=int)), None, TrainConfig())


# Checkpoints

def test_checkpoint_round_trip(tmp_path):
    images, labels = separable_images(n_per_class=4)
    model, _ = cnn.train(reduced_model(), Dataset(images, labels), None, TrainConfig(epochs=1))
    cnn.save_checkpoint(model, tmp_path / "m.ckpt")
    back = cnn.load_checkpoint(tmp_path / "m.ckpt")

    assert back.config == model.config
    for name in model.params:
        assert back.params[name].tobytes() == model.params[name].tobytes()
        assert back.rms_state[name].tobytes() == model.rms_state[name].tobytes()


def test_truncated_checkpoint(tmp_path):
    cnn.save_checkpoint(reduced_model(), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    for cut in (6, 40, len(raw) - 8):
        (tmp_path / "cut.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError, match="corrupt checkpoint"):
            cnn.load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_class_count_mismatch(tmp_path):
    cnn.save_checkpoint(reduced_model(num_classes=3), tmp_path / "m.ckpt")
    with pytest.raises(ShapeMismatchError):
        cnn.load_checkpoint(tmp_path / "m.ckpt", num_classes=5)
