import math
import os

import numpy as np
import pytest

from samlab.errors import ArgumentError, DataError
from samlab.utils.data_utils import Dataset
from samlab.utils.model_utils import (
    Layout,
    ParamVector,
    build_mlp,
    build_rnn_lm,
    model_from_descriptor,
)
from tests.conftest import FIXTURES


def _numpy_mlp_loss(model, params, features, labels):
    h = features
    last = len(model.layer_sizes) - 2
    for i in range(last + 1):
        h = h @ params.segment(f"W{i}") + params.segment(f"b{i}")
        if i < last:
            h = np.maximum(h, 0.0)
    shifted = h - h.max(axis=1, keepdims=True)
    losses = np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(len(labels)), labels]
    return float(np.mean(losses))


def test_parameter_counts():
    assert build_mlp([784, 100, 100, 10]).parameter_count() == 89610
    assert build_mlp([784, 100, 100, 10]).layout.size == 89610
    assert build_mlp([2, 1]).layout.size == 3


def test_non_positive_size_is_rejected():
    with pytest.raises(ArgumentError):
        build_mlp([3, 0, 2])


def test_same_seed_same_initialization():
    first = build_mlp([4, 6, 3], seed=11).init_params()
    second = build_mlp([4, 6, 3], seed=11).init_params()
    other = build_mlp([4, 6, 3], seed=12).init_params()
    assert first.data.tobytes() == second.data.tobytes()
    assert not np.array_equal(first.data, other.data)


def test_layout_segments_are_contiguous():
    layout = build_mlp([3, 5, 2]).layout
    assert layout.names() == ["W0", "b0", "W1", "b1"]
    assert [s.offset for s in layout] == [0, 15, 20, 30]
    with pytest.raises(ArgumentError):
        ParamVector(np.zeros(5), layout)


def test_uniform_logits_give_log_classes(rng):
    model = build_mlp([5, 10])
    data = Dataset("classification", rng.normal(size=(7, 5)), rng.integers(0, 10, size=7), 10)
    loss = model.mean_loss(ParamVector.zeros(model.layout), data)
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_saturated_logits_give_vanishing_loss():
    model = build_mlp([1, 2])
    params = ParamVector.zeros(model.layout)
    params.segment("W0")[:] = [[30.0, -30.0]]
    data = Dataset("classification", np.array([[1.0]]), np.array([0]), 2)
    assert model.mean_loss(params, data) < 1e-9


def test_loss_matches_numpy_forward(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    expected = _numpy_mlp_loss(tiny_mlp, params, tiny_batch.features, tiny_batch.labels)
    assert tiny_mlp.mean_loss(params, tiny_batch) == pytest.approx(expected, abs=1e-12)


def test_evaluate_reports_accuracy(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    logits = tiny_mlp.predict_logits(params, tiny_batch.features)
    evaluation = tiny_mlp.evaluate(params, tiny_batch)
    assert evaluation.metric_name == "accuracy"
    assert evaluation.higher_is_better
    assert evaluation.metric == pytest.approx(np.mean(np.argmax(logits, axis=1) == tiny_batch.labels))


def test_label_outside_model_classes_is_a_data_error(tiny_mlp, rng):
    data = Dataset("classification", rng.normal(size=(3, 3)), np.array([0, 4, 1]), 5)
    with pytest.raises(DataError):
        tiny_mlp.mean_loss(tiny_mlp.init_params(), data)


def test_zero_corruption_equals_plain_loss(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    plain, _ = tiny_mlp.loss(params, tiny_batch)
    perturbed, _ = tiny_mlp.perturbed_loss(params, params.zeros_like(), tiny_batch)
    assert plain == perturbed


def test_corruption_round_trip_with_dyadic_values(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    params = params.with_data(np.round(params.data * 1024) / 1024)
    corruption = params.with_data(np.full(params.data.size, 0.125))
    shifted = params.with_data(params.data + corruption.data)
    back, _ = tiny_mlp.perturbed_loss(shifted, corruption.with_data(-corruption.data), tiny_batch)
    plain, _ = tiny_mlp.loss(params, tiny_batch)
    assert back == plain


def test_directional_difference_matches_gradient(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    _, grad = tiny_mlp.loss_and_grad(params, tiny_batch)
    h = 1e-5
    for i in (0, 7, 20, params.data.size - 1):
        step = params.zeros_like()
        step.data[i] = h
        plus, _ = tiny_mlp.perturbed_loss(params, step, tiny_batch)
        minus, _ = tiny_mlp.perturbed_loss(params, step.with_data(-step.data), tiny_batch)
        numeric = (plus - minus) / (2 * h)
        assert numeric == pytest.approx(grad.data[i], rel=1e-5, abs=1e-8)


def test_corruption_with_other_layout_is_rejected(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    with pytest.raises(ArgumentError):
        tiny_mlp.perturbed_loss(params, ParamVector.from_array(np.zeros(params.data.size)), tiny_batch)


def test_loss_is_invariant_to_batch_order(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    reordered = tiny_batch.subset([5, 3, 1, 0, 2, 4])
    assert tiny_mlp.mean_loss(params, reordered) == pytest.approx(tiny_mlp.mean_loss(params, tiny_batch), abs=1e-12)


def _sequences(features, labels, vocab):
    return Dataset("sequence", np.array(features), np.array(labels), vocab)


def test_rnn_single_step_window():
    model = build_rnn_lm(3, embed_size=2, hidden_size=2, seed=1)
    params = model.init_params()
    data = _sequences([[0], [1]], [[1], [2]], 3)
    evaluation = model.evaluate(params, data)
    assert evaluation.metric_name == "perplexity"
    assert evaluation.metric == pytest.approx(math.exp(evaluation.loss))


def test_rnn_gradient_matches_finite_differences():
    model = build_rnn_lm(4, embed_size=3, hidden_size=3, tied=True, seed=2)
    params = model.init_params()
    data = _sequences([[0, 1, 2], [3, 2, 1]], [[1, 2, 3], [2, 1, 0]], 4)
    _, grad = model.loss_and_grad(params, data)
    numeric = np.zeros(params.data.size)
    for i in range(params.data.size):
        plus, minus = params.copy(), params.copy()
        plus.data[i] += 1e-5
        minus.data[i] -= 1e-5
        numeric[i] = (model.mean_loss(plus, data) - model.mean_loss(minus, data)) / 2e-5
    assert np.linalg.norm(grad.data - numeric) / np.linalg.norm(numeric) < 1e-5


def test_rnn_rejects_out_of_vocabulary_tokens():
    model = build_rnn_lm(3, embed_size=2, hidden_size=2)
    data = _sequences([[0, 4]], [[1, 2]], 5)
    with pytest.raises(DataError):
        model.mean_loss(model.init_params(), data)


def test_tied_projection_needs_matching_sizes():
    with pytest.raises(ArgumentError):
        build_rnn_lm(5, embed_size=3, hidden_size=4, tied=True)


def test_model_from_descriptor_round_trip():
    mlp = build_mlp([3, 4, 2], activation="tanh")
    assert model_from_descriptor(mlp.descriptor()).layout == mlp.layout
    rnn = build_rnn_lm(6, 4, 5)
    assert model_from_descriptor(rnn.descriptor()).layout == rnn.layout
    with pytest.raises(ArgumentError):
        model_from_descriptor({"kind": "quadratic"})


def test_layout_equality_and_hash():
    first = Layout.from_shapes([("a", (2, 3)), ("b", (3,))])
    second = Layout.from_shapes([("a", (2, 3)), ("b", (3,))])
    assert first == second
    assert hash(first) == hash(second)
    assert first.size == 9


def test_golden_loss_on_a_fixed_batch():
    path = os.path.join(FIXTURES, "mlp_golden.txt")
    with open(path, encoding="utf-8") as f:
        header = [line for line in f if line.startswith("#")]
    expected = float(next(line for line in header if "expected_loss" in line).split("=")[1])
    table = np.loadtxt(path, comments="#")
    batch = Dataset("classification", table[:, :2], table[:, 2].astype(np.int64), 2)
    assert len(batch) == 8

    model = build_mlp([2, 2, 2])
    params = ParamVector.zeros(model.layout)
    params.segment("W0")[:] = np.eye(2)
    params.segment("W1")[:] = [[1.0, -1.0], [0.0, 0.0]]
    assert model.mean_loss(params, batch) == pytest.approx(expected, abs=1e-12)
