import math

import numpy as np
import pytest

from samlab.errors import ArgumentError, ShapeError, TapeStateError
from samlab.utils import autodiff_utils as ad
from samlab.utils.model_utils import ParamVector, QuadraticModel


def _relative_error(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)


def _check_gradient(build, values, points=100, step=1e-5, seed=0, sample=None):
    """
    `build(tape, params)` records a scalar on the tape; `values` maps parameter
    names to shapes. Compares backward against central differences.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        point = {name: (sample or rng.normal)(size=shape) for name, shape in values.items()}

        def evaluate(current):
            tape = ad.Tape()
            nodes = {name: tape.param(name, value) for name, value in current.items()}
            out = build(tape, nodes)
            return tape, float(out.value)

        tape, _ = evaluate(point)
        grads = ad.backward(tape)
        for name, value in point.items():
            numeric = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                plus = {k: v.copy() for k, v in point.items()}
                minus = {k: v.copy() for k, v in point.items()}
                plus[name][idx] += step
                minus[name][idx] -= step
                numeric[idx] = (evaluate(plus)[1] - evaluate(minus)[1]) / (2 * step)
            worst = max(worst, _relative_error(grads[name], numeric))
    return worst


def _away_from_zero(size):
    rng = np.random.default_rng(int(np.prod(size)) + 17)
    magnitude = rng.uniform(0.1, 2.0, size=size)
    return magnitude * rng.choice([-1.0, 1.0], size=size)


PRIMITIVE_CASES = {
    "add": (lambda t, n: ad.total(ad.multiply(ad.add(n["a"], n["b"]), ad.add(n["a"], n["b"]))),
            {"a": (3, 2), "b": (3, 2)}),
    "add_bias": (lambda t, n: ad.total(ad.tanh(ad.add(n["a"], n["b"]))), {"a": (3, 2), "b": (2,)}),
    "subtract": (lambda t, n: ad.total(ad.tanh(ad.subtract(n["a"], n["b"]))), {"a": (4,), "b": (4,)}),
    "multiply": (lambda t, n: ad.total(ad.multiply(n["a"], n["b"])), {"a": (2, 3), "b": (2, 3)}),
    "matmul": (lambda t, n: ad.total(ad.tanh(ad.matmul(n["a"], n["b"]))), {"a": (3, 4), "b": (4, 2)}),
    "matvec": (lambda t, n: ad.total(ad.tanh(ad.matmul(n["a"], n["b"]))), {"a": (3, 4), "b": (4,)}),
    "relu": (lambda t, n: ad.total(ad.multiply(ad.relu(n["a"]), ad.relu(n["a"]))), {"a": (5,)}),
    "sigmoid": (lambda t, n: ad.total(ad.sigmoid(n["a"])), {"a": (5,)}),
    "tanh": (lambda t, n: ad.total(ad.tanh(n["a"])), {"a": (2, 2)}),
    "softmax_cross_entropy": (lambda t, n: ad.mean(ad.softmax_cross_entropy(n["a"], [0, 2, 1])), {"a": (3, 4)}),
    "mean": (lambda t, n: ad.mean(ad.multiply(n["a"], n["a"])), {"a": (3, 3)}),
    "scale": (lambda t, n: ad.total(ad.tanh(ad.scale(n["a"], -1.5))), {"a": (4,)}),
    "embedding": (lambda t, n: ad.total(ad.tanh(ad.embedding(n["a"], [0, 2, 2, 1]))), {"a": (3, 2)}),
    "concatenate": (lambda t, n: ad.total(ad.tanh(ad.concatenate(n["a"], n["b"]))), {"a": (2, 3), "b": (2, 1)}),
    "transpose": (lambda t, n: ad.total(ad.tanh(ad.matmul(ad.transpose(n["a"]), n["b"]))),
                  {"a": (3, 2), "b": (3,)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_matches_central_differences(name):
    build, shapes = PRIMITIVE_CASES[name]
    sample = _away_from_zero if name == "relu" else None
    assert _check_gradient(build, shapes, sample=sample) < 1e-5


def test_forward_identity_and_matmul():
    tape = ad.Tape()
    x = tape.input("x", shape=(2,))
    ad.scale(x, 1.0)
    np.testing.assert_array_equal(ad.forward(tape, [[1.0, 2.0]]), [1.0, 2.0])

    tape = ad.Tape()
    a = tape.const(np.eye(2))
    x = tape.input("x", shape=(2,))
    ad.matmul(a, x)
    np.testing.assert_array_equal(ad.forward(tape, {"x": [3.0, 4.0]}), [3.0, 4.0])


def test_uniform_logits_cross_entropy_is_log_two():
    tape = ad.Tape()
    logits = tape.param("z", np.zeros(2))
    out = ad.softmax_cross_entropy(logits, 0)
    assert out.value == pytest.approx(math.log(2), abs=1e-12)


def test_forward_shape_mismatch_names_node():
    tape = ad.Tape()
    x = tape.input("x", shape=(3,))
    ad.total(x)
    with pytest.raises(ShapeError, match="node 0"):
        ad.forward(tape, [np.zeros(4)])


def test_forward_replays_bit_exactly():
    rng = np.random.default_rng(5)
    tape = ad.Tape()
    w = tape.param("w", rng.normal(size=(3, 2)))
    x = tape.input("x", shape=(4, 3))
    ad.mean(ad.softmax_cross_entropy(ad.matmul(x, w), [0, 1, 1, 0]))
    batch = rng.normal(size=(4, 3))
    first = ad.forward(tape, [batch]).copy()
    second = ad.forward(tape, [batch])
    assert first.tobytes() == second.tobytes()


def test_square_and_sigmoid_gradients():
    tape = ad.Tape()
    x = tape.param("x", 3.0)
    ad.multiply(x, x)
    assert ad.backward(tape)["x"] == pytest.approx(6.0)

    tape = ad.Tape()
    x = tape.param("x", 0.0)
    ad.sigmoid(x)
    assert ad.backward(tape)["x"] == pytest.approx(0.25)


def test_backward_before_forward_is_a_state_error():
    tape = ad.Tape()
    x = tape.input("x", shape=(2,))
    ad.total(x)
    with pytest.raises(TapeStateError):
        ad.backward(tape)


def test_backward_needs_scalar_output():
    tape = ad.Tape()
    x = tape.param("x", np.ones(3))
    ad.tanh(x)
    with pytest.raises(ShapeError):
        ad.backward(tape)


def test_relu_subgradient_at_zero_is_zero():
    tape = ad.Tape()
    x = tape.param("x", np.array([0.0, 1.0, -1.0]))
    ad.total(ad.relu(x))
    np.testing.assert_array_equal(ad.backward(tape)["x"], [0.0, 1.0, 0.0])


def test_backward_is_linear():
    rng = np.random.default_rng(9)
    value = rng.normal(size=4)

    def grad_of(alpha, beta):
        tape = ad.Tape()
        x = tape.param("x", value)
        f = ad.total(ad.tanh(x))
        g = ad.total(ad.multiply(x, x))
        ad.add(ad.scale(f, alpha), ad.scale(g, beta))
        return ad.backward(tape)["x"]

    np.testing.assert_allclose(grad_of(2.0, -3.0), 2.0 * grad_of(1.0, 0.0) - 3.0 * grad_of(0.0, 1.0), atol=1e-12)


def test_mlp_loss_gradient_matches_finite_differences(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    _, grad = tiny_mlp.loss_and_grad(params, tiny_batch)
    numeric = np.zeros(params.data.size)
    for i in range(params.data.size):
        plus, minus = params.copy(), params.copy()
        plus.data[i] += 1e-5
        minus.data[i] -= 1e-5
        numeric[i] = (tiny_mlp.mean_loss(plus, tiny_batch) - tiny_mlp.mean_loss(minus, tiny_batch)) / 2e-5
    assert _relative_error(grad.data, numeric) < 1e-5


def test_per_sample_gradients_average_to_batch_gradient(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    grads = ad.per_sample_gradients(tiny_mlp, params, tiny_batch.subset(range(5)))
    _, batch_grad = tiny_mlp.loss_and_grad(params, tiny_batch.subset(range(5)))
    assert len(grads) == 5
    np.testing.assert_allclose(np.mean([g.data for g in grads], axis=0), batch_grad.data, atol=1e-10)


def test_per_sample_gradients_singleton_and_duplicates(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    single = tiny_batch.subset([2])
    (only,) = ad.per_sample_gradients(tiny_mlp, params, single)
    _, direct = tiny_mlp.loss_and_grad(params, single)
    np.testing.assert_array_equal(only.data, direct.data)

    twins = ad.per_sample_gradients(tiny_mlp, params, tiny_batch.subset([1, 1]))
    np.testing.assert_array_equal(twins[0].data, twins[1].data)


def test_per_sample_gradients_rejects_empty_batch(tiny_mlp, tiny_batch):
    with pytest.raises(ArgumentError):
        ad.per_sample_gradients(tiny_mlp, tiny_mlp.init_params(), tiny_batch.subset([]))


def test_quadratic_model_gradient():
    model = QuadraticModel([[1.0, 2.0]], [np.diag([2.0, 3.0])])
    params = ParamVector.from_array([0.0, 0.0])
    value, grad = model.loss_and_grad(params, None)
    assert value == pytest.approx(0.5 * (2.0 * 1.0 + 3.0 * 4.0))
    np.testing.assert_allclose(grad.data, [-2.0, -6.0])
