import numpy as np
import pytest

from samlab.errors import ArgumentError
from samlab.utils.autodiff_utils import per_sample_gradients
from samlab.utils.grouping_utils import build_partition
from samlab.utils.landscape_utils import (
    ATTACK_COLUMNS,
    attack_sweep,
    corruption_attack,
    fisher_matrix,
    fisher_spectrum,
    lanczos_top_eigenvalues,
    spectrum_from_gradients,
)
from samlab.utils.model_utils import ParamVector, QuadraticModel


def _vector(values):
    return ParamVector.from_array(values)


def test_zero_budget_attack_changes_nothing(tiny_mlp, tiny_batch):
    params = tiny_mlp.init_params()
    before = params.data.copy()
    report = corruption_attack(tiny_mlp, params, tiny_batch, 2, 0.0, 5)
    assert report.metric_drop == 0.0
    assert report.loss_increase == 0.0
    assert params.data.tobytes() == before.tobytes()


def test_attack_on_half_square_reaches_the_boundary():
    model = QuadraticModel([[0.0]], [[[1.0]]])
    report = corruption_attack(model, _vector([1.0]), None, 2, 0.5, 10)
    assert report.corrupted_loss == pytest.approx(1.125, abs=1e-12)
    assert report.clean_loss == pytest.approx(0.5)
    assert report.steps_used == 10


@pytest.mark.parametrize("p", ["2", "inf"])
def test_attack_never_reports_less_than_clean(tiny_mlp, tiny_batch, p):
    report = corruption_attack(tiny_mlp, tiny_mlp.init_params(), tiny_batch, p, 0.05, 4)
    assert report.corrupted_loss >= report.clean_loss
    assert list(report.row()) == ATTACK_COLUMNS


def _coupled_bowl():
    return QuadraticModel([[0.0, 0.0]], [[[2.0, 1.0], [1.0, 2.0]]])


@pytest.mark.parametrize("p", ["2", "inf"])
def test_attack_loss_grows_with_the_budget_on_a_convex_bowl(p):
    epsilons = [0.05, 0.1, 0.2, 0.4, 0.8]
    reports = [corruption_attack(_coupled_bowl(), _vector([1.0, -0.5]), None, p, eps, 20) for eps in epsilons]
    losses = [r.corrupted_loss for r in reports]
    assert all(lower <= higher for lower, higher in zip(losses, losses[1:]))
    assert losses[0] > reports[0].clean_loss


def test_box_attack_on_the_bowl_ends_in_the_ascent_corner():
    # both gradient coordinates stay positive along the path, so the box corner (eps, eps) is reached
    for eps in (0.1, 0.4):
        report = corruption_attack(_coupled_bowl(), _vector([1.0, -0.5]), None, "inf", eps, 20)
        x, y = 1.0 + eps, -0.5 + eps
        assert report.corrupted_loss == pytest.approx(x * x + x * y + y * y, rel=1e-12)


def test_attack_sweep_emits_one_report_per_budget(tiny_mlp, tiny_batch):
    reports = attack_sweep(tiny_mlp, tiny_mlp.init_params(), tiny_batch, 2, [0.2, 0.05, 0.1], 5)
    assert [r.epsilon for r in reports] == [0.05, 0.1, 0.2]


def test_attack_argument_checks(tiny_mlp, tiny_batch):
    with pytest.raises(ArgumentError):
        corruption_attack(tiny_mlp, tiny_mlp.init_params(), tiny_batch, 2, 0.1, 0)
    with pytest.raises(ArgumentError):
        corruption_attack(tiny_mlp, tiny_mlp.init_params(), tiny_batch, 3, 0.1, 2)


def test_orthogonal_gradients():
    values, trace, method = spectrum_from_gradients([_vector([2.0, 0.0]), _vector([0.0, 1.0])], k=3)
    np.testing.assert_allclose(values, [2.0, 0.5, 0.0], atol=1e-12)
    assert trace == pytest.approx(2.5)
    assert method == "gram"


def test_identical_gradients_have_rank_one():
    g = np.array([1.0, -2.0, 0.5])
    values, _, _ = spectrum_from_gradients([_vector(g)] * 4, k=3)
    assert values[0] == pytest.approx(g @ g)
    np.testing.assert_allclose(values[1:], 0.0, atol=1e-12)


def test_gram_route_matches_dense_fisher(tiny_mlp, rng):
    from samlab.utils.data_utils import Dataset

    data = Dataset("classification", rng.normal(size=(50, 3)), rng.integers(0, 2, size=50), 2)
    gradients = per_sample_gradients(tiny_mlp, tiny_mlp.init_params(), data)
    values, trace, _ = spectrum_from_gradients(gradients, k=10)
    dense = np.linalg.eigvalsh(fisher_matrix(gradients))[::-1][:10]
    np.testing.assert_allclose(values, np.maximum(dense, 0.0), rtol=1e-8, atol=1e-8 * dense[0])
    assert trace == pytest.approx(np.trace(fisher_matrix(gradients)), rel=1e-12)


def test_spectrum_ignores_sample_order(rng):
    gradients = [_vector(rng.normal(size=6)) for _ in range(8)]
    forward, _, _ = spectrum_from_gradients(gradients, k=4)
    backward, _, _ = spectrum_from_gradients(gradients[::-1], k=4)
    np.testing.assert_allclose(forward, backward, rtol=1e-10)


def test_lanczos_matches_dense_eigenvalues(rng):
    factor = rng.normal(size=(30, 30))
    matrix = factor @ factor.T / 30
    values = lanczos_top_eigenvalues(lambda v: matrix @ v, 30, 5, iterations=30)
    np.testing.assert_allclose(values[:5], np.linalg.eigvalsh(matrix)[::-1][:5], rtol=1e-8)


def test_fisher_spectrum_reports_strengths(tiny_mlp, tiny_batch):
    partition = build_partition(tiny_mlp.layout, "layer")
    report = fisher_spectrum(tiny_mlp, tiny_mlp.init_params(), tiny_batch, k=3, sample_count=6, partition=partition)
    assert report.sample_count == 6
    assert report.top == report.eigenvalues[0]
    assert list(report.strengths) == ["model", "W0", "b0", "W1", "b1", "W2", "b2"]
    assert [row["rank"] for row in report.rows()] == [1, 2, 3]


def test_fisher_spectrum_needs_enough_samples(tiny_mlp, tiny_batch):
    with pytest.raises(ArgumentError):
        fisher_spectrum(tiny_mlp, tiny_mlp.init_params(), tiny_batch, k=10, sample_count=5)
