"""
Distribution shift as parameter shift.

Quadratic problems give closed-form minimizers for the training weighting
p and the shifted weighting p*, so the first-order shift estimate, its
norm bound and the linear growth of the shift under mixing can be checked
exactly. The neural trials repeat the mixing protocol with fine-tuning.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from samlab.errors import ArgumentError, NumericalError
from samlab.utils.data_utils import Dataset
from samlab.utils.model_utils import ParamVector, QuadraticModel

CONDITION_LIMIT = 1e12
WEIGHT_TOLERANCE = 1e-9


def _xlogx(t):
    t = np.asarray(t, dtype=np.float64)
    return np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)


@dataclass(frozen=True)
class FDivergenceSpec:
    """Generator f with f(1) = 0 and Taylor coefficients f(1 + x) = a1 x + a2 x^2 + o(x^2)."""

    name: str
    f: Callable
    a1: float
    a2: float

    def __post_init__(self):
        if abs(float(self.f(np.array(1.0)))) > 1e-12:
            raise ArgumentError(f"generator {self.name} must satisfy f(1) = 0")
        if self.a2 == 0:
            raise ArgumentError(f"generator {self.name} needs a nonzero second-order coefficient")


KL = FDivergenceSpec("kl", _xlogx, 1.0, 0.5)


@dataclass
class QuadraticShiftProblem:
    centers: np.ndarray
    hessians: np.ndarray
    base: np.ndarray
    shifted: np.ndarray

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        count, dim = self.centers.shape
        self.hessians = np.asarray(self.hessians, dtype=np.float64).reshape(count, dim, dim)
        self.base = np.asarray(self.base, dtype=np.float64)
        self.shifted = np.asarray(self.shifted, dtype=np.float64)
        for name, weights in (("base", self.base), ("shifted", self.shifted)):
            _check_weights(weights, count, name)
        if np.any(self.base <= 0):
            raise ArgumentError("base weights must be positive for the ratio r = p*/p - 1")
        if not np.allclose(self.hessians, np.swapaxes(self.hessians, 1, 2)):
            raise ArgumentError("instance hessians must be symmetric")
        if np.any(np.linalg.eigvalsh(self.hessians)[:, 0] <= 0):
            raise ArgumentError("instance hessians must be positive definite")

    @property
    def dim(self):
        return self.centers.shape[1]

    @property
    def ratio(self):
        return self.shifted / self.base - 1.0

    @property
    def model(self):
        return QuadraticModel(self.centers, self.hessians)

    @property
    def mu(self):
        return float(np.linalg.eigvalsh(weighted_hessian(self, self.base))[0])

    def instance_gradients(self, theta):
        return np.einsum("nij,nj->ni", self.hessians, theta - self.centers)


def _check_weights(weights, count, name="weights"):
    if weights.shape != (count,):
        raise ArgumentError(f"{name} weights need {count} entries, got {weights.shape}")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
        raise ArgumentError(f"{name} weights must be non-negative and sum to 1")


def weighted_hessian(problem, weights):
    return np.einsum("n,nij->ij", weights, problem.hessians)


def exact_minimizer(problem, weights):
    weights = np.asarray(weights, dtype=np.float64)
    _check_weights(weights, problem.centers.shape[0])
    hessian = weighted_hessian(problem, weights)
    condition = np.linalg.cond(hessian)
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise NumericalError(f"weighted hessian is singular (condition number {condition:.3g})")
    rhs = np.einsum("n,nij,nj->i", weights, problem.hessians, problem.centers)
    return ParamVector.from_array(np.linalg.solve(hessian, rhs))


def delta_first_order(problem):
    """-H^-1 E_p[r(z) grad l(theta; z)] at the training minimizer theta."""
    theta = exact_minimizer(problem, problem.base).data
    grads = problem.instance_gradients(theta)
    expectation = np.einsum("n,n,ni->i", problem.base, problem.ratio, grads)
    return ParamVector.from_array(-np.linalg.solve(weighted_hessian(problem, problem.base), expectation))


def delta_exact(problem):
    theta = exact_minimizer(problem, problem.base)
    theta_star = exact_minimizer(problem, problem.shifted)
    return theta.with_data(theta_star.data - theta.data)


def divergence(base, shifted, spec=KL, order="exact"):
    base = np.asarray(base, dtype=np.float64)
    shifted = np.asarray(shifted, dtype=np.float64)
    if order == "exact":
        return float(np.sum(base * spec.f(shifted / base)))
    if order == "second":
        return float(spec.a2 * np.sum(base * np.square(shifted / base - 1.0)))
    raise ArgumentError(f"unknown divergence order '{order}', expected 'exact' or 'second'")


def delta_bound(problem, spec=KL):
    """(1/mu) sqrt(C_f / a2 * E_p ||grad l(theta; z)||^2) with C_f taken exactly from the weights."""
    mu = problem.mu
    if mu <= 0:
        raise ArgumentError(f"strong convexity constant must be positive, got {mu}")
    theta = exact_minimizer(problem, problem.base).data
    grads = problem.instance_gradients(theta)
    second_moment = float(np.sum(problem.base * np.sum(np.square(grads), axis=1)))
    c_f = max(divergence(problem.base, problem.shifted, spec), 0.0)
    return math.sqrt(c_f / spec.a2 * second_moment) / mu


def mix_weights(base, shifted, eta):
    if not 0.0 <= eta <= 1.0:
        raise ArgumentError(f"mix fraction must lie in [0, 1], got {eta}")
    return (1.0 - eta) * np.asarray(base, dtype=np.float64) + eta * np.asarray(shifted, dtype=np.float64)


def random_quadratic_problem(instances=8, dim=4, shift_scale=0.05, shared_hessian=True, seed=0):
    """
    Random pool with A_i = I + 0.3 B B^T / dim (A_i = I when shared) and
    p* = p (1 + s r~), where r~ is drawn from [-0.5, 0.5] and centred under p.
    """
    if instances < 1 or dim < 1:
        raise ArgumentError("need at least one instance and one dimension")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(instances, dim))
    if shared_hessian:
        hessians = np.repeat(np.eye(dim)[None], instances, axis=0)
    else:
        factors = rng.normal(size=(instances, dim, dim))
        hessians = np.eye(dim)[None] + 0.3 * np.einsum("nij,nkj->nik", factors, factors) / dim
    base = rng.uniform(0.5, 1.5, size=instances)
    base /= base.sum()
    direction = rng.uniform(-0.5, 0.5, size=instances)
    direction -= np.sum(base * direction)
    shifted = base * (1.0 + shift_scale * direction)
    shifted /= shifted.sum()
    return QuadraticShiftProblem(centers, hessians, base, shifted)


# --------------------------------------------------------------
# Mixing and trials
# --------------------------------------------------------------

@dataclass(frozen=True)
class MixSpec:
    fraction: float
    train: Dataset
    test: Dataset

    def quotas(self):
        total = len(self.train)
        from_train = int(math.floor((1.0 - self.fraction) * total + 1e-9))
        return from_train, total - from_train


def mix_datasets(spec, seed=0):
    if not 0.0 <= spec.fraction <= 1.0:
        raise ArgumentError(f"mix fraction must lie in [0, 1], got {spec.fraction}")
    from_train, from_test = spec.quotas()
    if from_test > len(spec.test):
        raise ArgumentError(f"mix needs {from_test} shifted instances but only {len(spec.test)} exist")
    rng = np.random.default_rng(seed)
    train_part = spec.train.subset(rng.choice(len(spec.train), size=from_train, replace=False))
    test_part = spec.test.subset(rng.choice(len(spec.test), size=from_test, replace=False))
    mixed = Dataset.concatenate([train_part, test_part], f"mix-{spec.fraction:g}")
    return mixed.subset(rng.permutation(len(mixed)))


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 3
    learning_rate: float = 0.05
    tol: float = 1e-4
    patience: int = 2
    batch_size: int = 0


@dataclass
class FinetuneResult:
    params: ParamVector
    epochs_run: int
    final_loss: float
    grad_norm: float
    converged: bool
    diverged: bool


def finetune(model, params, dataset, cfg, seed=0):
    """
    Plain SGD from `params`; batch_size 0 means full batch. Stops once the
    full-data gradient norm falls below cfg.tol and reports divergence when
    the loss is non-finite or rises for cfg.patience consecutive epochs.
    """
    params = params.copy()
    rng = np.random.default_rng(seed)
    batch_size = cfg.batch_size or len(dataset)
    loss, grad = model.loss_and_grad(params, dataset)
    rises = 0
    epochs_run = 0
    while grad.norm() >= cfg.tol and epochs_run < cfg.epochs:
        for batch in dataset.batches(batch_size, rng):
            _, batch_grad = model.loss_and_grad(params, batch)
            params.data -= cfg.learning_rate * batch_grad.data
        epochs_run += 1
        previous = loss
        loss, grad = model.loss_and_grad(params, dataset)
        if not math.isfinite(loss):
            return FinetuneResult(params, epochs_run, loss, float("nan"), False, True)
        rises = rises + 1 if loss > previous else 0
        if rises >= cfg.patience:
            return FinetuneResult(params, epochs_run, loss, grad.norm(), False, True)
    return FinetuneResult(params, epochs_run, loss, grad.norm(), grad.norm() < cfg.tol, False)


@dataclass
class ShiftTrialRecord:
    fraction: float
    delta_norm: float
    epochs_run: int = 0
    final_loss: float = float("nan")
    grad_norm: float = float("nan")
    converged: bool = True
    failed: bool = False

    def row(self):
        return {
            "mix": self.fraction,
            "delta_norm": self.delta_norm,
            "epochs_run": self.epochs_run,
            "final_loss": self.final_loss,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "failed": self.failed,
        }


TRIAL_COLUMNS = ["mix", "delta_norm", "epochs_run", "final_loss", "grad_norm", "converged", "failed"]


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float
    points: int


def linear_fit(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 2:
        return LinearFit(float("nan"), float("nan"), float("nan"), int(xs.size))
    slope, intercept = np.polyfit(xs, ys, 1)
    residual = float(np.sum(np.square(ys - (slope * xs + intercept))))
    total = float(np.sum(np.square(ys - ys.mean())))
    r2 = 1.0 - residual / total if total > 0 else (1.0 if residual == 0 else 0.0)
    return LinearFit(float(slope), float(intercept), r2, int(xs.size))


@dataclass
class ShiftTrialSummary:
    records: list
    fit: LinearFit
    failed: int
    noise_floor: float
    reference_norm: float = float("nan")

    def summary_row(self):
        return {
            "slope": self.fit.slope,
            "intercept": self.fit.intercept,
            "r2": self.fit.r2,
            "points": self.fit.points,
            "failed": self.failed,
            "noise_floor": self.noise_floor,
            "reference_norm": self.reference_norm,
        }


SUMMARY_COLUMNS = ["slope", "intercept", "r2", "points", "failed", "noise_floor", "reference_norm"]


def _summarize(records, noise_floor, reference_norm=float("nan")):
    kept = [r for r in records if not r.failed]
    fit = linear_fit([r.fraction for r in kept], [r.delta_norm for r in kept])
    failed = len(records) - len(kept)
    logging.info(f"Shift trials: slope={fit.slope:.6g} intercept={fit.intercept:.6g} r2={fit.r2:.6f} "
                 f"({fit.points} fitted, {failed} failed)")
    return ShiftTrialSummary(records, fit, failed, noise_floor, reference_norm)


def run_shift_trials(model, theta, train, shifted, fractions, finetune_cfg, seed=0, jobs=1):
    """
    Fine-tune from the training minimum `theta` on each mixed set and fit
    ||theta_mix - theta|| against the mix fraction.
    """
    def trial(index_fraction):
        index, fraction = index_fraction
        mixed = mix_datasets(MixSpec(fraction, train, shifted), seed + index)
        result = finetune(model, theta, mixed, finetune_cfg, seed + index)
        delta = float(np.linalg.norm(result.params.data - theta.data))
        record = ShiftTrialRecord(fraction, delta, result.epochs_run, result.final_loss, result.grad_norm,
                                  result.converged, result.diverged)
        logging.info(f"Trial mix={fraction:g}: ||delta||={delta:.6g} epochs={result.epochs_run} "
                     f"{'diverged' if result.diverged else 'ok'}")
        return record

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        records = list(pool.map(trial, enumerate(fractions)))
    return _summarize(records, 1e-3 * theta.norm())


def run_quadratic_trials(problem, fractions):
    """Closed-form counterpart of run_shift_trials: theta_mix is the exact minimizer of the mixed weights."""
    theta = exact_minimizer(problem, problem.base)
    records = []
    for fraction in fractions:
        theta_mix = exact_minimizer(problem, mix_weights(problem.base, problem.shifted, fraction))
        records.append(ShiftTrialRecord(fraction, float(np.linalg.norm(theta_mix.data - theta.data))))
    return _summarize(records, 1e-3 * theta.norm(), delta_exact(problem).norm())


# --------------------------------------------------------------
# Interpolation
# --------------------------------------------------------------

@dataclass(frozen=True)
class CurvePoint:
    alpha: float
    train_loss: float
    shifted_train_loss: float
    test_loss: float

    def row(self):
        return {"alpha": self.alpha, "train_loss": self.train_loss,
                "shifted_train_loss": self.shifted_train_loss, "test_loss": self.test_loss}


CURVE_COLUMNS = ["alpha", "train_loss", "shifted_train_loss", "test_loss"]


def interpolation_curve(model, theta, theta_star, train, test, alphas):
    """
    Losses along w = alpha theta + (1 - alpha) theta*. The shifted training
    loss is L(w - delta; train) + C with delta = theta* - theta and
    C = L(theta*; test) - L(theta; train).
    """
    theta.check_same_layout(theta_star, "theta*")
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.size and np.any(np.diff(alphas) <= 0):
        raise ArgumentError("alpha grid must be strictly increasing")
    delta = theta_star.data - theta.data
    offset = model.mean_loss(theta_star, test) - model.mean_loss(theta, train)
    points = []
    for alpha in alphas:
        w = theta.with_data(alpha * theta.data + (1.0 - alpha) * theta_star.data)
        points.append(CurvePoint(
            float(alpha),
            model.mean_loss(w, train),
            model.mean_loss(w.with_data(w.data - delta), train) + offset,
            model.mean_loss(w, test),
        ))
    return points


def curve_correlation(points, low=0.0, high=1.0):
    """Pearson correlation between the shifted-train and test curves over alpha in [low, high]."""
    inside = [pt for pt in points if low <= pt.alpha <= high]
    if len(inside) < 2:
        raise ArgumentError("need at least two curve points to correlate")
    shifted = [pt.shifted_train_loss for pt in inside]
    test = [pt.test_loss for pt in inside]
    return float(np.corrcoef(shifted, test)[0, 1])


def default_alphas(count=41, low=-0.25, high=1.25):
    return np.linspace(low, high, count)


def default_fractions(count=100):
    return np.round(np.arange(1, count + 1) / count, 10)
