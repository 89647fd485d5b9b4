"""
Sharpness instruments for trained parameters: a projected-ascent corruption
attack and the top of the Fisher-approximated Hessian spectrum.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from samlab.errors import ArgumentError
from samlab.utils.autodiff_utils import per_sample_gradients
from samlab.utils.grouping_utils import ScaleVector, gradient_strengths
from samlab.utils.sam_utils import ascent_step, norm_name, parse_norm, project

GRAM_LIMIT = 4096


@dataclass
class AttackReport:
    p: float
    epsilon: float
    steps: int
    metric_name: str
    clean_loss: float
    corrupted_loss: float
    clean_metric: float
    corrupted_metric: float
    metric_drop: float
    steps_used: int

    @property
    def loss_increase(self):
        return self.corrupted_loss - self.clean_loss

    def row(self):
        return {
            "p": norm_name(self.p),
            "epsilon": self.epsilon,
            "steps": self.steps,
            "steps_used": self.steps_used,
            "metric_name": self.metric_name,
            "clean_loss": self.clean_loss,
            "corrupted_loss": self.corrupted_loss,
            "loss_increase": self.loss_increase,
            "clean_metric": self.clean_metric,
            "corrupted_metric": self.corrupted_metric,
            "metric_drop": self.metric_drop,
        }


ATTACK_COLUMNS = ["p", "epsilon", "steps", "steps_used", "metric_name", "clean_loss", "corrupted_loss",
                  "loss_increase", "clean_metric", "corrupted_metric", "metric_drop"]


def corruption_attack(model, params, dataset, p, epsilon, steps, eta=None):
    """
    Maximize the loss over corruptions with ||a||_p <= epsilon by projected
    ascent (T = identity). The best iterate, a_0 = 0 included, is reported.
    `params` is never modified.
    """
    p = parse_norm(p)
    if not epsilon >= 0:
        raise ArgumentError(f"epsilon must be non-negative, got {epsilon}")
    if steps < 1:
        raise ArgumentError(f"steps must be at least 1, got {steps}")
    eta = 1.5 * epsilon / steps if eta is None else eta
    scales = ScaleVector.identity(params.data.size)

    clean = model.evaluate(params, dataset)
    best_loss, best = clean.loss, params.zeros_like()
    corruption = params.zeros_like()
    _, grad = model.loss_and_grad(params, dataset)
    steps_used = 0
    for step in range(1, steps + 1):
        update = ascent_step(grad, scales, eta, p)
        corruption = project(corruption.with_data(corruption.data + update.data), scales, epsilon, p)
        loss, grad = model.loss_and_grad(params, dataset, corruption=corruption)
        steps_used = step
        if not math.isfinite(loss):
            logging.warning(f"Attack reached a non-finite loss at step {step} (p={norm_name(p)}, eps={epsilon})")
            best_loss, best = loss, corruption
            break
        if loss > best_loss:
            best_loss, best = loss, corruption

    if math.isfinite(best_loss):
        corrupted = model.evaluate(params.with_data(params.data + best.data), dataset)
        corrupted_loss, corrupted_metric = corrupted.loss, corrupted.metric
    else:
        corrupted_loss, corrupted_metric = best_loss, float("nan")
    if clean.higher_is_better:
        drop = clean.metric - corrupted_metric
    else:
        drop = corrupted_metric - clean.metric

    report = AttackReport(p, epsilon, steps, clean.metric_name, clean.loss, corrupted_loss, clean.metric,
                          corrupted_metric, drop, steps_used)
    logging.info(f"Attack p={norm_name(p)} eps={epsilon}: loss {clean.loss:.6f} -> {corrupted_loss:.6f}, "
                 f"{clean.metric_name} drop {drop:.6f}")
    return report


def attack_sweep(model, params, dataset, p, epsilons, steps):
    reports = [corruption_attack(model, params, dataset, p, eps, steps) for eps in sorted(epsilons)]
    for lower, higher in zip(reports, reports[1:]):
        if higher.corrupted_loss < lower.corrupted_loss - 1e-9:
            logging.warning(f"Attack loss not monotone in epsilon: {lower.epsilon} -> {lower.corrupted_loss:.6f}, "
                            f"{higher.epsilon} -> {higher.corrupted_loss:.6f}")
    return reports


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    sample_count: int
    trace: float
    method: str
    strengths: dict = field(default_factory=dict)

    @property
    def top(self):
        return float(self.eigenvalues[0])

    def rows(self):
        return [{"rank": i + 1, "eigenvalue": float(v)} for i, v in enumerate(self.eigenvalues)]


def fisher_matrix(gradients):
    """Explicit (1/m) sum g_i g_i^T; only for small parameter counts."""
    stacked = np.stack([g.data for g in gradients])
    return stacked.T @ stacked / stacked.shape[0]


def lanczos_top_eigenvalues(matvec, n, k, iterations=None, seed=0):
    """
    Ritz values of a symmetric operator from a Lanczos run with full
    reorthogonalization, largest first.
    """
    iterations = min(n, iterations or max(2 * k, k + 20))
    rng = np.random.default_rng(seed)
    basis = np.zeros((n, iterations))
    alphas = np.zeros(iterations)
    betas = np.zeros(iterations)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    q_prev = np.zeros(n)
    beta = 0.0
    used = 0
    for i in range(iterations):
        basis[:, i] = q
        u = matvec(q)
        alpha = float(q @ u)
        alphas[i] = alpha
        used = i + 1
        r = u - alpha * q - beta * q_prev
        r -= basis[:, :used] @ (basis[:, :used].T @ r)
        beta = float(np.linalg.norm(r))
        if i + 1 == iterations or beta < 1e-12:
            break
        betas[i] = beta
        q_prev, q = q, r / beta
    tridiagonal = np.diag(alphas[:used]) + np.diag(betas[:used - 1], 1) + np.diag(betas[:used - 1], -1)
    return np.sort(np.linalg.eigvalsh(tridiagonal))[::-1]


def spectrum_from_gradients(gradients, k, seed=0):
    """Top-k eigenvalues of the empirical Fisher, zero padded past its rank."""
    stacked = np.stack([g.data for g in gradients])
    m, n = stacked.shape
    if m <= GRAM_LIMIT:
        values = np.linalg.eigvalsh(stacked @ stacked.T / m)[::-1]
        method = "gram"
    else:
        values = lanczos_top_eigenvalues(lambda v: stacked.T @ (stacked @ v) / m, n, k, seed=seed)
        method = "lanczos"
    values = np.maximum(values[:k], 0.0)
    if values.size < k:
        values = np.concatenate([values, np.zeros(k - values.size)])
    trace = float(np.sum(np.square(stacked)) / m)
    return values, trace, method


def fisher_spectrum(model, params, dataset, k=50, sample_count=512, seed=0, partition=None):
    if k < 1:
        raise ArgumentError(f"k must be at least 1, got {k}")
    if sample_count < k:
        raise ArgumentError(f"sample_count {sample_count} must be at least k={k}")
    if dataset is None or len(dataset) == 0:
        raise ArgumentError("fisher_spectrum needs a nonempty dataset")
    m = min(sample_count, len(dataset))
    rng = np.random.default_rng(seed)
    indices = np.sort(rng.choice(len(dataset), size=m, replace=False))
    gradients = per_sample_gradients(model, params, dataset.subset(indices))
    values, trace, method = spectrum_from_gradients(gradients, k, seed)

    strengths = {}
    if partition is not None:
        per_group, overall = gradient_strengths(partition, gradients)
        strengths = {"model": overall}
        strengths.update(dict(zip(partition.names, per_group.tolist())))

    logging.info(f"Fisher spectrum from {m} samples ({method}): top eigenvalue {values[0]:.6g}, trace {trace:.6g}")
    return SpectrumReport(values, m, trace, method, strengths)
