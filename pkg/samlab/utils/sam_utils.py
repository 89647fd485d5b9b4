"""
Corruption state machine for sharpness-aware training.

Each batch starts from a zero corruption a_0, takes K ascent steps inside
S = {a : ||T^-1 a||_p <= epsilon} and averages the losses and gradients
seen at a_0 .. a_K. The single-step variant keeps only the loss at a_1.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from samlab.errors import ArgumentError, ConstraintViolation
from samlab.utils.grouping_utils import DEFAULT_TAU, Granularity, ScaleRule, build_partition, compute_scales

CONSTRAINT_TOLERANCE = 1e-9
INSIDE_SLACK = 1e-12


class Implementation(str, Enum):
    MULTI_STEP = "MULTI_STEP"
    SINGLE_STEP = "SINGLE_STEP"


def parse_norm(p):
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "infinity", "∞"):
            return math.inf
    p = float(p)
    if p not in (2.0, math.inf):
        raise ArgumentError(f"norm order must be 2 or inf, got {p}")
    return p


def norm_name(p):
    return "inf" if math.isinf(p) else "2"


@dataclass(frozen=True)
class SamConfig:
    K: int = 0
    epsilon: float = 0.0
    p: float = 2.0
    eta: float = None
    implementation: Implementation = Implementation.MULTI_STEP
    rule: ScaleRule = ScaleRule.FIXED_ONE
    granularity: Granularity = Granularity.LAYER
    start_epoch: int = 0
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm(self.p))
        object.__setattr__(self, "implementation", Implementation(self.implementation))
        object.__setattr__(self, "rule", ScaleRule(self.rule))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        self.validate()

    def validate(self):
        if self.K < 0:
            raise ArgumentError(f"K must be non-negative, got {self.K}")
        if not self.epsilon >= 0:
            raise ArgumentError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.start_epoch < 0:
            raise ArgumentError(f"start_epoch must be non-negative, got {self.start_epoch}")
        if not self.tau > 0:
            raise ArgumentError(f"tau must be positive, got {self.tau}")
        if self.eta is not None and not self.eta > 0:
            raise ArgumentError(f"eta must be positive when set, got {self.eta}")
        if self.K >= 1 and self.epsilon > 0 and not self.step_size() > 0:
            raise ArgumentError("step size must be positive when K >= 1")

    def step_size(self):
        """
        Explicit eta wins; otherwise epsilon for single-step, whatever K is,
        and 1.5 epsilon / K for multi-step (0 when K = 0).
        """
        if self.eta is not None:
            return float(self.eta)
        if self.implementation is Implementation.SINGLE_STEP:
            return float(self.epsilon)
        if self.K == 0:
            return 0.0
        return 1.5 * self.epsilon / self.K

    def active(self, epoch):
        """K = 0 means plain training for both implementations."""
        return self.K >= 1 and epoch >= self.start_epoch

    def passes_per_batch(self, epoch):
        if not self.active(epoch):
            return 1
        return 2 if self.implementation is Implementation.SINGLE_STEP else self.K + 1


class PassCounter:
    """Counts forward/backward passes."""

    def __init__(self):
        self.count = 0

    def tick(self, n=1):
        self.count += n


@dataclass
class CorruptionState:
    a: object
    scales: object
    k: int = 0
    epsilon: float = 0.0
    p: float = 2.0

    def constraint_norm(self):
        t = self.scales.diagonal()
        live = t > 0
        if np.any(self.a.data[~live] != 0):
            return math.inf
        scaled = self.a.data[live] / t[live]
        if scaled.size == 0:
            return 0.0
        return float(np.max(np.abs(scaled))) if math.isinf(self.p) else float(np.linalg.norm(scaled))

    def check(self):
        value = self.constraint_norm()
        if value > self.epsilon + CONSTRAINT_TOLERANCE:
            raise ConstraintViolation(f"corruption left the constraint set at step {self.k}: "
                                      f"||T^-1 a||_{norm_name(self.p)} = {value} > {self.epsilon}")


def ascent_step(grad, scales, eta, p):
    """
    Steepest ascent direction of the linearized loss inside ||T^-1 u||_p <= eta.

    p=2 gives eta T^2 g / ||T g||_2, p=inf gives eta T sgn(g). An all-zero
    gradient gives a zero step.
    """
    p = parse_norm(p)
    t = scales.diagonal()
    if t.size != grad.data.size:
        raise ArgumentError(f"scales of size {t.size} do not match gradient of size {grad.data.size}")
    if eta == 0:
        return grad.with_data(np.zeros_like(grad.data))
    if math.isinf(p):
        return grad.with_data(eta * t * np.sign(grad.data))
    tg = t * grad.data
    norm = float(np.linalg.norm(tg))
    if norm == 0:
        return grad.with_data(np.zeros_like(grad.data))
    return grad.with_data(eta * t * tg / norm)


def project(v, scales, epsilon, p):
    """
    Project onto {a : ||T^-1 a||_p <= epsilon}. Coordinates of frozen groups
    (T = 0) are pinned at zero; points already inside come back unchanged.
    """
    if epsilon < 0:
        raise ArgumentError(f"epsilon must be non-negative, got {epsilon}")
    p = parse_norm(p)
    t = scales.diagonal()
    live = t > 0
    data = v.data
    if np.any(data[~live] != 0):
        data = np.where(live, data, 0.0)
    scaled = np.zeros_like(data)
    scaled[live] = data[live] / t[live]
    if math.isinf(p):
        outside = np.abs(scaled) > epsilon
        if not outside.any():
            return v.with_data(data.copy())
        return v.with_data(np.where(outside, t * np.sign(scaled) * epsilon, data))
    norm = float(np.linalg.norm(scaled))
    if norm <= epsilon * (1.0 + INSIDE_SLACK):
        return v.with_data(data.copy())
    return v.with_data(data * (epsilon / norm))


@lru_cache(maxsize=64)
def partition_for(layout, granularity):
    return build_partition(layout, granularity)


def _scales_for(cfg, params, grad):
    partition = partition_for(params.layout, cfg.granularity)
    return compute_scales(cfg.rule, partition, params, grad, cfg.tau)


def _tick(counter):
    if counter is not None:
        counter.tick()


def multi_step_objective(model, params, batch, cfg, counter=None, debug=False):
    """
    Mean of the losses and gradients at the K+1 corruptions a_0 = 0 .. a_K.

    T is computed once from the uncorrupted gradient and held for the inner steps.
    """
    if cfg.K < 1:
        raise ArgumentError(f"multi-step objective needs K >= 1, got {cfg.K}")
    loss0, grad0 = model.loss_and_grad(params, batch)
    _tick(counter)
    scales = _scales_for(cfg, params, grad0)
    eta = cfg.step_size()

    # running sums of differences from the k=0 term keep epsilon=0 bit-identical to plain training
    loss_delta = 0.0
    grad_delta = np.zeros_like(grad0.data)
    state = CorruptionState(params.zeros_like(), scales, 0, cfg.epsilon, cfg.p)
    grad = grad0
    for k in range(1, cfg.K + 1):
        step = ascent_step(grad, scales, eta, cfg.p)
        state.a = project(state.a.with_data(state.a.data + step.data), scales, cfg.epsilon, cfg.p)
        state.k = k
        if debug:
            state.check()
        loss_k, grad = model.loss_and_grad(params, batch, corruption=state.a)
        _tick(counter)
        loss_delta += loss_k - loss0
        grad_delta += grad.data - grad0.data
    count = cfg.K + 1
    return loss0 + loss_delta / count, grad0.with_data(grad0.data + grad_delta / count), state


def single_step_objective(model, params, batch, cfg, counter=None, debug=False):
    loss0, grad0 = model.loss_and_grad(params, batch)
    _tick(counter)
    scales = _scales_for(cfg, params, grad0)
    step = ascent_step(grad0, scales, cfg.step_size(), cfg.p)
    state = CorruptionState(project(step, scales, cfg.epsilon, cfg.p), scales, 1, cfg.epsilon, cfg.p)
    if debug:
        state.check()
    loss1, grad1 = model.loss_and_grad(params, batch, corruption=state.a)
    _tick(counter)
    return loss1, grad1, state


def sam_objective(model, params, batch, cfg, counter=None, debug=False):
    if cfg.implementation is Implementation.SINGLE_STEP:
        return single_step_objective(model, params, batch, cfg, counter, debug)
    return multi_step_objective(model, params, batch, cfg, counter, debug)


def describe(cfg):
    return (f"{cfg.implementation.value} K={cfg.K} eps={cfg.epsilon} p={norm_name(cfg.p)} "
            f"eta={cfg.step_size():.6g} rule={cfg.rule.value} granularity={cfg.granularity.value} "
            f"start_epoch={cfg.start_epoch}")


def log_config(cfg):
    logging.info(f"Sharpness-aware objective: {describe(cfg)}")
