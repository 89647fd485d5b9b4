"""
Parameter groups and the per-group corruption scales T_(i).

A partition splits the flat parameter vector into contiguous groups; every
scale rule maps (params, grad) to one non-negative scalar per group, and a
ScaleVector expands those scalars to the diagonal of T. A zero scale marks a
frozen group: its corruption is pinned at zero.
"""
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from samlab.errors import ArgumentError

DEFAULT_TAU = 1e-12


class Granularity(str, Enum):
    MODEL = "model"
    LAYER = "layer"
    ELEMENT = "element"


class ScaleRule(str, Enum):
    FIXED_ONE = "FIXED_ONE"
    GA_SAM = "GA_SAM"
    ASAM_W = "ASAM_W"
    LAYER_WG = "LAYER_WG"
    INV_G = "INV_G"
    W_OVER_SQRT_N = "W_OVER_SQRT_N"
    W_NORM = "W_NORM"


class GroupPartition:
    def __init__(self, granularity, starts, sizes, names=None):
        self.granularity = Granularity(granularity)
        self.starts = np.asarray(starts, dtype=np.int64)
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.names = list(names) if names is not None else [str(i) for i in range(len(self.starts))]
        if len(self.starts) == 0 or len(self.starts) != len(self.sizes) or len(self.names) != len(self.starts):
            raise ArgumentError("a partition needs matching, nonempty starts, sizes and names")
        if np.any(self.sizes <= 0):
            raise ArgumentError("every group must hold at least one coordinate")
        if self.starts[0] != 0 or np.any(self.starts[1:] != self.starts[:-1] + self.sizes[:-1]):
            raise ArgumentError("groups must be disjoint and contiguous")
        self.n = int(self.sizes.sum())

    def __len__(self):
        return len(self.sizes)

    def __eq__(self, other):
        return (isinstance(other, GroupPartition) and self.granularity == other.granularity
                and np.array_equal(self.starts, other.starts) and np.array_equal(self.sizes, other.sizes))

    def __hash__(self):
        return hash((self.granularity, self.starts.tobytes(), self.sizes.tobytes()))

    def check(self, vector, what="vector"):
        if vector.data.size != self.n:
            raise ArgumentError(f"{what} of size {vector.data.size} does not match partition of size {self.n}")

    def group_norms(self, values):
        squares = np.add.reduceat(np.square(values), self.starts)
        return np.sqrt(squares)

    def expand(self, per_group):
        return np.repeat(per_group, self.sizes)

    def __repr__(self):
        return f"GroupPartition({self.granularity.value}, groups={len(self)}, n={self.n})"


def build_partition(layout, granularity):
    granularity = Granularity(granularity)
    if granularity is Granularity.MODEL:
        return GroupPartition(granularity, [0], [layout.size], ["model"])
    if granularity is Granularity.LAYER:
        return GroupPartition(granularity, [s.offset for s in layout], [s.size for s in layout], layout.names())
    return GroupPartition(granularity, np.arange(layout.size), np.ones(layout.size, dtype=np.int64),
                          [str(i) for i in range(layout.size)])


@dataclass(frozen=True)
class ScaleVector:
    partition: GroupPartition
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.partition),):
            raise ArgumentError(f"expected {len(self.partition)} scales, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ArgumentError("scales must be finite and non-negative")

    @classmethod
    def identity(cls, n):
        return cls(GroupPartition(Granularity.MODEL, [0], [n], ["model"]), np.ones(1))

    @classmethod
    def from_diagonal(cls, diagonal):
        diagonal = np.asarray(diagonal, dtype=np.float64).ravel()
        partition = GroupPartition(Granularity.ELEMENT, np.arange(diagonal.size), np.ones(diagonal.size, dtype=np.int64))
        return cls(partition, diagonal.copy())

    def diagonal(self):
        return self.partition.expand(self.values)

    def frozen(self):
        """Groups with a zero scale."""
        return self.values == 0


def _floor(norms, tau):
    return np.maximum(norms, tau)


def compute_scales(rule, partition, params, grad, tau=DEFAULT_TAU):
    """
    Per-group scales for `rule`. Gradient-based rules (GA_SAM, LAYER_WG,
    INV_G) give groups with ||g_(i)|| <= tau a zero scale, so a dead group
    stays uncorrupted even if a later inner step revives its gradient.
    """
    rule = ScaleRule(rule)
    if tau <= 0:
        raise ArgumentError(f"tau must be positive, got {tau}")
    partition.check(params, "params")
    partition.check(grad, "grad")
    sizes = partition.sizes.astype(np.float64)

    if rule is ScaleRule.FIXED_ONE:
        return ScaleVector(partition, np.ones(len(partition)))
    if rule is ScaleRule.ASAM_W:
        # always element-wise regardless of the partition granularity
        return ScaleVector.from_diagonal(_floor(np.abs(params.data), tau))

    w_norms = _floor(partition.group_norms(params.data), tau)
    if rule is ScaleRule.W_OVER_SQRT_N:
        return ScaleVector(partition, w_norms / np.sqrt(sizes))
    if rule is ScaleRule.W_NORM:
        return ScaleVector(partition, w_norms)

    raw = partition.group_norms(grad.data)
    live = raw > tau
    g_norms = np.where(live, raw, 1.0)
    if rule is ScaleRule.GA_SAM:
        values = np.sqrt(sizes) / (g_norms * math.sqrt(partition.n))
    elif rule is ScaleRule.LAYER_WG:
        values = w_norms / g_norms
    else:
        values = 1.0 / g_norms
    return ScaleVector(partition, np.where(live, values, 0.0))


def gradient_strengths(partition, grads):
    """
    Average gradient strength: mean over samples of ||g_(i)|| / sqrt(n_(i))
    per group, and of ||g|| / sqrt(n) over the whole vector.
    """
    if not grads:
        raise ArgumentError("gradient_strengths needs at least one gradient")
    stacked = np.stack([g.data for g in grads])
    if stacked.shape[1] != partition.n:
        raise ArgumentError(f"gradients of size {stacked.shape[1]} do not match partition of size {partition.n}")
    per_group = np.sqrt(np.add.reduceat(np.square(stacked), partition.starts, axis=1))
    strengths = np.mean(per_group / np.sqrt(partition.sizes), axis=0)
    overall = float(np.mean(np.linalg.norm(stacked, axis=1)) / math.sqrt(partition.n))
    return strengths, overall
