"""
Define-by-run reverse-mode differentiation over dense float64 arrays.

A Tape records nodes in creation order, so every node only references
earlier nodes. Nodes whose inputs all carry values are evaluated as they
are recorded; a tape built on placeholder inputs is evaluated by forward().
"""
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from samlab.errors import ArgumentError, ShapeError, TapeStateError

LEAF_KINDS = ("input", "param", "const")


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    adjoint: Callable


class Node:
    __slots__ = ("tape", "index", "kind", "inputs", "attrs", "name", "shape", "value", "grad")

    def __init__(self, tape, index, kind, inputs=(), attrs=None, name=None, shape=None, value=None):
        self.tape = tape
        self.index = index
        self.kind = kind
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.name = name
        self.shape = shape
        self.value = value
        self.grad = None

    def describe(self):
        label = f"node {self.index} ({self.kind})"
        if self.name:
            label += f" '{self.name}'"
        return label

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node({self.describe()}, shape={self.shape})"


class GradientResult:
    """Gradients of the tape output with respect to every named parameter."""

    def __init__(self, grads):
        self.grads = grads

    def __getitem__(self, name):
        return self.grads[name]

    def __contains__(self, name):
        return name in self.grads

    def names(self):
        return list(self.grads)

    def flatten(self, layout):
        out = np.zeros(layout.size, dtype=np.float64)
        for segment in layout.segments:
            grad = self.grads.get(segment.name)
            if grad is None:
                continue
            if grad.shape != segment.shape:
                raise ShapeError(
                    f"gradient for '{segment.name}' has shape {grad.shape}, layout expects {segment.shape}"
                )
            out[segment.offset:segment.offset + segment.size] = grad.ravel()
        return out


class Tape:
    def __init__(self):
        self.nodes = []
        self.inputs = []
        self.params = {}

    def _append(self, node):
        self.nodes.append(node)
        return node

    def input(self, name, value=None, shape=None):
        if value is not None:
            value = np.asarray(value, dtype=np.float64)
            shape = value.shape
        if shape is None:
            raise ArgumentError(f"input '{name}' needs a value or a declared shape")
        node = Node(self, len(self.nodes), "input", name=name, shape=tuple(shape), value=value)
        self.inputs.append(node)
        return self._append(node)

    def param(self, name, value):
        if name in self.params:
            raise ArgumentError(f"parameter '{name}' recorded twice")
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), "param", name=name, shape=value.shape, value=value)
        self.params[name] = node
        return self._append(node)

    def const(self, value, name=None):
        value = np.asarray(value, dtype=np.float64)
        return self._append(Node(self, len(self.nodes), "const", name=name, shape=value.shape, value=value))

    def record(self, kind, inputs, **attrs):
        for item in inputs:
            if not isinstance(item, Node) or item.tape is not self:
                raise ArgumentError(f"{kind}: inputs must be nodes of the same tape")
        node = Node(self, len(self.nodes), kind, inputs=[item.index for item in inputs], attrs=attrs)
        self._append(node)
        if all(item.value is not None for item in inputs):
            self._evaluate(node)
        return node

    @property
    def output(self):
        if not self.nodes:
            return None
        return self.nodes[-1]

    def _evaluate(self, node):
        primitive = PRIMITIVES[node.kind]
        values = [self.nodes[i].value for i in node.inputs]
        try:
            node.value = np.asarray(primitive.forward(values, node.attrs), dtype=np.float64)
        except ShapeError as e:
            raise ShapeError(f"{node.describe()}: {e}") from e
        node.shape = node.value.shape
        return node.value


def forward(graph, inputs=()):
    """
    Evaluate every recorded operation with fresh values for the declared inputs.

    `inputs` is a list aligned with the order in which inputs were declared,
    or a dict keyed by input name.
    """
    if isinstance(inputs, dict):
        missing = [node.name for node in graph.inputs if node.name not in inputs]
        if missing:
            raise ArgumentError(f"missing values for inputs {missing}")
        inputs = [inputs[node.name] for node in graph.inputs]
    inputs = list(inputs)
    if len(inputs) != len(graph.inputs):
        raise ArgumentError(f"expected {len(graph.inputs)} inputs, got {len(inputs)}")

    for node, value in zip(graph.inputs, inputs):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != node.shape:
            raise ShapeError(f"{node.describe()}: expected shape {node.shape}, got {value.shape}")
        node.value = value

    for node in graph.nodes:
        if node.kind in LEAF_KINDS:
            if node.value is None:
                raise TapeStateError(f"{node.describe()} has no value")
            continue
        graph._evaluate(node)

    if graph.output is None:
        raise TapeStateError("forward called on an empty tape")
    return graph.output.value


def backward(graph):
    output = graph.output
    if output is None or output.value is None:
        raise TapeStateError("backward called before forward")
    if output.value.size != 1:
        raise ShapeError(f"{output.describe()}: backward needs a scalar output, got shape {output.value.shape}")

    for node in graph.nodes:
        node.grad = None
    output.grad = np.ones_like(output.value)

    for node in reversed(graph.nodes):
        if node.grad is None or node.kind in LEAF_KINDS:
            continue
        primitive = PRIMITIVES[node.kind]
        values = [graph.nodes[i].value for i in node.inputs]
        input_grads = primitive.adjoint(node.grad, values, node.value, node.attrs)
        for index, grad in zip(node.inputs, input_grads):
            if grad is None:
                continue
            target = graph.nodes[index]
            if target.grad is None:
                target.grad = np.array(grad, dtype=np.float64)
            else:
                target.grad = target.grad + grad

    grads = {}
    for name, node in graph.params.items():
        grads[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return GradientResult(grads)


# --------------------------------------------------------------
# Primitives
# --------------------------------------------------------------

def _broadcast_pair(a, b, op):
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _add_forward(values, attrs):
    a, b = values
    _broadcast_pair(a, b, "add")
    return a + b


def _add_adjoint(g, values, out, attrs):
    a, b = values
    if a.shape == b.shape:
        return g, g
    return g, g.sum(axis=0)


def _sub_forward(values, attrs):
    a, b = values
    _broadcast_pair(a, b, "subtract")
    return a - b


def _sub_adjoint(g, values, out, attrs):
    a, b = values
    if a.shape == b.shape:
        return g, -g
    return g, -g.sum(axis=0)


def _mul_forward(values, attrs):
    a, b = values
    if a.shape != b.shape:
        raise ShapeError(f"multiply: incompatible shapes {a.shape} and {b.shape}")
    return a * b


def _mul_adjoint(g, values, out, attrs):
    a, b = values
    return g * b, g * a


def _matmul_forward(values, attrs):
    a, b = values
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: only vectors and matrices are supported, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} and {b.shape}")
    return a @ b


def _matmul_adjoint(g, values, out, attrs):
    a, b = values
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2:
        return np.outer(g, b), a.T @ g
    if b.ndim == 2:
        return b @ g, np.outer(a, g)
    return g * b, g * a


def _relu_adjoint(g, values, out, attrs):
    (x,) = values
    # subgradient 0 at exactly 0
    return (g * (x > 0),)


def _sigmoid_forward(values, attrs):
    (x,) = values
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax_ce_forward(values, attrs):
    (logits,) = values
    labels = attrs["labels"]
    if logits.ndim == 1:
        if np.ndim(labels) != 0:
            raise ShapeError("softmax_cross_entropy: a single row of logits needs a scalar label")
        rows = logits[None, :]
        labels = np.asarray([labels])
    elif logits.ndim == 2:
        rows = logits
        labels = np.asarray(labels)
        if labels.shape != (logits.shape[0],):
            raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 1} labels for {logits.shape[0]} rows")
    else:
        raise ShapeError(f"softmax_cross_entropy: logits must be 1-D or 2-D, got {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= rows.shape[1]):
        raise ShapeError(f"softmax_cross_entropy: label outside [0, {rows.shape[1]})")
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    losses = log_norm - shifted[np.arange(rows.shape[0]), labels]
    return losses[0] if logits.ndim == 1 else losses


def _softmax_ce_adjoint(g, values, out, attrs):
    (logits,) = values
    rows = logits[None, :] if logits.ndim == 1 else logits
    labels = np.atleast_1d(np.asarray(attrs["labels"]))
    shifted = rows - rows.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(rows.shape[0]), labels] -= 1.0
    grad = probs * np.reshape(g, (-1, 1))
    return (grad[0] if logits.ndim == 1 else grad,)


def _embedding_forward(values, attrs):
    (table,) = values
    indices = attrs["indices"]
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index outside [0, {table.shape[0]})")
    return table[indices]


def _embedding_adjoint(g, values, out, attrs):
    (table,) = values
    grad = np.zeros_like(table)
    np.add.at(grad, attrs["indices"], g)
    return (grad,)


def _concat_forward(values, attrs):
    head = values[0]
    for value in values[1:]:
        if value.ndim != head.ndim or value.shape[:-1] != head.shape[:-1]:
            raise ShapeError(f"concatenate: incompatible shapes {head.shape} and {value.shape}")
    return np.concatenate(values, axis=-1)


def _concat_adjoint(g, values, out, attrs):
    cuts = np.cumsum([value.shape[-1] for value in values])[:-1]
    return tuple(np.split(g, cuts, axis=-1))


def _transpose_forward(values, attrs):
    (x,) = values
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    return x.T


PRIMITIVES = {
    "add": Primitive("add", _add_forward, _add_adjoint),
    "subtract": Primitive("subtract", _sub_forward, _sub_adjoint),
    "multiply": Primitive("multiply", _mul_forward, _mul_adjoint),
    "matmul": Primitive("matmul", _matmul_forward, _matmul_adjoint),
    "relu": Primitive("relu", lambda v, a: np.where(v[0] > 0, v[0], 0.0), _relu_adjoint),
    "sigmoid": Primitive("sigmoid", _sigmoid_forward, lambda g, v, out, a: (g * out * (1.0 - out),)),
    "tanh": Primitive("tanh", lambda v, a: np.tanh(v[0]), lambda g, v, out, a: (g * (1.0 - out * out),)),
    "softmax_cross_entropy": Primitive("softmax_cross_entropy", _softmax_ce_forward, _softmax_ce_adjoint),
    "mean": Primitive("mean", lambda v, a: np.mean(v[0]), lambda g, v, out, a: (np.full(v[0].shape, g / v[0].size),)),
    "sum": Primitive("sum", lambda v, a: np.sum(v[0]), lambda g, v, out, a: (np.full(v[0].shape, g),)),
    "scale": Primitive("scale", lambda v, a: a["factor"] * v[0], lambda g, v, out, a: (a["factor"] * g,)),
    "embedding": Primitive("embedding", _embedding_forward, _embedding_adjoint),
    "concatenate": Primitive("concatenate", _concat_forward, _concat_adjoint),
    "transpose": Primitive("transpose", _transpose_forward, lambda g, v, out, a: (g.T,)),
}


def add(a, b):
    return a.tape.record("add", [a, b])


def subtract(a, b):
    return a.tape.record("subtract", [a, b])


def multiply(a, b):
    return a.tape.record("multiply", [a, b])


def matmul(a, b):
    return a.tape.record("matmul", [a, b])


def relu(x):
    return x.tape.record("relu", [x])


def sigmoid(x):
    return x.tape.record("sigmoid", [x])


def tanh(x):
    return x.tape.record("tanh", [x])


def softmax_cross_entropy(logits, labels):
    """Row-wise cross entropy; returns one loss per row (a scalar for 1-D logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    return logits.tape.record("softmax_cross_entropy", [logits], labels=labels)


def mean(x):
    return x.tape.record("mean", [x])


def total(x):
    return x.tape.record("sum", [x])


def scale(x, factor):
    return x.tape.record("scale", [x], factor=float(factor))


def embedding(table, indices):
    indices = np.asarray(indices, dtype=np.int64)
    return table.tape.record("embedding", [table], indices=indices)


def concatenate(*nodes):
    if not nodes:
        raise ArgumentError("concatenate needs at least one node")
    return nodes[0].tape.record("concatenate", list(nodes))


def transpose(x):
    return x.tape.record("transpose", [x])


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def per_sample_gradients(model, params, batch):
    """
    One gradient per data instance, each from its own tape.

    Averaging the returned vectors equals the gradient of the batch mean loss.
    """
    if batch is None or len(batch) == 0:
        raise ArgumentError("per_sample_gradients needs a nonempty batch")
    grads = []
    for i in range(len(batch)):
        _, grad = model.loss_and_grad(params, batch.subset([i]))
        grads.append(grad)
    logging.debug(f"Computed {len(grads)} per-sample gradients")
    return grads
