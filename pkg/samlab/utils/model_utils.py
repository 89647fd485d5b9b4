import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from samlab.errors import ArgumentError, DataError
from samlab.utils import autodiff_utils as ad


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self):
        return self.offset + self.size


class Layout:
    """Ordered table of named parameter segments covering a flat vector."""

    def __init__(self, segments):
        self.segments = tuple(segments)
        self._by_name = {}
        cursor = 0
        for segment in self.segments:
            if segment.name in self._by_name:
                raise ArgumentError(f"duplicate segment name '{segment.name}'")
            if segment.offset != cursor:
                raise ArgumentError(f"segment '{segment.name}' starts at {segment.offset}, expected {cursor}")
            self._by_name[segment.name] = segment
            cursor = segment.stop
        self.size = cursor

    @classmethod
    def from_shapes(cls, named_shapes):
        segments = []
        offset = 0
        for name, shape in named_shapes:
            segment = Segment(name, offset, tuple(int(d) for d in shape))
            segments.append(segment)
            offset = segment.stop
        return cls(segments)

    def __getitem__(self, name):
        return self._by_name[name]

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)

    def names(self):
        return [segment.name for segment in self.segments]

    def __eq__(self, other):
        return isinstance(other, Layout) and self.segments == other.segments

    def __hash__(self):
        return hash(self.segments)

    def __repr__(self):
        return f"Layout({', '.join(f'{s.name}{list(s.shape)}' for s in self.segments)})"


class ParamVector:
    """Flat float64 parameter array with a segment layout."""

    def __init__(self, data, layout):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.ndim != 1 or data.size != layout.size:
            raise ArgumentError(f"parameter data of shape {data.shape} does not fit layout of size {layout.size}")
        self.data = data
        self.layout = layout

    @classmethod
    def from_array(cls, values, name="w"):
        values = np.asarray(values, dtype=np.float64).ravel()
        return cls(values.copy(), Layout.from_shapes([(name, values.shape)]))

    @classmethod
    def zeros(cls, layout):
        return cls(np.zeros(layout.size), layout)

    def __len__(self):
        return self.data.size

    def segment(self, name):
        seg = self.layout[name]
        return self.data[seg.offset:seg.stop].reshape(seg.shape)

    def views(self):
        return {seg.name: self.segment(seg.name) for seg in self.layout}

    def copy(self):
        return ParamVector(self.data.copy(), self.layout)

    def zeros_like(self):
        return ParamVector.zeros(self.layout)

    def with_data(self, data):
        return ParamVector(data, self.layout)

    def check_same_layout(self, other, what="vector"):
        if other.layout != self.layout:
            raise ArgumentError(f"{what} layout {other.layout} does not match {self.layout}")

    def norm(self):
        return float(np.linalg.norm(self.data))

    def __repr__(self):
        return f"ParamVector(n={self.data.size}, layout={self.layout})"


@dataclass(frozen=True)
class Evaluation:
    loss: float
    metric_name: str
    metric: float
    higher_is_better: bool


class DifferentiableModel:
    """
    Shared plumbing for models whose loss is recorded on a Tape.

    Subclasses provide `layout`, `init_params()`, `descriptor()`,
    `check_batch(batch)` and `_loss_node(tape, nodes, batch)`.
    """

    kind = "model"

    def _record_params(self, tape, data):
        nodes = {}
        for segment in self.layout:
            nodes[segment.name] = tape.param(segment.name, data[segment.offset:segment.stop].reshape(segment.shape))
        return nodes

    def _tape_for(self, data, batch):
        self.check_batch(batch)
        tape = ad.Tape()
        nodes = self._record_params(tape, data)
        out = self._loss_node(tape, nodes, batch)
        return float(out.value), tape

    def loss(self, params, batch):
        if params.layout != self.layout:
            raise ArgumentError(f"params layout {params.layout} does not match model layout {self.layout}")
        return self._tape_for(params.data, batch)

    def perturbed_loss(self, params, corruption, batch):
        """Loss at params + corruption; the corruption is a constant of the tape."""
        params.check_same_layout(corruption, "corruption")
        return self.loss(params.with_data(params.data + corruption.data), batch)

    def loss_and_grad(self, params, batch, corruption=None):
        if corruption is None:
            value, tape = self.loss(params, batch)
        else:
            value, tape = self.perturbed_loss(params, corruption, batch)
        grads = ad.backward(tape)
        return value, params.with_data(grads.flatten(self.layout))

    def mean_loss(self, params, data):
        value, _ = self.loss(params, data)
        return value

    def evaluate(self, params, data):
        value = self.mean_loss(params, data)
        return Evaluation(value, "loss", value, False)


def _uniform_fan_in(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class MlpModel(DifferentiableModel):
    layer_sizes: tuple
    activation: str = "relu"
    seed: int = 0

    kind = "mlp"

    @cached_property
    def layout(self):
        shapes = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            shapes.append((f"W{i}", (fan_in, fan_out)))
            shapes.append((f"b{i}", (fan_out,)))
        return Layout.from_shapes(shapes)

    @property
    def num_classes(self):
        return self.layer_sizes[-1]

    def parameter_count(self):
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def init_params(self):
        rng = np.random.default_rng(self.seed)
        data = np.empty(self.layout.size)
        for i, fan_in in enumerate(self.layer_sizes[:-1]):
            for name in (f"W{i}", f"b{i}"):
                seg = self.layout[name]
                data[seg.offset:seg.stop] = _uniform_fan_in(rng, fan_in, seg.size)
        return ParamVector(data, self.layout)

    def descriptor(self):
        return {"kind": self.kind, "layer_sizes": list(self.layer_sizes), "activation": self.activation}

    def check_batch(self, batch):
        if batch.kind != "classification":
            raise DataError(f"mlp expects a classification dataset, got {batch.kind}")
        if batch.features.ndim != 2 or batch.features.shape[1] != self.layer_sizes[0]:
            raise DataError(f"mlp expects {self.layer_sizes[0]} features, got {batch.features.shape}")
        if len(batch) and (batch.labels.min() < 0 or batch.labels.max() >= self.num_classes):
            raise DataError(f"label outside [0, {self.num_classes})")

    def _logits(self, tape, nodes, features):
        act = ad.ACTIVATIONS[self.activation]
        h = tape.input("x", features)
        last = len(self.layer_sizes) - 2
        for i in range(last + 1):
            h = ad.add(ad.matmul(h, nodes[f"W{i}"]), nodes[f"b{i}"])
            if i < last:
                h = act(h)
        return h

    def _loss_node(self, tape, nodes, batch):
        logits = self._logits(tape, nodes, batch.features)
        return ad.mean(ad.softmax_cross_entropy(logits, batch.labels))

    def predict_logits(self, params, features):
        tape = ad.Tape()
        nodes = self._record_params(tape, params.data)
        return self._logits(tape, nodes, features).value

    def evaluate(self, params, data):
        value, tape = self.loss(params, data)
        # the logits node feeds the cross entropy, two nodes before the mean
        logits = tape.nodes[-3].value
        accuracy = float(np.mean(np.argmax(logits, axis=1) == data.labels)) if len(data) else float("nan")
        return Evaluation(value, "accuracy", accuracy, True)


def build_mlp(layer_sizes, seed=0, activation="relu"):
    layer_sizes = tuple(int(s) for s in layer_sizes)
    if len(layer_sizes) < 2:
        raise ArgumentError("an mlp needs at least two layer sizes")
    if any(s <= 0 for s in layer_sizes):
        raise ArgumentError(f"layer sizes must be positive, got {list(layer_sizes)}")
    if activation not in ad.ACTIVATIONS:
        raise ArgumentError(f"unknown activation '{activation}'")
    model = MlpModel(layer_sizes, activation, int(seed))
    logging.info(f"Built mlp {list(layer_sizes)} with {model.parameter_count()} parameters")
    return model


@dataclass(frozen=True)
class RnnLmModel(DifferentiableModel):
    """
    Character language model with a single gated recurrent cell:

        z = sigmoid([x, h] Wz + bz),  c = tanh([x, h] Wc + bc),  h' = (1 - z) h + z c
    """

    vocab_size: int
    embed_size: int = 32
    hidden_size: int = 64
    tied: bool = False
    seed: int = 0

    kind = "rnn"

    @cached_property
    def layout(self):
        joint = self.embed_size + self.hidden_size
        shapes = [
            ("E", (self.vocab_size, self.embed_size)),
            ("Wz", (joint, self.hidden_size)),
            ("bz", (self.hidden_size,)),
            ("Wc", (joint, self.hidden_size)),
            ("bc", (self.hidden_size,)),
        ]
        if not self.tied:
            shapes.append(("Wo", (self.hidden_size, self.vocab_size)))
        shapes.append(("bo", (self.vocab_size,)))
        return Layout.from_shapes(shapes)

    @property
    def num_classes(self):
        return self.vocab_size

    def init_params(self):
        rng = np.random.default_rng(self.seed)
        joint = self.embed_size + self.hidden_size
        fan_in = {"E": self.embed_size, "Wz": joint, "bz": joint, "Wc": joint, "bc": joint,
                  "Wo": self.hidden_size, "bo": self.hidden_size}
        data = np.empty(self.layout.size)
        for seg in self.layout:
            data[seg.offset:seg.stop] = _uniform_fan_in(rng, fan_in[seg.name], seg.size)
        return ParamVector(data, self.layout)

    def descriptor(self):
        return {"kind": self.kind, "vocab_size": self.vocab_size, "embed": self.embed_size,
                "hidden": self.hidden_size, "tied": self.tied}

    def check_batch(self, batch):
        if batch.kind != "sequence":
            raise DataError(f"rnn expects a sequence dataset, got {batch.kind}")
        if batch.features.ndim != 2 or batch.labels.shape != batch.features.shape:
            raise DataError(f"rnn expects matching (windows, length) inputs and targets, got "
                            f"{batch.features.shape} and {batch.labels.shape}")
        if len(batch):
            low = min(batch.features.min(), batch.labels.min())
            high = max(batch.features.max(), batch.labels.max())
            if low < 0 or high >= self.vocab_size:
                raise DataError(f"token outside vocabulary [0, {self.vocab_size})")

    def _loss_node(self, tape, nodes, batch):
        tokens = np.asarray(batch.features, dtype=np.int64)
        targets = np.asarray(batch.labels, dtype=np.int64)
        windows, length = tokens.shape
        h = tape.const(np.zeros((windows, self.hidden_size)))
        ones = tape.const(np.ones((windows, self.hidden_size)))
        out_weights = ad.transpose(nodes["E"]) if self.tied else nodes["Wo"]
        running = None
        for t in range(length):
            x = ad.embedding(nodes["E"], tokens[:, t])
            xh = ad.concatenate(x, h)
            z = ad.sigmoid(ad.add(ad.matmul(xh, nodes["Wz"]), nodes["bz"]))
            c = ad.tanh(ad.add(ad.matmul(xh, nodes["Wc"]), nodes["bc"]))
            h = ad.add(ad.multiply(ad.subtract(ones, z), h), ad.multiply(z, c))
            logits = ad.add(ad.matmul(h, out_weights), nodes["bo"])
            step = ad.mean(ad.softmax_cross_entropy(logits, targets[:, t]))
            running = step if running is None else ad.add(running, step)
        if length == 1:
            return running
        return ad.scale(running, 1.0 / length)

    def evaluate(self, params, data):
        value = self.mean_loss(params, data)
        return Evaluation(value, "perplexity", math.exp(min(value, 700.0)), False)


def build_rnn_lm(vocab_size, embed_size=32, hidden_size=64, tied=False, seed=0):
    if min(vocab_size, embed_size, hidden_size) <= 0:
        raise ArgumentError("vocabulary, embedding and hidden sizes must be positive")
    if tied and embed_size != hidden_size:
        raise ArgumentError(f"tied output projection needs embed == hidden, got {embed_size} and {hidden_size}")
    model = RnnLmModel(int(vocab_size), int(embed_size), int(hidden_size), bool(tied), int(seed))
    logging.info(f"Built rnn language model with {model.layout.size} parameters")
    return model


class QuadraticModel(DifferentiableModel):
    """
    Weighted sum of per-instance quadratics 1/2 (w - c_i)^T A_i (w - c_i).

    The "data" argument is the weight vector over instances (uniform when None).
    """

    kind = "quadratic"

    def __init__(self, centers, hessians, init=None):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        self.hessians = np.asarray(hessians, dtype=np.float64).reshape(
            self.centers.shape[0], self.centers.shape[1], self.centers.shape[1])
        self.dim = self.centers.shape[1]
        self.layout = Layout.from_shapes([("w", (self.dim,))])
        self._init = np.zeros(self.dim) if init is None else np.asarray(init, dtype=np.float64)

    def init_params(self):
        return ParamVector(self._init.copy(), self.layout)

    def descriptor(self):
        return {"kind": self.kind, "dim": self.dim, "instances": int(self.centers.shape[0])}

    def _weights(self, data):
        if data is None:
            return np.full(self.centers.shape[0], 1.0 / self.centers.shape[0])
        weights = np.asarray(data, dtype=np.float64)
        if weights.shape != (self.centers.shape[0],):
            raise DataError(f"expected {self.centers.shape[0]} instance weights, got {weights.shape}")
        return weights

    def check_batch(self, batch):
        self._weights(batch)

    def _loss_node(self, tape, nodes, batch):
        weights = self._weights(batch)
        w = nodes["w"]
        running = None
        for center, hessian, weight in zip(self.centers, self.hessians, weights):
            diff = ad.subtract(w, tape.const(center))
            term = ad.scale(ad.total(ad.multiply(diff, ad.matmul(tape.const(hessian), diff))), 0.5 * weight)
            running = term if running is None else ad.add(running, term)
        return running


def model_from_descriptor(descriptor, seed=0):
    kind = descriptor.get("kind")
    if kind == "mlp":
        return build_mlp(descriptor["layer_sizes"], seed, descriptor.get("activation", "relu"))
    if kind == "rnn":
        return build_rnn_lm(descriptor["vocab_size"], descriptor["embed"], descriptor["hidden"],
                            descriptor.get("tied", False), seed)
    raise ArgumentError(f"cannot rebuild a '{kind}' model from its descriptor")
