import logging
import math
from dataclasses import dataclass, field

import numpy as np

from samlab.errors import ArgumentError, NumericalAbort
from samlab.utils.optim_utils import step_decay
from samlab.utils.sam_utils import PassCounter, log_config, sam_objective


@dataclass
class EpochMetrics:
    epoch: int
    phase: str
    learning_rate: float
    train_loss: float
    eval_loss: float
    eval_metric_name: str
    eval_metric: float
    grad_norm: float
    segment_grad_norms: dict
    passes: int
    batches: int

    def row(self):
        row = {
            "epoch": self.epoch,
            "phase": self.phase,
            "learning_rate": self.learning_rate,
            "train_loss": self.train_loss,
            "eval_loss": self.eval_loss,
            "eval_metric_name": self.eval_metric_name,
            "eval_metric": self.eval_metric,
            "grad_norm": self.grad_norm,
            "passes": self.passes,
            "batches": self.batches,
        }
        for name, value in self.segment_grad_norms.items():
            row[f"grad_norm.{name}"] = value
        return row


@dataclass
class TrainMetrics:
    epochs: list = field(default_factory=list)

    @property
    def passes(self):
        return self.epochs[-1].passes if self.epochs else 0

    def final(self):
        return self.epochs[-1] if self.epochs else None


def metric_columns(layout):
    return ["epoch", "phase", "learning_rate", "train_loss", "eval_loss", "eval_metric_name", "eval_metric",
            "grad_norm", "passes", "batches"] + [f"grad_norm.{name}" for name in layout.names()]


def _segment_norms(grad):
    return {seg.name: float(np.linalg.norm(grad.data[seg.offset:seg.stop])) for seg in grad.layout}


def train(model, dataset, optimizer, cfg, epochs, seed=0, batch_size=32, eval_set=None, lr_decay=1.0,
          decay_every=0, init_params=None, on_epoch=None, debug=False):
    """
    Train with the configured objective, plain before cfg.start_epoch.

    Epochs are 0-based. Batches are shuffled from a generator seeded with
    `seed`, so a run is deterministic given its inputs. `on_epoch` receives
    each EpochMetrics as soon as the epoch finishes.
    """
    if epochs < 1:
        raise ArgumentError(f"epochs must be at least 1, got {epochs}")
    if batch_size < 1:
        raise ArgumentError(f"batch size must be at least 1, got {batch_size}")
    if len(dataset) == 0:
        raise ArgumentError("cannot train on an empty dataset")

    params = model.init_params() if init_params is None else init_params.copy()
    rng = np.random.default_rng(seed)
    counter = PassCounter()
    metrics = TrainMetrics()
    log_config(cfg)

    for epoch in range(epochs):
        lr = step_decay(optimizer.learning_rate, epoch, lr_decay, decay_every)
        active = cfg.active(epoch)
        phase = "sam" if active else ("warmup" if cfg.K >= 1 else "plain")
        loss_sum, norm_sum, rows = 0.0, 0.0, 0
        segment_sums = {name: 0.0 for name in model.layout.names()}

        for b, batch in enumerate(dataset.batches(batch_size, rng)):
            if active:
                loss, grad, _ = sam_objective(model, params, batch, cfg, counter, debug)
            else:
                loss, grad = model.loss_and_grad(params, batch)
                counter.tick()
            if not math.isfinite(loss) or not np.all(np.isfinite(grad.data)):
                logging.error(f"Non-finite loss {loss} at epoch {epoch}, batch {b}")
                raise NumericalAbort("non-finite training loss", epoch=epoch, batch=b)
            optimizer.step(params, grad, lr)

            loss_sum += loss * len(batch)
            rows += len(batch)
            norm_sum += grad.norm()
            for name, value in _segment_norms(grad).items():
                segment_sums[name] += value
            batches = b + 1

        evaluation = model.evaluate(params, eval_set) if eval_set is not None and len(eval_set) else None
        epoch_metrics = EpochMetrics(
            epoch=epoch,
            phase=phase,
            learning_rate=lr,
            train_loss=loss_sum / rows,
            eval_loss=evaluation.loss if evaluation else float("nan"),
            eval_metric_name=evaluation.metric_name if evaluation else "",
            eval_metric=evaluation.metric if evaluation else float("nan"),
            grad_norm=norm_sum / batches,
            segment_grad_norms={name: total / batches for name, total in segment_sums.items()},
            passes=counter.count,
            batches=batches,
        )
        metrics.epochs.append(epoch_metrics)
        logging.info(f"Epoch {epoch} [{phase}] train_loss={epoch_metrics.train_loss:.6f} "
                     f"eval_{epoch_metrics.eval_metric_name or 'metric'}={epoch_metrics.eval_metric:.6f} "
                     f"grad_norm={epoch_metrics.grad_norm:.4g} passes={counter.count}")
        if on_epoch is not None:
            on_epoch(epoch_metrics)

    return params, metrics
