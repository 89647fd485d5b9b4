import logging

import numpy as np

from samlab.errors import ArgumentError


def clip_by_global_norm(grad, max_norm):
    """Rescale so the global L2 norm is at most max_norm; max_norm <= 0 disables clipping."""
    if max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def step_decay(learning_rate, epoch, decay=1.0, decay_every=0):
    if decay_every <= 0 or decay == 1.0:
        return learning_rate
    return learning_rate * decay ** (epoch // decay_every)


class SGD:

    def __init__(self, learning_rate=0.1, clip=0.0):
        if learning_rate <= 0:
            raise ArgumentError(f"learning rate must be positive, got {learning_rate}")
        self.learning_rate = learning_rate
        self.clip = clip

    def step(self, params, grad, learning_rate=None):
        lr = self.learning_rate if learning_rate is None else learning_rate
        params.data -= lr * clip_by_global_norm(grad.data, self.clip)


class Adam:

    def __init__(self, learning_rate=1e-3, betas=(0.9, 0.999), eps=1e-8, clip=0.0):
        if learning_rate <= 0:
            raise ArgumentError(f"learning rate must be positive, got {learning_rate}")
        self.learning_rate = learning_rate
        self.betas = betas
        self.eps = eps
        self.clip = clip
        self.velocities = None
        self.mean_squares = None
        self.t = 0

    def step(self, params, grad, learning_rate=None):
        lr = self.learning_rate if learning_rate is None else learning_rate
        g = clip_by_global_norm(grad.data, self.clip)
        if self.velocities is None:
            self.velocities = np.zeros_like(g)
            self.mean_squares = np.zeros_like(g)
        self.t += 1

        self.velocities = self.betas[0] * self.velocities + (1 - self.betas[0]) * g
        velocities = self.velocities / (1 - self.betas[0] ** self.t)  # bias correction
        self.mean_squares = self.betas[1] * self.mean_squares + (1 - self.betas[1]) * g ** 2
        mean_squares = self.mean_squares / (1 - self.betas[1] ** self.t)

        params.data -= lr * velocities / (np.sqrt(mean_squares) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def build_optimizer(name, learning_rate, clip=0.0):
    if name not in OPTIMIZERS:
        raise ArgumentError(f"unknown optimizer '{name}', expected one of {sorted(OPTIMIZERS)}")
    logging.info(f"Using {name} with learning rate {learning_rate} and clip {clip}")
    return OPTIMIZERS[name](learning_rate=learning_rate, clip=clip)
