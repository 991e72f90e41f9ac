"""Initialisation, AdaGrad updates and the cosine learning-rate schedule."""

import math
import zlib

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when a non-finite gradient or loss aborts optimisation."""


def xavier_init(shape, seed, name, dtype=np.float32):
    """Uniform Xavier sample, deterministic per (seed, parameter name).

    Fans: conv kernels (cout, cin, kh, kw) use cin*kh*kw / cout*kh*kw,
    linear weights (cout, cin) use cin / cout.
    """
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        fan_out = shape[0] * shape[2] * shape[3]
    elif len(shape) == 2:
        fan_in = shape[1]
        fan_out = shape[0]
    else:
        raise ValueError(f"xavier_init expects a 2-D or 4-D shape, got {shape}")
    rng = np.random.default_rng(
        np.random.SeedSequence((seed, zlib.crc32(name.encode("utf-8"))))
    )
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def cosine_lr(epoch, total_epochs, lr0):
    """Cosine annealing from lr0 at epoch 0 down to 0 at total_epochs."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class AdaGrad:
    """Per-coordinate AdaGrad over a parameter registry."""

    def __init__(self, params, eps=1e-10):
        self.params = params
        self.eps = eps
        self.acc = {name: np.zeros_like(p.value) for name, p in params.items()}

    def step(self, lr):
        """acc += g^2; p -= lr*g/(sqrt(acc)+eps); then zero the grads."""
        for name, p in self.params.items():
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
            acc = self.acc[name]
            acc += g * g
            p.value -= lr * g / (np.sqrt(acc) + self.eps)
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        return self.acc
