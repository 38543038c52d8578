"""Gradient-descent optimizers over parameter sets."""

from typing import Dict, Tuple

import numpy as np

from src.core.autodiff import global_norm
from src.core.config import OptimizerSettings
from src.nn.parameters import ParameterSet

Gradients = Dict[str, np.ndarray]


def clip_gradients(grads: Gradients, max_norm: float) -> Tuple[Gradients, float]:
    """Scale all gradients together so their global norm is at most ``max_norm`` (0 disables)."""
    norm = global_norm(grads.values())
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm


class Optimizer:
    """Base optimizer with a linear learning-rate decay over ``total_steps``."""

    def __init__(self, lr: float, total_steps: int, end_factor: float = 1.0):
        self.lr = lr
        self.total_steps = max(1, total_steps)
        self.end_factor = end_factor
        self.steps_taken = 0

    def current_lr(self) -> float:
        progress = min(self.steps_taken / self.total_steps, 1.0)
        return self.lr * (1.0 - (1.0 - self.end_factor) * progress)

    def step(self, params: ParameterSet, grads: Gradients) -> float:
        """Update ``params`` in place; returns the learning rate used."""
        lr = self.current_lr()
        for name in params.names():
            if name in grads:
                params[name] = params[name] - self._delta(name, grads[name], lr)
        self.steps_taken += 1
        return lr

    def _delta(self, name: str, grad: np.ndarray, lr: float) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    """Momentum-free gradient descent."""

    def _delta(self, name: str, grad: np.ndarray, lr: float) -> np.ndarray:
        return lr * grad


class Adam(Optimizer):
    def __init__(self, lr: float, total_steps: int, end_factor: float = 1.0, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(lr, total_steps, end_factor)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.first: Gradients = {}
        self.second: Gradients = {}

    def _delta(self, name: str, grad: np.ndarray, lr: float) -> np.ndarray:
        t = self.steps_taken + 1
        m = self.beta1 * self.first.get(name, 0.0) + (1.0 - self.beta1) * grad
        v = self.beta2 * self.second.get(name, 0.0) + (1.0 - self.beta2) * grad * grad
        self.first[name], self.second[name] = m, v
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


def build_optimizer(settings: OptimizerSettings, total_steps: int) -> Optimizer:
    if settings.optimizer == "adam":
        return Adam(settings.lr, total_steps, settings.lr_end_factor)
    return SGD(settings.lr, total_steps, settings.lr_end_factor)
