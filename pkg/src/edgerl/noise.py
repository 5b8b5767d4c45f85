"""Exploration noise processes."""

from __future__ import annotations

import numpy as np


class OuNoise:
    """Ornstein-Uhlenbeck noise whose volatility decays linearly with training steps.

    The volatility falls from ``sigma_start`` to ``sigma_end`` over
    ``decay_steps`` calls to ``sample`` and stays there afterwards.
    """

    def __init__(self, rng: np.random.Generator, theta: float = 0.15, sigma_start: float = 0.4, sigma_end: float = 0.05, decay_steps: int = 500_000, mu: float = 0.0):
        if sigma_end > sigma_start:
            raise ValueError("noise magnitude must not increase")
        self.rng = rng
        self.theta = theta
        self.sigma_start = sigma_start
        self.sigma_end = sigma_end
        self.decay_steps = decay_steps
        self.mu = mu
        self.state = mu
        self.steps = 0

    @property
    def sigma(self) -> float:
        if self.decay_steps <= 0:
            return self.sigma_end
        frac = min(1.0, self.steps / self.decay_steps)
        return self.sigma_start + frac * (self.sigma_end - self.sigma_start)

    def reset(self) -> None:
        self.state = self.mu

    def sample(self) -> float:
        sigma = self.sigma
        self.state += self.theta * (self.mu - self.state) + sigma * self.rng.standard_normal()
        self.steps += 1
        return self.state


class GaussianNoise:
    def __init__(self, rng: np.random.Generator, std: float):
        self.rng = rng
        self.std = std

    def reset(self) -> None:
        pass

    def sample(self) -> float:
        return float(self.rng.normal(0.0, self.std)) if self.std > 0 else 0.0
