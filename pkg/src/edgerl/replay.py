"""Bounded FIFO replay memory with uniform and combined-experience-replay sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .mdp import OBS_DIM


class InsufficientData(RuntimeError):
    pass


@dataclass(frozen=True)
class Experience:
    obs: np.ndarray
    action: float
    reward: float
    next_obs: np.ndarray
    terminal: bool


class Batch(NamedTuple):
    obs: np.ndarray  # (B, OBS_DIM)
    action: np.ndarray  # (B,)
    reward: np.ndarray  # (B,)
    next_obs: np.ndarray  # (B, OBS_DIM)
    terminal: np.ndarray  # (B,) 0.0 / 1.0

    def __len__(self) -> int:
        return self.action.shape[0]


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, OBS_DIM), dtype=np.float32)
        self.action = np.zeros(capacity, dtype=np.float32)
        self.reward = np.zeros(capacity, dtype=np.float32)
        self.next_obs = np.zeros((capacity, OBS_DIM), dtype=np.float32)
        self.terminal = np.zeros(capacity, dtype=np.float32)
        self.count = 0
        self.pushed = 0  # total pushes, including evicted items
        self._next = 0

    def __len__(self) -> int:
        return self.count

    def push(self, e: Experience) -> None:
        i = self._next
        self.obs[i] = e.obs
        self.action[i] = e.action
        self.reward[i] = e.reward
        self.next_obs[i] = e.next_obs
        self.terminal[i] = 1.0 if e.terminal else 0.0
        self._next = (i + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)
        self.pushed += 1

    @property
    def latest_index(self) -> int:
        if self.count == 0:
            raise InsufficientData("buffer is empty")
        return (self._next - 1) % self.capacity

    @property
    def latest(self) -> Experience:
        return self._experience(self.latest_index)

    def _experience(self, i: int) -> Experience:
        return Experience(self.obs[i].copy(), float(self.action[i]), float(self.reward[i]), self.next_obs[i].copy(), bool(self.terminal[i]))

    def __iter__(self):
        """Stored experiences, oldest first."""
        start = self._next if self.count == self.capacity else 0
        for k in range(self.count):
            yield self._experience((start + k) % self.capacity)

    def _gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.terminal[idx])

    def sample_indices_uniform(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.count < batch_size or batch_size <= 0:
            raise InsufficientData(f"need {batch_size} experiences, have {self.count}")
        return rng.integers(0, self.count, size=batch_size)

    def sample_indices_cer(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.count < batch_size or batch_size <= 0:
            raise InsufficientData(f"need {batch_size} experiences, have {self.count}")
        idx = np.empty(batch_size, dtype=np.int64)
        idx[: batch_size - 1] = rng.integers(0, self.count, size=batch_size - 1)
        # the newest transition always takes the last slot
        idx[-1] = self.latest_index
        return idx

    def sample_uniform(self, batch_size: int, rng: np.random.Generator) -> Batch:
        return self._gather(self.sample_indices_uniform(batch_size, rng))

    def sample_cer(self, batch_size: int, rng: np.random.Generator) -> Batch:
        return self._gather(self.sample_indices_cer(batch_size, rng))

    # -- persistence ----------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        n = self.count
        order = np.arange(n) if n < self.capacity else (np.arange(n) + self._next) % self.capacity
        return {
            "obs": self.obs[order].astype("<f4"),
            "action": self.action[order].astype("<f4"),
            "reward": self.reward[order].astype("<f4"),
            "next_obs": self.next_obs[order].astype("<f4"),
            "terminal": self.terminal[order].astype("<f4"),
            "pushed": np.array(self.pushed),
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        n = arrays["action"].shape[0]
        if n > self.capacity:
            raise ValueError(f"persisted buffer holds {n} items, capacity is {self.capacity}")
        self.obs[:n] = arrays["obs"]
        self.action[:n] = arrays["action"]
        self.reward[:n] = arrays["reward"]
        self.next_obs[:n] = arrays["next_obs"]
        self.terminal[:n] = arrays["terminal"]
        self.count = n
        self._next = n % self.capacity
        self.pushed = int(arrays["pushed"])

    def save(self, path: str | Path) -> None:
        np.savez(path, **self.state_arrays())

    @classmethod
    def load(cls, path: str | Path, capacity: int) -> "ReplayBuffer":
        buf = cls(capacity)
        with np.load(path) as data:
            buf.load_state(dict(data))
        return buf
