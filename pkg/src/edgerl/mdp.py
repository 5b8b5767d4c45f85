"""Observation, reward, termination and on-target bookkeeping for the cart-pole task.

Everything here is a pure function of its arguments so the edge, the cloud
and the experiment harness can share it without coordination.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, fields
from typing import Iterable

import numpy as np

OBS_DIM = 10
HISTORY_LEN = 5
ACTION_MAX = 1.0


@dataclass(frozen=True)
class PlantState:
    x: float = 0.0
    x_dot: float = 0.0
    alpha: float = 0.0
    alpha_dot: float = 0.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.x_dot, self.alpha, self.alpha_dot)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_tuple())


@dataclass(frozen=True)
class MdpConfig:
    x_max: float = 0.34
    alpha_dot_max: float = 20.0
    d_target: float = 0.05
    delta: float = 5.0
    u: float = 0.1
    v: float = 20.0
    pole_length: float = 0.33

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"MdpConfig.{f.name} must be positive")


class ActionHistory:
    """The last five actuated actions, oldest first, zeroed at episode start."""

    def __init__(self, actions: Iterable[float] | None = None):
        self._buf: deque[float] = deque([0.0] * HISTORY_LEN, maxlen=HISTORY_LEN)
        if actions is not None:
            actions = list(actions)
            if len(actions) != HISTORY_LEN:
                raise ValueError(f"history needs exactly {HISTORY_LEN} actions")
            self._buf.extend(float(a) for a in actions)

    def push(self, action: float) -> None:
        self._buf.append(float(action))

    def clear(self) -> None:
        self._buf.extend([0.0] * HISTORY_LEN)

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(self._buf)

    def __len__(self) -> int:
        return len(self._buf)


def wrap_angle(raw: float) -> float:
    """Map an angle onto (-pi, pi]."""
    if not math.isfinite(raw):
        raise ValueError(f"cannot wrap non-finite angle {raw!r}")
    wrapped = math.fmod(raw, 2.0 * math.pi)
    if wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    elif wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def distance_to_target(state: PlantState, cfg: MdpConfig) -> float:
    """Euclidean distance from the pole tip to the upright tip position at x=0."""
    l = cfg.pole_length
    dx = state.x + l * math.sin(state.alpha)
    dy = l * math.cos(state.alpha) - l
    return math.hypot(dx, dy)


def is_terminal(state: PlantState, cfg: MdpConfig) -> bool:
    return abs(state.x) >= cfg.x_max or abs(state.alpha_dot) >= cfg.alpha_dot_max


def reward(s_t: PlantState, a_t: float, s_next: PlantState, cfg: MdpConfig) -> float:
    # distance is taken on s_t, the safety penalty on the successor
    beta = 1.0 if is_terminal(s_next, cfg) else 0.0
    return math.exp(-cfg.delta * distance_to_target(s_t, cfg)) - cfg.u * a_t * a_t - cfg.v * beta


def update_on_target(n: int, d: float, cfg: MdpConfig) -> int:
    if n < 0:
        raise ValueError("on-target counter cannot be negative")
    return n + 1 if d <= cfg.d_target else 0


def build_observation(state: PlantState, history: ActionHistory) -> np.ndarray:
    if len(history) != HISTORY_LEN:
        raise ValueError(f"history must hold {HISTORY_LEN} actions")
    return np.array(
        (
            state.x,
            state.x_dot,
            math.sin(state.alpha),
            math.cos(state.alpha),
            state.alpha_dot,
            *history.as_tuple(),
        ),
        dtype=np.float64,
    )
