"""Cart-pole plant: continuous-time dynamics, a one-step actuation delay, resets.

The simulated plant integrates the Lagrangian cart-pole equations (uniform rod
pole, viscous cart friction, viscous pivot friction, DC motor with back-EMF)
with fixed-step RK4. ``PlantInterface`` is the boundary a hardware driver
would implement instead.
"""

from __future__ import annotations

import math
import random
from abc import ABC, abstractmethod
from dataclasses import dataclass, fields, replace

from .mdp import PlantState, wrap_angle


class PlantFault(RuntimeError):
    """Emergency stop: the plant produced or was fed a non-finite state."""


class ResetFault(RuntimeError):
    """A reset or calibration did not settle within its step budget."""


@dataclass(frozen=True)
class PlantConfig:
    k_f: float = 10.0
    cart_mass: float = 0.57
    pole_mass: float = 0.127
    pole_length: float = 0.33
    motor_gain: float = 10.0
    back_emf: float = 5.0
    gravity: float = 9.81
    dt: float = 1.0 / 300.0
    period: float = 1.0 / 30.0
    reset_gain: float = 2.0
    reset_tolerance: float = 0.005
    settle_rate: float = 0.05
    settle_angle: float = 0.05
    reset_max_ticks: int = 30_000
    encoder_drift: float = 0.0  # rad added to the reading per tick, off by default
    x_max: float = 0.34

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "pole_length", "gravity", "dt", "period"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PlantConfig.{name} must be positive")
        if self.k_f < 0 or self.back_emf < 0:
            raise ValueError("friction coefficients must be non-negative")
        if self.dt > self.period:
            raise ValueError("integration step exceeds the control period")
        ratio = self.period / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("integration step must divide the control period evenly")

    @property
    def substeps(self) -> int:
        return int(round(self.period / self.dt))

    @property
    def pivot_friction(self) -> float:
        return self.k_f * 1e-4

    @classmethod
    def from_mapping(cls, values: dict) -> "PlantConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown plant config key {key!r}")
            kwargs[key] = int(raw) if key == "reset_max_ticks" else float(raw)
        return cls(**kwargs)


def _derivatives(x_dot, alpha, alpha_dot, force, cfg: PlantConfig):
    # Lagrangian cart-pole; pole is a uniform rod pivoting at the cart, alpha=0 upright.
    m = cfg.pole_mass
    lc = 0.5 * cfg.pole_length
    inertia = m * cfg.pole_length * cfg.pole_length / 3.0
    s = math.sin(alpha)
    c = math.cos(alpha)
    a11 = cfg.cart_mass + m
    a12 = m * lc * c
    a22 = inertia
    rhs1 = force - cfg.k_f * x_dot + m * lc * s * alpha_dot * alpha_dot
    rhs2 = m * cfg.gravity * lc * s - cfg.pivot_friction * alpha_dot
    det = a11 * a22 - a12 * a12
    x_acc = (rhs1 * a22 - a12 * rhs2) / det
    alpha_acc = (a11 * rhs2 - a12 * rhs1) / det
    return x_acc, alpha_acc


def dynamics_step(state: PlantState, effective_action: float, cfg: PlantConfig) -> PlantState:
    """Advance the plant by one integration step of length ``cfg.dt``."""
    if not state.is_finite() or not math.isfinite(effective_action):
        raise PlantFault(f"non-finite plant input: {state}, action={effective_action}")
    x, v, al, w = state.as_tuple()
    gain = cfg.motor_gain * effective_action
    emf = cfg.back_emf
    h = cfg.dt

    def f(v_, al_, w_):
        return _derivatives(v_, al_, w_, gain - emf * v_, cfg)

    k1a, k1w = f(v, al, w)
    v2, w2 = v + 0.5 * h * k1a, w + 0.5 * h * k1w
    k2a, k2w = f(v2, al + 0.5 * h * w, w2)
    v3, w3 = v + 0.5 * h * k2a, w + 0.5 * h * k2w
    k3a, k3w = f(v3, al + 0.5 * h * w2, w3)
    v4, w4 = v + h * k3a, w + h * k3w
    k4a, k4w = f(v4, al + h * w3, w4)

    x_new = x + h / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4)
    v_new = v + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
    al_new = al + h / 6.0 * (w + 2.0 * w2 + 2.0 * w3 + w4)
    w_new = w + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
    if not (math.isfinite(x_new) and math.isfinite(v_new) and math.isfinite(al_new) and math.isfinite(w_new)):
        raise PlantFault("integration diverged")
    return PlantState(x_new, v_new, wrap_angle(al_new), w_new)


def mechanical_energy(state: PlantState, cfg: PlantConfig) -> float:
    """Kinetic plus potential energy, zero potential at the pivot height."""
    m = cfg.pole_mass
    lc = 0.5 * cfg.pole_length
    inertia = m * cfg.pole_length * cfg.pole_length / 3.0
    kinetic = (
        0.5 * (cfg.cart_mass + m) * state.x_dot**2
        + m * lc * state.x_dot * state.alpha_dot * math.cos(state.alpha)
        + 0.5 * inertia * state.alpha_dot**2
    )
    return kinetic + m * cfg.gravity * lc * math.cos(state.alpha)


class PlantInterface(ABC):
    """Sensor/actuator boundary. Calls must be serialized by the owning loop."""

    @abstractmethod
    def read_state(self) -> PlantState: ...

    @abstractmethod
    def apply_action(self, action: float) -> PlantState: ...

    @abstractmethod
    def reset_to(self, x_target: float) -> PlantState: ...

    @abstractmethod
    def calibrate(self) -> None: ...


class DelayLine:
    """Holds one action for exactly one control period before it reaches the motor."""

    def __init__(self):
        self.pending = 0.0

    def swap(self, action: float) -> float:
        applied, self.pending = self.pending, float(action)
        return applied

    def clear(self) -> None:
        self.pending = 0.0


class SimulatedPlant(PlantInterface):
    def __init__(self, cfg: PlantConfig | None = None, state: PlantState | None = None, seed: int | None = None):
        self.cfg = cfg or PlantConfig()
        self.state = state or PlantState(alpha=math.pi)
        self.delay = DelayLine()
        self.rng = random.Random(seed)
        self.encoder_offset = 0.0
        self.ticks = 0
        self.applied_log: list[float] = []
        self.log_applied = False

    # -- sensing / actuation ------------------------------------------------
    def read_state(self) -> PlantState:
        s = self.state
        if self.encoder_offset == 0.0:
            return s
        return PlantState(s.x, s.x_dot, wrap_angle(s.alpha + self.encoder_offset), s.alpha_dot)

    def _integrate(self, action: float) -> None:
        s = self.state
        cfg = self.cfg
        for _ in range(cfg.substeps):
            s = dynamics_step(s, action, cfg)
        self.state = s
        self.ticks += 1
        if cfg.encoder_drift:
            self.encoder_offset += cfg.encoder_drift

    def tick(self, action: float) -> PlantState:
        """Queue ``action`` and run one control period on the previously queued one."""
        applied = self.delay.swap(action)
        if self.log_applied:
            self.applied_log.append(applied)
        self._integrate(applied)
        return self.read_state()

    apply_action = tick

    def teleport(self, state: PlantState) -> PlantState:
        """Simulation-only reset: place the plant in ``state`` with an empty delay line."""
        if not state.is_finite():
            raise PlantFault(f"cannot teleport to {state}")
        self.state = PlantState(state.x, state.x_dot, wrap_angle(state.alpha), state.alpha_dot)
        self.delay.clear()
        return self.read_state()

    # -- resets ---------------------------------------------------------------
    def _settled(self, s: PlantState) -> bool:
        cfg = self.cfg
        return abs(s.alpha_dot) < cfg.settle_rate and math.pi - abs(s.alpha) < cfg.settle_angle

    def reset_to(self, x_target: float) -> PlantState:
        """Drive the cart to ``x_target`` with a P-controller and wait for the pole to hang still."""
        cfg = self.cfg
        if not abs(x_target) < cfg.x_max:
            raise ValueError(f"reset target {x_target} outside (-{cfg.x_max}, {cfg.x_max})")
        self.delay.clear()
        for _ in range(cfg.reset_max_ticks):
            s = self.state
            if abs(s.x - x_target) < cfg.reset_tolerance and abs(s.x_dot) < cfg.settle_rate and self._settled(s):
                self.delay.clear()
                return self.read_state()
            a = max(-1.0, min(1.0, cfg.reset_gain * (x_target - s.x)))
            # the controller bypasses the learning-loop delay line
            self._integrate(a)
        raise ResetFault(f"reset to x={x_target:.3f} did not settle in {cfg.reset_max_ticks} ticks")

    def random_reset(self) -> PlantState:
        half = 0.5 * self.cfg.x_max
        return self.reset_to(self.rng.uniform(-half, half))

    def calibrate(self) -> None:
        """Let the pole settle without actuation, then zero the encoder at alpha = pi."""
        cfg = self.cfg
        self.delay.clear()
        for _ in range(cfg.reset_max_ticks):
            if self._settled(self.state) and abs(self.state.x_dot) < cfg.settle_rate:
                break
            self._integrate(0.0)
        else:
            raise ResetFault("calibration did not settle")
        s = self.state
        self.state = PlantState(s.x, s.x_dot, math.pi, s.alpha_dot)
        self.encoder_offset = 0.0


PLANTS = {"simulated": SimulatedPlant}


def make_plant(name: str, cfg: PlantConfig | None = None, seed: int | None = None) -> PlantInterface:
    try:
        factory = PLANTS[name]
    except KeyError:
        raise KeyError(f"unknown plant {name!r}; registered: {sorted(PLANTS)}") from None
    return factory(cfg, seed=seed)


def with_friction(cfg: PlantConfig, k_f: float) -> PlantConfig:
    return replace(cfg, k_f=k_f)
