"""Edge side: double-buffered actor, fixed-period control tick, episode supervision."""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mdp import ActionHistory, MdpConfig, build_observation, distance_to_target, is_terminal, update_on_target
from .nn import BlobError, Mlp, decode_params
from .noise import GaussianNoise
from .plant import PlantFault, PlantInterface, ResetFault
from .transport import EpisodeEvent, EpisodeEventPayload, StateActionPayload, Tag

log = logging.getLogger(__name__)

TRAIN = "train"
EVAL = "eval"


@dataclass(frozen=True)
class EdgeConfig:
    period: float = 1.0 / 30.0
    max_episode_steps: int = 1000  # T_e
    success_steps: int = 750  # T_g
    on_target_cap: int = 100
    eval_every: int = 5
    converge_after: int = 5
    calibration_period: int = 10_000
    exploration_std: float = 0.05
    upstream_capacity: int | None = None  # None = unbounded local buffer

    def __post_init__(self):
        if self.success_steps > self.max_episode_steps:
            raise ValueError("T_g must not exceed T_e")
        for name in ("max_episode_steps", "success_steps", "on_target_cap", "eval_every", "converge_after", "calibration_period"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EdgeConfig.{name} must be positive")


class DoubleBufferedActor:
    """Two actor slots; inference reads the active one, updates fill the other and flip.

    The flip is a single int store. Inference publishes the slot it is reading
    so that a writer never starts overwriting it; only the writer ever waits.
    """

    blocks_inference = False

    def __init__(self, initial: Mlp):
        self.spec = initial.spec
        self._slots = (initial.copy(), initial.copy())
        self._active = 0
        self._reading = -1
        self.applies = 0
        self.rejected = 0

    @property
    def active(self) -> Mlp:
        return self._slots[self._active]

    @property
    def active_slot(self) -> int:
        return self._active

    @property
    def version(self) -> int:
        return self._slots[self._active].version

    def infer(self, obs: np.ndarray) -> float:
        while True:
            idx = self._active
            self._reading = idx
            if self._active == idx:
                break
        try:
            return float(self._slots[idx](obs)[0])
        finally:
            self._reading = -1

    def load_inactive(self, blob: bytes) -> int | None:
        """Decode ``blob`` into the inactive slot. Returns its version, or None if rejected."""
        try:
            flat, version = decode_params(blob, self.spec)
        except BlobError as exc:
            self.rejected += 1
            log.warning("discarding weight blob: %s", exc)
            return None
        if version <= self.version:
            return None
        target = 1 - self._active
        while self._reading == target:
            time.sleep(0)
        self._slots[target].load_flat(flat, version)
        return version

    def toggle(self) -> None:
        self._active = 1 - self._active
        self.applies += 1

    def apply(self, blob: bytes) -> bool:
        if self.load_inactive(blob) is None:
            return False
        self.toggle()
        return True


class SingleBufferedActor(DoubleBufferedActor):
    """Baseline for latency instrumentation: updates overwrite the slot inference reads."""

    blocks_inference = True

    def load_inactive(self, blob: bytes) -> int | None:
        try:
            flat, version = decode_params(blob, self.spec)
        except BlobError:
            self.rejected += 1
            return None
        if version <= self.version:
            return None
        self._slots[self._active].load_flat(flat, version)
        return version

    def toggle(self) -> None:
        self.applies += 1


@dataclass
class EpisodeOutcome:
    episode: int
    kind: str
    steps: int
    on_target: int
    reason: str  # time_limit | terminal | on_target | fault
    success: bool
    cumulative_steps: int
    actor_version: int = 0


@dataclass
class TickRecord:
    wall: float  # measured seconds spent in the control path
    sim_latency: float  # modelled sense-to-actuate latency on the simulated clock


@dataclass
class Supervisor:
    episode: int = 0
    step: int = 0
    on_target: int = 0
    kind: str = TRAIN
    cumulative_steps: int = 0
    global_steps: int = 0
    train_episodes_since_eval: int = 0
    consecutive_successes: int = 0
    calibrations: int = 0
    converged: bool = False
    running: bool = False
    outcomes: list = field(default_factory=list)


class EdgeRuntime:
    """Control loop logic, independent of how time advances.

    Upstream messages are appended to ``outbox`` as (tag, payload) pairs and
    never block; the transport drains it when a session is up.
    """

    def __init__(
        self,
        plant: PlantInterface,
        actor: DoubleBufferedActor,
        cfg: EdgeConfig | None = None,
        mdp_cfg: MdpConfig | None = None,
        seed: int | None = 0,
        reset_target: Callable[[], float] | None = None,
    ):
        self.plant = plant
        self.actor = actor
        self.cfg = cfg or EdgeConfig()
        self.mdp = mdp_cfg or MdpConfig()
        self.rng = np.random.default_rng(seed)
        self.noise = GaussianNoise(self.rng, self.cfg.exploration_std)
        half = 0.5 * self.mdp.x_max
        self.reset_target = reset_target or (lambda: float(self.rng.uniform(-half, half)))
        self.history = ActionHistory()
        self.sup = Supervisor()
        self.outbox: deque = deque(maxlen=self.cfg.upstream_capacity)
        self.ticks: list[TickRecord] = []
        self.sent_observations: list[np.ndarray] | None = None
        self.inference_cost = 0.0
        self.blocked_until = 0.0  # simulated time until which the inference slot is being written

    # -- messaging ----------------------------------------------------------------
    def _send(self, tag: Tag, payload: bytes = b"") -> None:
        self.outbox.append((tag, payload))

    def _event(self, ev: EpisodeEvent) -> None:
        self._send(Tag.EPISODE_EVENT, EpisodeEventPayload(ev, self.sup.episode, self.sup.cumulative_steps).pack())

    def apply_weights(self, blob: bytes) -> bool:
        return self.actor.apply(blob)

    # -- episodes -----------------------------------------------------------------
    def next_kind(self) -> str:
        return EVAL if self.sup.train_episodes_since_eval >= self.cfg.eval_every else TRAIN

    def start_episode(self) -> None:
        sup = self.sup
        sup.episode += 1
        sup.step = 0
        sup.on_target = 0
        sup.kind = self.next_kind()
        sup.running = True
        self.history.clear()
        self.noise.reset()
        self._event(EpisodeEvent.EVAL_BEGIN if sup.kind == EVAL else EpisodeEvent.TRAIN_BEGIN)

    def _payload(self, obs, action, state, terminal) -> None:
        p = StateActionPayload(self.sup.episode, self.sup.step, tuple(float(v) for v in obs), float(action), state.as_tuple(), terminal, self.sup.on_target)
        self._send(Tag.STATE_ACTION, p.pack())

    def control_tick(self, now: float | None = None) -> EpisodeOutcome | None:
        """Sense, infer, actuate, report. Returns the outcome when the episode ends."""
        sup, cfg = self.sup, self.cfg
        t0 = time.perf_counter()
        wait = 0.0
        if now is not None and self.blocked_until > now:
            wait = self.blocked_until - now
        try:
            s = self.plant.read_state()
        except PlantFault:
            return self._abort()
        obs = build_observation(s, self.history)
        terminal = is_terminal(s, self.mdp)
        end = None
        if sup.step >= cfg.max_episode_steps:
            end = "time_limit"
        elif terminal:
            end = "terminal"
        else:
            sup.on_target = update_on_target(sup.on_target, distance_to_target(s, self.mdp), self.mdp)
            if sup.kind == TRAIN and sup.on_target > cfg.on_target_cap:
                end = "on_target"
        if end is not None:
            # final state of the episode: reported as successor only, nothing actuated
            self._payload(obs, 0.0, s, terminal)
            self._record(t0, wait)
            return self._end(end)
        a = self.actor.infer(obs)
        if sup.kind == TRAIN:
            a += self.noise.sample()
        a = min(1.0, max(-1.0, a))
        try:
            self.plant.apply_action(a)
        except PlantFault:
            self._record(t0, wait)
            return self._abort()
        self.history.push(a)
        self._payload(obs, a, s, False)
        if self.sent_observations is not None:
            self.sent_observations.append(obs)
        sup.step += 1
        sup.global_steps += 1
        if sup.kind == TRAIN:
            sup.cumulative_steps += 1
        self._record(t0, wait)
        return None

    def _record(self, t0: float, wait: float) -> None:
        self.ticks.append(TickRecord(time.perf_counter() - t0, self.inference_cost + wait))

    def _abort(self) -> EpisodeOutcome:
        log.error("plant fault, emergency stop")
        try:
            self.plant.apply_action(0.0)
        except PlantFault:
            pass
        return self._end("fault")

    def _end(self, reason: str) -> EpisodeOutcome:
        sup, cfg = self.sup, self.cfg
        sup.running = False
        success = sup.kind == EVAL and reason == "time_limit" and sup.on_target >= cfg.success_steps
        out = EpisodeOutcome(sup.episode, sup.kind, sup.step, sup.on_target, reason, success, sup.cumulative_steps, self.actor.version)
        if sup.kind == EVAL:
            self._event(EpisodeEvent.EVAL_END)
            sup.train_episodes_since_eval = 0
            sup.consecutive_successes = sup.consecutive_successes + 1 if success else 0
            if sup.consecutive_successes >= cfg.converge_after and not sup.converged:
                sup.converged = True
                self._event(EpisodeEvent.CONVERGED)
        else:
            self._event(EpisodeEvent.TRAIN_END)
            sup.train_episodes_since_eval += 1
        sup.outcomes.append(out)
        return out

    def reset_plant(self) -> None:
        """Between episodes: reset (one retry), then calibrate when a period boundary passed."""
        self._event(EpisodeEvent.RESET_BEGIN)
        for attempt in range(2):
            try:
                self.plant.reset_to(self.reset_target())
                break
            except ResetFault:
                if attempt == 1:
                    raise
                log.warning("reset failed, retrying once")
        due = self.sup.global_steps // self.cfg.calibration_period
        if due > self.sup.calibrations:
            self.plant.calibrate()
            self.sup.calibrations = due
        self._event(EpisodeEvent.RESET_END)

    def supervise_episode(self, between_ticks: Callable[[], None] | None = None) -> EpisodeOutcome:
        """Run one full episode followed by the plant reset."""
        self.start_episode()
        while True:
            out = self.control_tick()
            if between_ticks is not None:
                between_ticks()
            if out is not None:
                break
        self.reset_plant()
        return out
