"""DDPG with target-action smoothing and a delayed critic/actor optimization schedule."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .mdp import ACTION_MAX, OBS_DIM
from .nn import ACTOR_SPEC, CRITIC_SPEC, Adam, Mlp, MlpSpec
from .replay import Batch, InsufficientData, ReplayBuffer

log = logging.getLogger(__name__)

PHASE_NONE = "none"
PHASE_CRITIC = "critic"
PHASE_BOTH = "critic+actor"


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.98
    tau: float = 0.005
    sigma: float = 0.1
    noise_clip: float = 0.3
    a_max: float = ACTION_MAX
    batch_size: int = 128
    critic_delay: int = 3500
    actor_delay: int = 5000
    td3_actor_delay: bool = False
    td3_period: int = 2
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    use_cer: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.sigma < 0 or self.noise_clip <= 0:
            raise ValueError("smoothing noise parameters must be positive")
        if not self.actor_delay >= self.critic_delay >= self.batch_size:
            raise ValueError("need actor_delay >= critic_delay >= batch_size")
        if self.td3_period < 1:
            raise ValueError("td3_period must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepReport:
    step: int
    phase: str
    critic_loss: float | None = None
    actor_objective: float | None = None

    def to_json(self) -> dict:
        return {"step": self.step, "phase": self.phase, "critic_loss": self.critic_loss, "actor_objective": self.actor_objective}


def smooth_target_action(a_target, rng: np.random.Generator, cfg: TrainerConfig, eps=None):
    """clip(a + clip(eps, -c, c), -a_max, a_max) with eps ~ N(0, sigma) unless given."""
    a_target = np.asarray(a_target)
    if eps is None:
        eps = rng.normal(0.0, cfg.sigma, size=a_target.shape) if cfg.sigma > 0 else np.zeros(a_target.shape)
    noise = np.clip(eps, -cfg.noise_clip, cfg.noise_clip)
    return np.clip(a_target + noise, -cfg.a_max, cfg.a_max).astype(a_target.dtype, copy=False)


def soft_update(learned: Mlp, target: Mlp, tau: float) -> None:
    if learned.flat.shape != target.flat.shape:
        raise ValueError("soft update between networks of different shape")
    target.flat *= 1.0 - tau
    target.flat += tau * learned.flat


def critic_input(obs: np.ndarray, action: np.ndarray) -> np.ndarray:
    return np.concatenate([obs, np.asarray(action).reshape(-1, 1)], axis=1)


class ActorCritic:
    """Learned and target networks plus their optimizers."""

    def __init__(self, actor: Mlp, critic: Mlp, cfg: TrainerConfig):
        self.actor = actor
        self.critic = critic
        self.target_actor = actor.copy()
        self.target_critic = critic.copy()
        self.actor_opt = Adam(actor.flat.size, cfg.actor_lr, dtype=actor.dtype)
        self.critic_opt = Adam(critic.flat.size, cfg.critic_lr, dtype=critic.dtype)

    @classmethod
    def fresh(cls, cfg: TrainerConfig, rng: np.random.Generator, actor_spec: MlpSpec = ACTOR_SPEC, critic_spec: MlpSpec = CRITIC_SPEC, dtype=np.float32):
        actor = Mlp.initialized(actor_spec, rng, final_scale=1e-3, dtype=dtype)
        critic = Mlp.initialized(critic_spec, rng, dtype=dtype)
        return cls(actor, critic, cfg)

    def reset_targets(self) -> None:
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()


class Trainer:
    """Owns the actor-critic, the schedule, and the sampling RNG.

    ``experiences`` counts transitions ingested since the run (or transfer)
    started; ``train_step`` decides what to optimize from that index.
    """

    def __init__(self, ac: ActorCritic, cfg: TrainerConfig, seed: int | None = 0):
        self.ac = ac
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.experiences = 0
        self.train_steps = 0
        self.actor_updates = 0
        self.critic_updates = 0
        self.faults = 0

    # -- pieces -------------------------------------------------------------------
    def compute_td_targets(self, batch: Batch) -> np.ndarray:
        ac, cfg = self.ac, self.cfg
        a_next = ac.target_actor(batch.next_obs).reshape(-1)
        a_next = smooth_target_action(a_next, self.rng, cfg)
        q_next = ac.target_critic(critic_input(batch.next_obs, a_next)).reshape(-1)
        return batch.reward + cfg.gamma * (1.0 - batch.terminal) * q_next

    def critic_update(self, batch: Batch, y: np.ndarray) -> float:
        critic = self.ac.critic
        q, cache = critic.forward(critic_input(batch.obs, batch.action))
        err = q.reshape(-1) - y
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            self.faults += 1
            log.warning("non-finite critic loss, skipping step")
            return loss
        grad, _ = critic.backward(cache, (2.0 / len(err)) * err)
        if self.ac.critic_opt.step(critic, grad):
            self.critic_updates += 1
        else:
            self.faults += 1
        return loss

    def actor_gradient(self, obs: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean Q(o, pi(o)) and its gradient w.r.t. the actor parameters."""
        actor, critic = self.ac.actor, self.ac.critic
        a, a_cache = actor.forward(obs)
        q, q_cache = critic.forward(critic_input(obs, a))
        n = q.shape[0]
        _, dq_dinput = critic.backward(q_cache, np.full(q.shape, 1.0 / n, dtype=q.dtype), param_grads=False)
        dq_da = dq_dinput[:, OBS_DIM:]
        grad, _ = actor.backward(a_cache, dq_da)
        return float(q.mean()), grad

    def actor_update(self, batch: Batch) -> float:
        objective, grad = self.actor_gradient(batch.obs)
        if not self.ac.actor_opt.step(self.ac.actor, -grad):
            self.faults += 1
            log.warning("non-finite actor gradient, skipping step")
        else:
            self.actor_updates += 1
        return objective

    def phase(self, step: int) -> str:
        cfg = self.cfg
        if step < cfg.critic_delay:
            return PHASE_NONE
        if step < cfg.actor_delay:
            return PHASE_CRITIC
        if cfg.td3_actor_delay and (step - cfg.actor_delay) % cfg.td3_period != 0:
            return PHASE_CRITIC
        return PHASE_BOTH

    def sample(self, buffer: ReplayBuffer) -> Batch:
        if self.cfg.use_cer:
            return buffer.sample_cer(self.cfg.batch_size, self.rng)
        return buffer.sample_uniform(self.cfg.batch_size, self.rng)

    # -- the step -------------------------------------------------------------------
    def train_step(self, buffer: ReplayBuffer, step: int | None = None) -> StepReport:
        """One optimization round for the experience with index ``step``."""
        if step is None:
            step = self.experiences
        self.train_steps += 1
        phase = self.phase(step)
        report = StepReport(step, PHASE_NONE)
        if phase == PHASE_NONE:
            return report
        try:
            batch = self.sample(buffer)
        except InsufficientData:
            return report
        y = self.compute_td_targets(batch)
        report.critic_loss = self.critic_update(batch, y)
        soft_update(self.ac.critic, self.ac.target_critic, self.cfg.tau)
        report.phase = PHASE_CRITIC
        if phase == PHASE_BOTH:
            report.actor_objective = self.actor_update(batch)
            soft_update(self.ac.actor, self.ac.target_actor, self.cfg.tau)
            report.phase = PHASE_BOTH
        return report

    def ingest_and_train(self, buffer: ReplayBuffer, experience) -> StepReport:
        buffer.push(experience)
        self.experiences += 1
        return self.train_step(buffer, self.experiences)
