"""Cloud side: turns the edge's state-action stream into experiences and trains on them.

Everything runs on one logical event loop (``handle`` then ``service``), which
keeps the replay buffer single-writer and makes runs replayable.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

import numpy as np

from .ddpg import ActorCritic, Trainer, TrainerConfig
from .mdp import MdpConfig, PlantState, is_terminal, reward
from .nn import ACTOR_SPEC, CRITIC_SPEC, Mlp, serialize
from .replay import Experience, ReplayBuffer
from .transport import (
    EpisodeEvent,
    EpisodeEventPayload,
    FrameError,
    HelloPayload,
    HelloStatus,
    StateActionPayload,
    Tag,
    WireMessage,
    answer_hello,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class CheckpointError(ValueError):
    pass


class MetricsSink:
    """JSON-lines writer; keeps records in memory when no file is given."""

    def __init__(self, path: str | Path | None = None, keep: bool = False):
        self._fh: IO[str] | None = open(path, "a", encoding="utf-8") if path else None
        self.records: list[dict] | None = [] if keep or path is None else None

    def write(self, record: dict) -> None:
        if self.records is not None:
            self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class NullSink(MetricsSink):
    def __init__(self):
        self._fh = None
        self.records = None

    def write(self, record: dict) -> None:
        pass


@dataclass
class IngestState:
    previous: dict[int, StateActionPayload] = field(default_factory=dict)
    train_episodes: set[int] = field(default_factory=set)
    eval_episodes: set[int] = field(default_factory=set)
    corrupt: set[int] = field(default_factory=set)
    backlog: deque = field(default_factory=deque)
    enqueued: int = 0
    orphaned: int = 0  # payloads of episodes whose start this session never announced


class CloudService:
    def __init__(
        self,
        trainer: Trainer,
        buffer: ReplayBuffer,
        mdp_cfg: MdpConfig | None = None,
        metrics: MetricsSink | None = None,
        checkpoint_path: str | Path | None = None,
        checkpoint_every: int = 5000,
        checkpoint_replay: bool = True,
    ):
        self.trainer = trainer
        self.buffer = buffer
        self.mdp = mdp_cfg or MdpConfig()
        self.metrics = metrics if metrics is not None else NullSink()
        self.ingest_state = IngestState()
        self.pending_requests = 0
        self.session = 0
        self.last_sent_version: int | None = None
        self.published: list[tuple[int, int]] = []  # (session, version)
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.checkpoint_every = checkpoint_every
        self.checkpoint_replay = checkpoint_replay

    @classmethod
    def from_blobs(cls, actor_blob: bytes, critic_blob: bytes, cfg: TrainerConfig, capacity: int, seed: int = 0, **kwargs) -> "CloudService":
        from .nn import deserialize

        ac = ActorCritic(deserialize(actor_blob, ACTOR_SPEC), deserialize(critic_blob, CRITIC_SPEC), cfg)
        return cls(Trainer(ac, cfg, seed), ReplayBuffer(capacity), **kwargs)

    @property
    def actor(self) -> Mlp:
        return self.trainer.ac.actor

    # -- message dispatch ------------------------------------------------------------
    def handle(self, msg: WireMessage) -> list[tuple[Tag, bytes]]:
        """Process one upstream message; returns immediate replies (tag, payload)."""
        if msg.tag == Tag.STATE_ACTION:
            self.ingest(StateActionPayload.unpack(msg.payload))
        elif msg.tag == Tag.EPISODE_EVENT:
            self.on_event(EpisodeEventPayload.unpack(msg.payload))
        elif msg.tag == Tag.WEIGHTS_REQUEST:
            self.pending_requests += 1
        elif msg.tag == Tag.HELLO:
            reply = answer_hello(HelloPayload.unpack(msg.payload), ACTOR_SPEC.spec_hash)
            if reply.status == HelloStatus.OK:
                self.start_session()
            return [(Tag.HELLO, reply.pack())]
        elif msg.tag == Tag.HEARTBEAT:
            pass
        else:
            raise FrameError(f"unexpected upstream tag {msg.tag.name}")
        return []

    def start_session(self) -> None:
        """A (re)connected edge: forget its half-finished episodes, keep replay and backlog."""
        st = self.ingest_state
        st.previous.clear()
        st.train_episodes.clear()
        st.eval_episodes.clear()
        st.corrupt.clear()
        self.pending_requests = 0
        self.last_sent_version = None
        self.session += 1
        self.metrics.write({"type": "session", "session": self.session, "experiences": self.trainer.experiences})

    def service(self, budget: int | None = None) -> list[tuple[Tag, bytes]]:
        """Drain the backlog (within ``budget``) and answer a pending weight request.

        A request is held until the actor is newer than what this session
        already received, so an idle trainer produces no weight traffic. The
        first request of a session is always answered.
        """
        self.drain_backlog(budget)
        out = []
        if self.pending_requests and (self.last_sent_version is None or self.actor.version > self.last_sent_version):
            self.pending_requests = 0
            out.append((Tag.WEIGHTS, self.publish_weights()))
        return out

    # -- ingest -------------------------------------------------------------------------
    def on_event(self, ev: EpisodeEventPayload) -> None:
        st = self.ingest_state
        if ev.event == EpisodeEvent.EVAL_BEGIN:
            st.eval_episodes.add(ev.episode)
        elif ev.event == EpisodeEvent.TRAIN_BEGIN:
            st.train_episodes.add(ev.episode)
        elif ev.event in (EpisodeEvent.EVAL_END, EpisodeEvent.TRAIN_END):
            st.previous.pop(ev.episode, None)
            st.train_episodes.discard(ev.episode)
            st.eval_episodes.discard(ev.episode)
            st.corrupt.discard(ev.episode)
            self._maybe_checkpoint(episode_end=True)
        self.metrics.write({"type": "episode_event", "event": ev.event.name, "episode": ev.episode, "cumulative_steps": ev.cumulative_steps})

    def ingest(self, p: StateActionPayload) -> Experience | None:
        st = self.ingest_state
        if p.episode in st.corrupt:
            return None
        if p.episode in st.eval_episodes:
            return None
        if p.episode not in st.train_episodes:
            st.orphaned += 1
            return None
        prev = st.previous.get(p.episode)
        st.previous[p.episode] = p
        if prev is None:
            return None
        if p.step != prev.step + 1:
            log.error("episode %d: step %d after %d, dropping the rest of the episode", p.episode, p.step, prev.step)
            st.corrupt.add(p.episode)
            st.previous.pop(p.episode, None)
            self.metrics.write({"type": "corrupt_episode", "episode": p.episode, "step": p.step})
            return None
        s_t = PlantState(*prev.state)
        s_next = PlantState(*p.state)
        r = reward(s_t, prev.action, s_next, self.mdp)
        e = Experience(prev.obs_array(), prev.action, r, p.obs_array(), is_terminal(s_next, self.mdp))
        self.buffer.push(e)
        self.trainer.experiences += 1
        st.backlog.append(self.trainer.experiences)
        st.enqueued += 1
        self._maybe_checkpoint()
        return e

    def drain_backlog(self, budget: int | None = None) -> int:
        backlog = self.ingest_state.backlog
        n = 0
        while backlog and (budget is None or n < budget):
            step = backlog.popleft()
            report = self.trainer.train_step(self.buffer, step)
            self.metrics.write({"type": "train_step", **report.to_json()})
            n += 1
        return n

    @property
    def backlog(self) -> int:
        return len(self.ingest_state.backlog)

    def publish_weights(self) -> bytes:
        blob = serialize(self.actor)
        self.last_sent_version = self.actor.version
        self.published.append((self.session, self.actor.version))
        return blob

    # -- durability --------------------------------------------------------------------
    def _maybe_checkpoint(self, episode_end: bool = False) -> None:
        if self.checkpoint_path is None:
            return
        if episode_end or (self.trainer.experiences and self.trainer.experiences % self.checkpoint_every == 0):
            self.checkpoint(self.checkpoint_path)

    def checkpoint(self, path: str | Path, include_replay: bool | None = None) -> None:
        include_replay = self.checkpoint_replay if include_replay is None else include_replay
        tr = self.trainer
        ac = tr.ac
        meta = {
            "format": CHECKPOINT_FORMAT,
            "actor_spec_hash": ACTOR_SPEC.spec_hash,
            "critic_spec_hash": CRITIC_SPEC.spec_hash,
            "trainer_config": tr.cfg.to_dict(),
            "experiences": tr.experiences,
            "train_steps": tr.train_steps,
            "actor_updates": tr.actor_updates,
            "critic_updates": tr.critic_updates,
            "versions": [ac.actor.version, ac.critic.version, ac.target_actor.version, ac.target_critic.version],
            "rng": tr.rng.bit_generator.state,
            "backlog": list(self.ingest_state.backlog),
            "train_episodes": sorted(self.ingest_state.train_episodes),
            "eval_episodes": sorted(self.ingest_state.eval_episodes),
            "corrupt": sorted(self.ingest_state.corrupt),
            "replay_capacity": self.buffer.capacity,
            "replay": include_replay,
        }
        arrays = {
            "actor": ac.actor.flat,
            "critic": ac.critic.flat,
            "target_actor": ac.target_actor.flat,
            "target_critic": ac.target_critic.flat,
            "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        }
        for name, opt in (("actor_opt", ac.actor_opt), ("critic_opt", ac.critic_opt)):
            for k, v in opt.state_arrays().items():
                arrays[f"{name}.{k}"] = v
        for ep, p in self.ingest_state.previous.items():
            arrays[f"previous.{ep}"] = np.frombuffer(p.pack(), dtype=np.uint8)
        if include_replay:
            for k, v in self.buffer.state_arrays().items():
                arrays[f"replay.{k}"] = v
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(path)

    @classmethod
    def restore(cls, path: str | Path, mdp_cfg: MdpConfig | None = None, **kwargs) -> "CloudService":
        try:
            data = np.load(path)
            arrays = {k: data[k] for k in data.files}
            meta = json.loads(arrays["meta"].tobytes().decode())
        except Exception as exc:  # zip/JSON damage surfaces as assorted exception types
            raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("unsupported checkpoint format")
        if meta["actor_spec_hash"] != ACTOR_SPEC.spec_hash or meta["critic_spec_hash"] != CRITIC_SPEC.spec_hash:
            raise CheckpointError("checkpoint network spec does not match")
        cfg = TrainerConfig(**meta["trainer_config"])
        versions = meta["versions"]
        try:
            actor = Mlp(ACTOR_SPEC, arrays["actor"], versions[0])
            critic = Mlp(CRITIC_SPEC, arrays["critic"], versions[1])
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
        ac = ActorCritic(actor, critic, cfg)
        ac.target_actor = Mlp(ACTOR_SPEC, arrays["target_actor"], versions[2])
        ac.target_critic = Mlp(CRITIC_SPEC, arrays["target_critic"], versions[3])
        for name, opt in (("actor_opt", ac.actor_opt), ("critic_opt", ac.critic_opt)):
            opt.load_state({k: arrays[f"{name}.{k}"] for k in ("m", "v", "t", "faults")})
        for a in (ac.actor, ac.critic, ac.target_actor, ac.target_critic):
            if not np.isfinite(a.flat).all():
                raise CheckpointError("checkpoint contains non-finite parameters")
        tr = Trainer(ac, cfg, seed=None)
        tr.rng.bit_generator.state = meta["rng"]
        tr.experiences = meta["experiences"]
        tr.train_steps = meta["train_steps"]
        tr.actor_updates = meta["actor_updates"]
        tr.critic_updates = meta["critic_updates"]
        buf = ReplayBuffer(meta["replay_capacity"])
        if meta["replay"]:
            buf.load_state({k[len("replay.") :]: v for k, v in arrays.items() if k.startswith("replay.")})
        svc = cls(tr, buf, mdp_cfg, **kwargs)
        st = svc.ingest_state
        st.backlog.extend(meta["backlog"])
        st.train_episodes.update(meta["train_episodes"])
        st.eval_episodes.update(meta["eval_episodes"])
        st.corrupt.update(meta["corrupt"])
        for k, v in arrays.items():
            if k.startswith("previous."):
                st.previous[int(k.split(".", 1)[1])] = StateActionPayload.unpack(v.tobytes())
        if not meta["replay"]:
            # without the replay memory the delay schedule restarts from an empty buffer
            tr.experiences = 0
            st.backlog.clear()
        return svc
