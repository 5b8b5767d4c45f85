"""Edge, cloud and link driven together on one simulated clock.

Every message still goes through ``encode``/``decode``; only the sockets are
replaced. Control ticks happen at multiples of the period. The weight-pull
path is event driven in between: a request goes out as soon as the previous
blob has been applied (at most one request per period), the cloud answers once
it has a newer actor, and the answer reaches the edge after the throttle's
transmission delay.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .cloud import CloudService
from .edge import EdgeRuntime, EpisodeOutcome
from .transport import (
    PROTOCOL_VERSION,
    HelloPayload,
    HelloStatus,
    Sequencer,
    SessionRefused,
    SimClock,
    Tag,
    Throttle,
    ThrottleConfig,
    WireMessage,
    decode,
    encode,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinkConfig:
    bandwidth_mbit: float | None = None  # downstream weight bandwidth, None = unlimited
    apply_time: float = 0.0  # modelled seconds to decode a blob into a slot on the edge
    inference_cost: float = 0.0  # modelled seconds of inference per control tick
    train_steps_per_tick: float | None = None  # trainer throughput, None = keeps up

    def __post_init__(self):
        if self.apply_time < 0 or self.inference_cost < 0:
            raise ValueError("modelled times must be non-negative")
        if self.train_steps_per_tick is not None and self.train_steps_per_tick < 0:
            raise ValueError("train_steps_per_tick must be non-negative")


class SimSystem:
    def __init__(self, cloud: CloudService, edge: EdgeRuntime, link: LinkConfig | None = None):
        self.cloud = cloud
        self.link = link or LinkConfig()
        self.clock = SimClock()
        self.period = edge.cfg.period
        self.tick_index = 0
        self.events: list[tuple] = []
        self.applied: list[tuple[float, int]] = []  # (time the new version became active, version)
        self.backlog_trace: list[int] = []
        self._train_credit = 0.0
        self.edge: EdgeRuntime | None = None
        self.connect(edge)

    @property
    def now(self) -> float:
        return self.clock.now

    # -- session ------------------------------------------------------------------
    def connect(self, edge: EdgeRuntime) -> None:
        """Open a fresh session for ``edge`` (a new link, sequence numbers from zero)."""
        self.edge = edge
        edge.inference_cost = self.link.inference_cost
        self.up = Sequencer()
        self.down = Sequencer()
        self.throttle = Throttle(ThrottleConfig(self.link.bandwidth_mbit), self.clock)
        self.pull_outstanding = False
        self.pending_toggle: float | None = None
        self.last_request_at = -self.period
        self.next_request_at = self.now
        replies = self._up(Tag.HELLO, HelloPayload(PROTOCOL_VERSION, edge.actor.spec.spec_hash).pack())
        answer = HelloPayload.unpack(replies[0].payload)
        if answer.status != HelloStatus.OK:
            raise SessionRefused(answer.status)
        self.events.append(("connect", self.tick_index, self.cloud.trainer.experiences))

    def crash_edge(self) -> None:
        """The edge process dies: its unsent messages and any blob in flight are lost."""
        self.events.append(("crash", self.tick_index, self.cloud.trainer.experiences))
        self.edge.outbox.clear()
        self.edge = None

    # -- message paths --------------------------------------------------------------
    def _up(self, tag: Tag, payload: bytes = b"") -> list[WireMessage]:
        msg = decode(encode(self.up.message(tag, payload)))
        return [decode(encode(self.down.message(t, p))) for t, p in self.cloud.handle(msg)]

    def _service(self, budget: int | None) -> None:
        for tag, payload in self.cloud.service(budget):
            self.throttle.send(encode(self.down.message(tag, payload)))

    def pump(self, budget: int | None) -> None:
        """Flush the edge's upstream queue into the cloud, then let it train and publish."""
        outbox = self.edge.outbox
        while outbox:
            self._up(*outbox.popleft())
        self._service(budget)
        self.backlog_trace.append(self.cloud.backlog)

    # -- weight pull ----------------------------------------------------------------
    def _request(self) -> None:
        self.pull_outstanding = True
        self.last_request_at = self.now
        self._up(Tag.WEIGHTS_REQUEST)
        self._service(0)

    def _deliver(self, frame: bytes) -> None:
        msg = decode(frame)
        actor = self.edge.actor
        version = actor.load_inactive(msg.payload) if msg.tag == Tag.WEIGHTS else None
        done = self.now + self.link.apply_time
        if version is not None:
            if actor.blocks_inference:
                self.edge.blocked_until = max(self.edge.blocked_until, done)
            self.pending_toggle = done
        self.pull_outstanding = False
        self.next_request_at = max(done, self.last_request_at + self.period)

    def _toggle(self) -> None:
        self.pending_toggle = None
        self.edge.actor.toggle()
        self.applied.append((self.now, self.edge.actor.version))

    def advance_weights(self, until: float) -> None:
        """Run weight-path events up to and including time ``until``."""
        while True:
            due = []
            t = self.throttle.next_delivery()
            if t is not None:
                due.append((t, 0))
            if self.pending_toggle is not None:
                due.append((self.pending_toggle, 1))
            elif not self.pull_outstanding:
                due.append((max(self.next_request_at, self.now), 2))
            if not due:
                return
            t, kind = min(due)
            if t > until:
                return
            self.clock.advance_to(t)
            if kind == 0:
                for _, frame in self.throttle.poll():
                    self._deliver(frame)
            elif kind == 1:
                self._toggle()
            else:
                self._request()

    def _budget(self, ticks: int) -> int | None:
        """Train steps the modelled trainer can run in ``ticks`` control periods."""
        rate = self.link.train_steps_per_tick
        if rate is None:
            return None
        self._train_credit += rate * ticks
        budget = int(self._train_credit)
        self._train_credit -= budget
        return budget

    # -- control --------------------------------------------------------------------
    def tick(self) -> EpisodeOutcome | None:
        t = self.tick_index * self.period
        self.advance_weights(t)
        self.clock.advance_to(t)
        out = self.edge.control_tick(now=t)
        self.tick_index += 1
        self.pump(self._budget(1))
        return out

    def reset_plant(self) -> None:
        """Plant reset between episodes; the trainer uses the idle ticks to catch up."""
        before = self.edge.plant.ticks
        self.edge.reset_plant()
        idle = self.edge.plant.ticks - before
        self.tick_index += idle
        self.pump(self._budget(max(idle, 1)))
