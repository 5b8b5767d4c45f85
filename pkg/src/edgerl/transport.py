"""Edge <-> cloud wire protocol.

Frame layout (little-endian)::

    u32 payload length | u8 tag | u64 sequence | payload | u32 CRC32(all preceding bytes)

Upstream the edge sends HELLO, STATE_ACTION, EPISODE_EVENT, WEIGHTS_REQUEST
and HEARTBEAT frames; downstream the cloud answers HELLO and sends WEIGHTS.
Only WEIGHTS frames are subject to the bandwidth throttle.
"""

from __future__ import annotations

import enum
import math
import struct
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mdp import OBS_DIM

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024

_HEAD = struct.Struct("<IBQ")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEAD.size  # 13
FRAME_OVERHEAD = HEADER_SIZE + _CRC.size  # 17


class FrameError(ValueError):
    """Rejected frame: CRC mismatch, unknown tag, bad length or malformed payload."""


class Tag(enum.IntEnum):
    STATE_ACTION = 1
    EPISODE_EVENT = 2
    WEIGHTS_REQUEST = 3
    WEIGHTS = 4
    HELLO = 5
    HEARTBEAT = 6


@dataclass(frozen=True)
class WireMessage:
    tag: Tag
    seq: int
    payload: bytes = b""


def encode(msg: WireMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD}")
    if not 0 <= msg.seq < 2**64:
        raise FrameError("sequence number out of u64 range")
    body = _HEAD.pack(len(msg.payload), int(msg.tag), msg.seq) + msg.payload
    return body + _CRC.pack(zlib.crc32(body))


def frame_size(payload_len: int) -> int:
    return FRAME_OVERHEAD + payload_len


def decode(frame: bytes) -> WireMessage:
    """Decode exactly one frame."""
    if len(frame) < FRAME_OVERHEAD:
        raise FrameError("frame shorter than header + CRC")
    length, tag, seq = _HEAD.unpack_from(frame)
    if length > MAX_PAYLOAD:
        raise FrameError(f"declared payload length {length} too large")
    if len(frame) != FRAME_OVERHEAD + length:
        raise FrameError(f"frame is {len(frame)} bytes, header declares {FRAME_OVERHEAD + length}")
    (crc,) = _CRC.unpack_from(frame, HEADER_SIZE + length)
    if zlib.crc32(memoryview(frame)[: HEADER_SIZE + length]) != crc:
        raise FrameError("CRC mismatch")
    try:
        tag = Tag(tag)
    except ValueError:
        raise FrameError(f"unknown tag {tag}") from None
    return WireMessage(tag, seq, bytes(frame[HEADER_SIZE : HEADER_SIZE + length]))


class FrameReader:
    """Reassembles frames from a byte stream split at arbitrary boundaries."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER_SIZE:
            (length,) = struct.unpack_from("<I", self._buf)
            if length > MAX_PAYLOAD:
                raise FrameError(f"declared payload length {length} too large")
            total = FRAME_OVERHEAD + length
            if len(self._buf) < total:
                break
            out.append(decode(bytes(self._buf[:total])))
            del self._buf[:total]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


class Sequencer:
    """Per-direction strictly increasing sequence numbers."""

    def __init__(self, start: int = 0):
        self.next = start

    def message(self, tag: Tag, payload: bytes = b"") -> WireMessage:
        msg = WireMessage(tag, self.next, payload)
        self.next += 1
        return msg


# -- payloads -------------------------------------------------------------------

_STATE_ACTION = struct.Struct(f"<II{OBS_DIM}ff4fBI")
STATE_ACTION_SIZE = _STATE_ACTION.size  # 73


@dataclass(frozen=True)
class StateActionPayload:
    episode: int
    step: int
    obs: tuple[float, ...]
    action: float
    state: tuple[float, float, float, float]
    terminal: bool
    on_target: int

    def pack(self) -> bytes:
        if len(self.obs) != OBS_DIM or len(self.state) != 4:
            raise FrameError("state-action payload has wrong vector sizes")
        if not all(math.isfinite(v) for v in (*self.obs, *self.state, self.action)):
            raise FrameError("state-action payload contains non-finite values")
        return _STATE_ACTION.pack(self.episode, self.step, *self.obs, self.action, *self.state, int(self.terminal), self.on_target)

    @classmethod
    def unpack(cls, data: bytes) -> "StateActionPayload":
        if len(data) != STATE_ACTION_SIZE:
            raise FrameError(f"state-action payload is {len(data)} bytes, expected {STATE_ACTION_SIZE}")
        v = _STATE_ACTION.unpack(data)
        obs = v[2 : 2 + OBS_DIM]
        state = v[3 + OBS_DIM : 7 + OBS_DIM]
        if not all(math.isfinite(x) for x in (*obs, *state, v[2 + OBS_DIM])):
            raise FrameError("state-action payload contains non-finite values")
        return cls(v[0], v[1], obs, v[2 + OBS_DIM], state, bool(v[7 + OBS_DIM]), v[8 + OBS_DIM])

    def obs_array(self) -> np.ndarray:
        return np.array(self.obs, dtype=np.float32)


class EpisodeEvent(enum.IntEnum):
    RESET_BEGIN = 1
    RESET_END = 2
    EVAL_BEGIN = 3
    EVAL_END = 4
    CONVERGED = 5
    TRAIN_BEGIN = 6
    TRAIN_END = 7


_EPISODE_EVENT = struct.Struct("<BIQ")


@dataclass(frozen=True)
class EpisodeEventPayload:
    event: EpisodeEvent
    episode: int
    cumulative_steps: int

    def pack(self) -> bytes:
        return _EPISODE_EVENT.pack(int(self.event), self.episode, self.cumulative_steps)

    @classmethod
    def unpack(cls, data: bytes) -> "EpisodeEventPayload":
        if len(data) != _EPISODE_EVENT.size:
            raise FrameError("bad episode-event payload size")
        ev, episode, steps = _EPISODE_EVENT.unpack(data)
        try:
            ev = EpisodeEvent(ev)
        except ValueError:
            raise FrameError(f"unknown episode event {ev}") from None
        return cls(ev, episode, steps)


class HelloStatus(enum.IntEnum):
    OK = 0
    PROTOCOL_MISMATCH = 1
    SPEC_MISMATCH = 2


_HELLO = struct.Struct("<HQB")


@dataclass(frozen=True)
class HelloPayload:
    protocol_version: int
    actor_spec_hash: int
    status: HelloStatus = HelloStatus.OK

    def pack(self) -> bytes:
        return _HELLO.pack(self.protocol_version, self.actor_spec_hash, int(self.status))

    @classmethod
    def unpack(cls, data: bytes) -> "HelloPayload":
        if len(data) != _HELLO.size:
            raise FrameError("bad hello payload size")
        version, spec_hash, status = _HELLO.unpack(data)
        return cls(version, spec_hash, HelloStatus(status))


class SessionRefused(ConnectionError):
    def __init__(self, status: HelloStatus):
        super().__init__(f"session refused: {status.name}")
        self.status = status


def answer_hello(request: HelloPayload, actor_spec_hash: int) -> HelloPayload:
    """Cloud-side handshake decision."""
    if request.protocol_version != PROTOCOL_VERSION:
        status = HelloStatus.PROTOCOL_MISMATCH
    elif request.actor_spec_hash != actor_spec_hash:
        status = HelloStatus.SPEC_MISMATCH
    else:
        status = HelloStatus.OK
    return HelloPayload(PROTOCOL_VERSION, actor_spec_hash, status)


# -- bandwidth throttle ------------------------------------------------------------


@dataclass(frozen=True)
class ThrottleConfig:
    bandwidth_mbit: float | None = None  # None = unlimited

    def __post_init__(self):
        if self.bandwidth_mbit is not None and not self.bandwidth_mbit > 0:
            raise ValueError("bandwidth must be positive when set")

    def delay(self, n_bytes: int) -> float:
        """Seconds needed to push ``n_bytes`` through the link."""
        if self.bandwidth_mbit is None:
            return 0.0
        return 8.0 * n_bytes / (self.bandwidth_mbit * 1e6)


def update_interval_steps(n_bytes: int, cfg: ThrottleConfig, rate_hz: float = 30.0) -> int:
    """Whole control steps that complete while one weight frame is in flight (at least one)."""
    return max(1, math.floor(cfg.delay(n_bytes) * rate_hz + 1e-9))


class SimClock:
    def __init__(self, start: float = 0.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance_to(self, t: float) -> None:
        if t < self.now:
            raise ValueError("simulated clock cannot run backwards")
        self.now = t


class Throttle:
    """Serializes weight frames over a rate-limited link.

    One frame is on the wire at a time; a frame waiting behind it is replaced
    when a newer one is sent (stale weights are never delivered). ``clock``
    is any zero-argument callable returning seconds.
    """

    def __init__(self, cfg: ThrottleConfig, clock: Callable[[], float]):
        self.cfg = cfg
        self.clock = clock
        self._wire: tuple[float, bytes] | None = None  # (delivery time, frame)
        self._queued: bytes | None = None
        self.dropped = 0
        self.delivered: list[tuple[float, float, int]] = []  # (sent, delivered, size)
        self._sent_at = 0.0

    def send(self, frame: bytes) -> float | None:
        """Queue a frame; returns its delivery time if it went straight onto the wire."""
        now = self.clock()
        self._advance(now)
        if self._wire is None:
            self._start(frame, now)
            return self._wire[0]
        if self._queued is not None:
            self.dropped += 1
        self._queued = frame
        return None

    def _start(self, frame: bytes, at: float) -> None:
        self._sent_at = at
        self._wire = (at + self.cfg.delay(len(frame)), frame)

    def _advance(self, now: float) -> list[tuple[float, bytes]]:
        done = []
        while self._wire is not None and self._wire[0] <= now:
            t, frame = self._wire
            done.append((t, frame))
            self.delivered.append((self._sent_at, t, len(frame)))
            self._wire = None
            if self._queued is not None:
                frame, self._queued = self._queued, None
                self._start(frame, t)
        return done

    def poll(self) -> list[tuple[float, bytes]]:
        """Frames whose delivery completed by now, with their completion times."""
        return self._advance(self.clock())

    def next_delivery(self) -> float | None:
        return self._wire[0] if self._wire is not None else None

    @property
    def busy(self) -> bool:
        return self._wire is not None
