"""Edge and cloud as separate processes talking over TCP on the real clock.

The cloud keeps its single event loop: socket reader threads only parse frames
into a queue. The edge runs the control loop on the calling thread; sending,
receiving and applying weights happen on background threads that share
nothing with a tick except the double-buffered actor and the outbox deque.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from pathlib import Path

from .cloud import CloudService
from .edge import EdgeRuntime, EpisodeOutcome
from .transport import (
    PROTOCOL_VERSION,
    EpisodeEvent,
    EpisodeEventPayload,
    FrameError,
    FrameReader,
    HelloPayload,
    HelloStatus,
    Sequencer,
    SessionRefused,
    Tag,
    ThrottleConfig,
    encode,
)

log = logging.getLogger(__name__)


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


class _PacedSender(threading.Thread):
    """Sends weight frames no faster than the configured bandwidth; a newer frame replaces an unsent one."""

    def __init__(self, conn: socket.socket, lock: threading.Lock, throttle: ThrottleConfig):
        super().__init__(daemon=True)
        self.conn = conn
        self.lock = lock
        self.throttle = throttle
        self._slot: bytes | None = None
        self._cv = threading.Condition()
        self.closed = False
        self.dropped = 0

    def offer(self, frame: bytes) -> None:
        with self._cv:
            if self._slot is not None:
                self.dropped += 1
            self._slot = frame
            self._cv.notify()

    def close(self) -> None:
        with self._cv:
            self.closed = True
            self._cv.notify()

    def run(self) -> None:
        while True:
            with self._cv:
                while self._slot is None and not self.closed:
                    self._cv.wait()
                if self.closed:
                    return
                frame, self._slot = self._slot, None
            start = time.monotonic()
            try:
                with self.lock:
                    self.conn.sendall(frame)
            except OSError:
                return
            remaining = self.throttle.delay(len(frame)) - (time.monotonic() - start)
            if remaining > 0:
                time.sleep(remaining)


class CloudServer:
    """Serves one edge session at a time; a new connection replaces the old one."""

    def __init__(
        self,
        cloud: CloudService,
        listen: tuple[str, int] = ("127.0.0.1", 0),
        throttle: ThrottleConfig | None = None,
        checkpoint_path: str | Path | None = None,
    ):
        self.cloud = cloud
        self.throttle = throttle or ThrottleConfig()
        self.checkpoint_path = checkpoint_path
        self.sock = socket.create_server(listen)
        self.address = self.sock.getsockname()[:2]
        self.inbox: queue.Queue = queue.Queue()
        self.stop = threading.Event()
        self.converged = threading.Event()
        self._session = 0
        self._conn: socket.socket | None = None
        self._lock = threading.Lock()
        self._sender: _PacedSender | None = None
        self._down = Sequencer()

    def _accept_loop(self) -> None:
        self.sock.settimeout(0.2)
        while not self.stop.is_set():
            try:
                conn, _ = self.sock.accept()
            except TimeoutError:
                continue
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._session += 1
            self.inbox.put((self._session, conn))
            threading.Thread(target=self._reader, args=(self._session, conn), daemon=True).start()

    def _reader(self, session: int, conn: socket.socket) -> None:
        reader = FrameReader()
        try:
            while True:
                data = conn.recv(65536)
                if not data:
                    break
                for msg in reader.feed(data):
                    self.inbox.put((session, msg))
        except (OSError, FrameError) as exc:
            log.warning("session %d closed: %s", session, exc)
        self.inbox.put((session, None))

    def _switch(self, session: int, conn: socket.socket) -> None:
        if self._sender is not None:
            self._sender.close()
        if self._conn is not None:
            self._conn.close()
        self._conn = conn
        self._down = Sequencer()
        self._sender = _PacedSender(conn, self._lock, self.throttle)
        self._sender.start()
        self._active = session

    def _send_now(self, tag: Tag, payload: bytes) -> None:
        try:
            with self._lock:
                self._conn.sendall(encode(self._down.message(tag, payload)))
        except OSError as exc:
            log.warning("send failed: %s", exc)

    def serve(self, duration: float | None = None) -> None:
        """Run the event loop until ``stop`` is set, ``duration`` passes, or the edge converges."""
        self._active = 0
        threading.Thread(target=self._accept_loop, daemon=True).start()
        deadline = None if duration is None else time.monotonic() + duration
        try:
            while not self.stop.is_set() and (deadline is None or time.monotonic() < deadline):
                self._drain_inbox(timeout=0.005 if self.cloud.backlog == 0 else 0.0)
                # while data is flowing train one step per pass, otherwise catch up fully
                budget = 1 if not self.inbox.empty() else None
                for tag, payload in self.cloud.service(budget):
                    if self._sender is not None:
                        self._sender.offer(encode(self._down.message(tag, payload)))
        finally:
            self.close()

    def _drain_inbox(self, timeout: float) -> None:
        try:
            item = self.inbox.get(timeout=timeout) if timeout > 0 else self.inbox.get_nowait()
        except queue.Empty:
            return
        while True:
            session, msg = item
            if isinstance(msg, socket.socket):
                self._switch(session, msg)
            elif msg is not None and session == self._active:
                for tag, payload in self.cloud.handle(msg):
                    self._send_now(tag, payload)
                if msg.tag == Tag.EPISODE_EVENT and EpisodeEventPayload.unpack(msg.payload).event == EpisodeEvent.CONVERGED:
                    self.converged.set()
                    self.stop.set()
            try:
                item = self.inbox.get_nowait()
            except queue.Empty:
                return

    def close(self) -> None:
        self.stop.set()
        if self._sender is not None:
            self._sender.close()
        if self._conn is not None:
            self._conn.close()
        self.sock.close()
        if self.checkpoint_path is not None:
            self.cloud.checkpoint(self.checkpoint_path)


class EdgeClient:
    """Connects an ``EdgeRuntime`` to a cloud and runs its control loop on the real clock.

    Upstream messages stay in the runtime's outbox while disconnected and are
    flushed after the next successful handshake.
    """

    def __init__(self, edge: EdgeRuntime, cloud_addr: tuple[str, int], sim_time: bool = False, request_timeout: float = 5.0):
        self.edge = edge
        self.addr = cloud_addr
        self.sim_time = sim_time
        self.request_timeout = request_timeout
        self.stop = threading.Event()
        self.connected = threading.Event()
        self._conn: socket.socket | None = None
        self._up = Sequencer()
        self._last_weights = 0.0
        self.reconnects = 0

    # -- connection management -------------------------------------------------------
    def _handshake(self) -> socket.socket:
        conn = socket.create_connection(self.addr, timeout=5.0)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._up = Sequencer()
        hello = HelloPayload(PROTOCOL_VERSION, self.edge.actor.spec.spec_hash)
        conn.sendall(encode(self._up.message(Tag.HELLO, hello.pack())))
        reader = FrameReader()
        while True:
            data = conn.recv(4096)
            if not data:
                raise ConnectionError("cloud closed the connection during the handshake")
            msgs = reader.feed(data)
            if msgs:
                break
        answer = HelloPayload.unpack(msgs[0].payload)
        if answer.status != HelloStatus.OK:
            conn.close()
            raise SessionRefused(answer.status)
        conn.settimeout(None)
        threading.Thread(target=self._receiver, args=(conn, reader), daemon=True).start()
        return conn

    def _sender(self) -> None:
        backoff = 0.1
        outbox = self.edge.outbox
        while not self.stop.is_set():
            if self._conn is None:
                try:
                    self._conn = self._handshake()
                except SessionRefused:
                    log.error("cloud refused the session")
                    self.stop.set()
                    return
                except OSError as exc:
                    log.info("cloud unreachable (%s), retrying in %.1fs", exc, backoff)
                    time.sleep(backoff)
                    backoff = min(backoff * 2, 2.0)
                    continue
                backoff = 0.1
                self.connected.set()
                self._request_weights()
            if not outbox:
                if time.monotonic() - self._last_weights > self.request_timeout:
                    self._request_weights()
                time.sleep(0.001)
                continue
            tag, payload = outbox[0]
            try:
                self._conn.sendall(encode(self._up.message(tag, payload)))
                outbox.popleft()
            except OSError:
                self._drop_connection()

    def _drop_connection(self) -> None:
        self.connected.clear()
        if self._conn is not None:
            self._conn.close()
        self._conn = None
        self.reconnects += 1

    def _request_weights(self) -> None:
        self._last_weights = time.monotonic()
        self.edge.outbox.append((Tag.WEIGHTS_REQUEST, b""))

    def _receiver(self, conn: socket.socket, reader: FrameReader) -> None:
        try:
            while not self.stop.is_set():
                data = conn.recv(262144)
                if not data:
                    break
                for msg in reader.feed(data):
                    if msg.tag == Tag.WEIGHTS:
                        # decode into the inactive slot, flip on completion, ask again
                        if self.edge.actor.load_inactive(msg.payload) is not None:
                            self.edge.actor.toggle()
                        self._request_weights()
        except (OSError, FrameError) as exc:
            log.warning("downstream closed: %s", exc)

    # -- control ------------------------------------------------------------------------
    def run(self, max_episodes: int | None = None, duration: float | None = None, until_converged: bool = True) -> list[EpisodeOutcome]:
        sender = threading.Thread(target=self._sender, daemon=True)
        sender.start()
        edge = self.edge
        period = edge.cfg.period
        start = time.monotonic()
        outcomes = []
        try:
            edge.reset_plant()
            while not self.stop.is_set():
                if max_episodes is not None and len(outcomes) >= max_episodes:
                    break
                if duration is not None and time.monotonic() - start >= duration:
                    break
                edge.start_episode()
                next_tick = time.monotonic()
                out = None
                while out is None:
                    if not self.sim_time:
                        delay = next_tick - time.monotonic()
                        if delay > 0:
                            time.sleep(delay)
                        next_tick += period
                    out = edge.control_tick()
                outcomes.append(out)
                if until_converged and edge.sup.converged:
                    break
                edge.reset_plant()
        finally:
            deadline = time.monotonic() + 2.0
            while edge.outbox and time.monotonic() < deadline and self.connected.is_set():
                time.sleep(0.01)
            self.stop.set()
            sender.join(timeout=2.0)
            if self._conn is not None:
                self._conn.close()
        return outcomes
