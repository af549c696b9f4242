"""Schedulers and transports.

The simulation transport is a deterministic in-process message bus driven by
a virtual-time event loop: same seed, same event order, bit for bit.  The
TCP transport moves the identical frames over real sockets with
length-prefixed framing and a wall-clock scheduler.

Frame layout (both transports): [4-byte big-endian length][1-byte type][body]
with type 0x01 = mixnet packet (body is exactly L_PKT bytes) and type 0x02 =
heartbeat (body is the 8-byte sender id).
"""

from __future__ import annotations

import heapq
import itertools
import queue
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable

from .observe import Observer
from .onion import L_PKT, NODE_ID_SIZE

FRAME_PACKET = 0x01
FRAME_HEARTBEAT = 0x02

FrameHandler = Callable[[bytes, int, bytes, int], None]  # (src, ftype, body, trace)


class Cancelled:
    __slots__ = ("flag",)

    def __init__(self):
        self.flag = False

    def cancel(self):
        self.flag = True


class SimScheduler:
    """Virtual-time event loop; ties broken by insertion order."""

    def __init__(self, start: float = 0.0):
        self.now = start
        self._heap: list = []
        self._seq = itertools.count()
        self._commands: "queue.Queue[Callable[[], None]]" = queue.Queue()
        self.pace = 0.0  # 0 = free-running; 1.0 = hold sim time to wall time
        self._wall_anchor: float | None = None

    def call_at(self, t: float, fn: Callable[[], None]) -> Cancelled:
        handle = Cancelled()
        heapq.heappush(self._heap, (max(t, self.now), next(self._seq), fn, handle))
        return handle

    def call_later(self, dt: float, fn: Callable[[], None]) -> Cancelled:
        return self.call_at(self.now + dt, fn)

    def post(self, fn: Callable[[], None]) -> None:
        """Thread-safe: run fn between events (manager control path)."""
        self._commands.put(fn)

    def _drain_commands(self) -> None:
        while True:
            try:
                fn = self._commands.get_nowait()
            except queue.Empty:
                return
            fn()

    def run_until(self, t_end: float, idle_ok: bool = True) -> None:
        if self.pace > 0 and self._wall_anchor is None:
            self._wall_anchor = time.monotonic() - self.now / self.pace
        while self._heap:
            t, _, fn, handle = self._heap[0]
            if t > t_end:
                break
            heapq.heappop(self._heap)
            if handle.flag:
                continue
            if self.pace > 0:
                lag = (self._wall_anchor + t / self.pace) - time.monotonic()
                if lag > 0:
                    time.sleep(lag)
                self._drain_commands()
            self.now = t
            fn()
        self._drain_commands()
        self.now = max(self.now, t_end)

    def run_while(self, cond: Callable[[], bool], t_max: float) -> None:
        if self.pace > 0 and self._wall_anchor is None:
            self._wall_anchor = time.monotonic() - self.now / self.pace
        while self._heap and cond() and self.now <= t_max:
            t, _, fn, handle = heapq.heappop(self._heap)
            if handle.flag:
                continue
            if self.pace > 0:
                lag = (self._wall_anchor + t / self.pace) - time.monotonic()
                if lag > 0:
                    time.sleep(lag)
                self._drain_commands()
            self.now = t
            fn()


class RealScheduler:
    """Wall-clock scheduler backed by one worker thread."""

    def __init__(self):
        self._t0 = time.monotonic()
        self._heap: list = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._stop = False
        self._thread: threading.Thread | None = None

    @property
    def now(self) -> float:
        return time.monotonic() - self._t0

    def call_at(self, t: float, fn: Callable[[], None]) -> Cancelled:
        handle = Cancelled()
        with self._cv:
            heapq.heappush(self._heap, (t, next(self._seq), fn, handle))
            self._cv.notify()
        return handle

    def call_later(self, dt: float, fn: Callable[[], None]) -> Cancelled:
        return self.call_at(self.now + dt, fn)

    def post(self, fn: Callable[[], None]) -> None:
        self.call_at(self.now, fn)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify()
        if self._thread:
            self._thread.join(timeout=5)

    def _loop(self) -> None:
        while True:
            with self._cv:
                if self._stop:
                    return
                if not self._heap:
                    self._cv.wait(timeout=0.2)
                    continue
                t, _, fn, handle = self._heap[0]
                delay = t - self.now
                if delay > 0:
                    self._cv.wait(timeout=min(delay, 0.2))
                    continue
                heapq.heappop(self._heap)
            if not handle.flag:
                try:
                    fn()
                except Exception:  # a node error must not kill the clock
                    pass


class SimTransport:
    """In-process message bus keyed by node id, constant seeded latency,
    optional seeded loss, observer tee."""

    def __init__(
        self,
        scheduler: SimScheduler,
        rng: random.Random,
        latency_s: float = 0.005,
        loss_rate: float = 0.0,
        observer: Observer | None = None,
    ):
        self.scheduler = scheduler
        self.rng = rng
        self.latency_s = latency_s
        self.loss_rate = loss_rate
        self.observer = observer
        self._handlers: dict[bytes, FrameHandler] = {}
        self._alive: set[bytes] = set()

    def register(self, node_id: bytes, handler: FrameHandler) -> None:
        self._handlers[node_id] = handler
        self._alive.add(node_id)

    def kill(self, node_id: bytes) -> None:
        self._alive.discard(node_id)

    def address_of(self, node_id: bytes) -> str:
        return node_id.hex()

    def send(self, src: bytes, dst: bytes, ftype: int, body: bytes, trace: int = -1) -> None:
        if src not in self._alive:
            return
        if ftype == FRAME_PACKET:
            if self.observer is not None:
                self.observer.record_link(self.scheduler.now, src, dst, body, trace)
            if self.loss_rate > 0 and self.rng.random() < self.loss_rate:
                return
        elif self.observer is not None:
            self.observer.record_heartbeat()
        handler = self._handlers.get(dst)
        if handler is None:
            return

        def deliver():
            if dst in self._alive:
                handler(src, ftype, body, trace)

        self.scheduler.call_later(self.latency_s, deliver)


def encode_frame(ftype: int, body: bytes) -> bytes:
    return struct.pack(">I", 1 + len(body)) + bytes([ftype]) + body


class TcpTransport:
    """Real sockets on 127.0.0.1; one listener per node, lazy outbound
    connections, frames as documented above."""

    def __init__(self, scheduler: RealScheduler, observer: Observer | None = None):
        self.scheduler = scheduler
        self.observer = observer
        self._directory: dict[bytes, tuple[str, int]] = {}
        self._handlers: dict[bytes, FrameHandler] = {}
        self._servers: dict[bytes, socket.socket] = {}
        self._conns: dict[tuple[bytes, bytes], socket.socket] = {}
        self._lock = threading.Lock()
        self._alive: set[bytes] = set()
        self._threads: list[threading.Thread] = []
        self._stopping = False

    def register(self, node_id: bytes, handler: FrameHandler) -> None:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind(("127.0.0.1", 0))
        srv.listen(64)
        self._directory[node_id] = srv.getsockname()
        self._handlers[node_id] = handler
        self._servers[node_id] = srv
        self._alive.add(node_id)
        th = threading.Thread(target=self._accept_loop, args=(node_id, srv), daemon=True)
        th.start()
        self._threads.append(th)

    def address_of(self, node_id: bytes) -> str:
        host, port = self._directory[node_id]
        return f"{host}:{port}"

    def learn_address(self, node_id: bytes, address: str) -> None:
        host, port = address.rsplit(":", 1)
        self._directory[node_id] = (host, int(port))

    def kill(self, node_id: bytes) -> None:
        self._alive.discard(node_id)
        srv = self._servers.pop(node_id, None)
        if srv:
            srv.close()
        with self._lock:
            for key in [k for k in self._conns if node_id in k]:
                try:
                    self._conns.pop(key).close()
                except OSError:
                    pass

    def close(self) -> None:
        self._stopping = True
        for nid in list(self._servers):
            self.kill(nid)

    def _accept_loop(self, node_id: bytes, srv: socket.socket) -> None:
        while not self._stopping:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            th = threading.Thread(
                target=self._read_loop, args=(node_id, conn), daemon=True
            )
            th.start()
            self._threads.append(th)

    def _read_loop(self, node_id: bytes, conn: socket.socket) -> None:
        buf = b""
        while not self._stopping:
            try:
                chunk = conn.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            while len(buf) >= 4:
                (n,) = struct.unpack(">I", buf[:4])
                if len(buf) < 4 + n:
                    break
                frame, buf = buf[4 : 4 + n], buf[4 + n :]
                ftype, body = frame[0], frame[1:]
                # packets need no source: peeling is self-contained, and the
                # wire body stays exactly L_PKT for every packet kind
                src = body[:NODE_ID_SIZE] if ftype == FRAME_HEARTBEAT else b""
                handler = self._handlers.get(node_id)
                if handler is not None and node_id in self._alive:
                    self.scheduler.post(
                        lambda h=handler, s=src, t=ftype, p=body: h(s, t, p, -1)
                    )

    def _connection(self, src: bytes, dst: bytes) -> socket.socket:
        key = (src, dst)
        with self._lock:
            sock = self._conns.get(key)
            if sock is None:
                sock = socket.create_connection(self._directory[dst], timeout=2)
                self._conns[key] = sock
            return sock

    def send(self, src: bytes, dst: bytes, ftype: int, body: bytes, trace: int = -1) -> None:
        if src not in self._alive or dst not in self._directory:
            return
        if ftype == FRAME_PACKET and self.observer is not None:
            self.observer.record_link(self.scheduler.now, src, dst, body, trace)
        wire = encode_frame(ftype, body)
        try:
            self._connection(src, dst).sendall(wire)
        except OSError:
            with self._lock:
                self._conns.pop((src, dst), None)
