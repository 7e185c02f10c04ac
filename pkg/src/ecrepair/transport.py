"""Frame transports: in-process shaped channels and real stream sockets.

Both transports move :class:`~ecrepair.frames.SliceFrame` objects between
named nodes and demultiplex them per repair session.  The in-process
transport shapes traffic with token buckets on node egress, node ingress,
and individual directed links, which makes the bandwidth-throttled
experiments reproducible without touching OS traffic control.  The socket
transport carries the encoded wire format with CRC verification.
"""

from __future__ import annotations

import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from queue import Empty, Full, Queue
from typing import Callable, Mapping

from .frames import SliceFrame, read_frame
from .plans import Endpoint


class TransportError(RuntimeError):
    pass


class ReceiveTimeout(TransportError):
    pass


class PeerUnreachable(TransportError):
    pass


class Cancelled(TransportError):
    pass


_POLL = 0.05


class TokenBucket:
    """Debt-model token bucket: callers may overdraw and then sleep it off.

    Long-run throughput converges to ``rate`` bytes/second regardless of
    sleep jitter because refill is computed from the wall clock.  ``reserve``
    books the debt and returns how long the caller must wait, so one send
    charging several buckets (egress, ingress, link) sleeps only the worst
    deficit: the resources fill in parallel, as on a real network.
    """

    def __init__(self, rate: float, burst: float | None = None):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.burst = float(burst) if burst is not None else max(self.rate / 50, 65536.0)
        self._tokens = self.burst
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def reserve(self, amount: float) -> float:
        """Deduct now; return the seconds of debt the caller owes."""
        with self._lock:
            now = time.monotonic()
            self._tokens = min(self.burst, self._tokens + (now - self._stamp) * self.rate)
            self._stamp = now
            self._tokens -= amount
            deficit = -self._tokens
        return deficit / self.rate if deficit > 0 else 0.0

    def acquire(self, amount: float) -> None:
        wait = self.reserve(amount)
        if wait > 0:
            time.sleep(wait)


@dataclass(frozen=True)
class ShapingProfile:
    """Per-resource rates in bytes/second; absent entries are unshaped.

    ``default_egress``/``default_ingress`` apply to every node without an
    explicit entry; ``links`` shapes individual directed (src, dst) pairs on
    top of the port rates (the limited-edge-bandwidth scenario).
    """

    default_egress: float | None = None
    default_ingress: float | None = None
    egress: Mapping[str, float] = field(default_factory=dict)
    ingress: Mapping[str, float] = field(default_factory=dict)
    links: Mapping[tuple[str, str], float] = field(default_factory=dict)

    @classmethod
    def uniform(cls, rate: float, **kwargs) -> "ShapingProfile":
        return cls(default_egress=rate, default_ingress=rate, **kwargs)

    def egress_rate(self, node: str) -> float | None:
        return self.egress.get(node, self.default_egress)

    def ingress_rate(self, node: str) -> float | None:
        return self.ingress.get(node, self.default_ingress)

    def link_rate(self, src: str, dst: str) -> float | None:
        return self.links.get((src, dst))


class FrameReceiver:
    """Pops frames for one (node, session); queue items may be frame batches."""

    def __init__(self, queue: Queue, cancel: threading.Event | None = None):
        self._queue = queue
        self._cancel = cancel
        self._pending: deque = deque()

    def try_recv(self) -> SliceFrame | None:
        """Non-blocking receive; None when nothing is ready right now."""
        if self._pending:
            return self._pending.popleft()
        try:
            item = self._queue.get_nowait()
        except Empty:
            return None
        return self._unpack(item)

    def recv(self, timeout: float = 30.0) -> SliceFrame:
        if self._pending:
            return self._pending.popleft()
        deadline = time.monotonic() + timeout
        while True:
            if self._cancel is not None and self._cancel.is_set():
                raise Cancelled("session cancelled while receiving")
            try:
                item = self._queue.get(timeout=_POLL)
            except Empty:
                if time.monotonic() >= deadline:
                    raise ReceiveTimeout(f"no frame within {timeout:.1f}s") from None
                continue
            return self._unpack(item)

    def _unpack(self, item) -> SliceFrame:
        if isinstance(item, TransportError):
            raise item
        if isinstance(item, list):
            self._pending.extend(item)
            return self._pending.popleft()
        return item


class Transport:
    """Interface shared by the in-process and socket transports."""

    def sender(self, src: str, dst: Endpoint, session: bytes):
        raise NotImplementedError

    def receiver(self, node: str, session: bytes, cancel=None) -> FrameReceiver:
        raise NotImplementedError

    def cleanup(self, session: bytes) -> None:
        raise NotImplementedError


class _LocalSender:
    """Buffers a handful of small frames per delivery to amortise handoffs.

    Batching only changes in-process handoff granularity: shaping charges the
    batch's total bytes, the observer still sees every frame, and order is
    preserved.  A byte cap keeps large slices flowing one at a time so the
    batching never coarsens the pipelining granularity.  ``close()`` flushes
    the remainder.
    """

    MAX_BATCH_BYTES = 512 * 1024

    def __init__(
        self, transport: "LocalTransport", src: str, dst: str, session: bytes, batch: int
    ):
        self._transport = transport
        self.src = src
        self.dst = dst
        self.session = session
        self._batch = max(1, batch)
        self._buffer: list[SliceFrame] = []
        self._buffered_bytes = 0

    def send(self, frame: SliceFrame, cancel: threading.Event | None = None) -> None:
        self._buffer.append(frame)
        self._buffered_bytes += frame.payload.nbytes
        if len(self._buffer) >= self._batch or self._buffered_bytes >= self.MAX_BATCH_BYTES:
            self.flush(cancel)

    def flush(self, cancel: threading.Event | None = None) -> None:
        if not self._buffer:
            return
        batch, self._buffer = self._buffer, []
        self._buffered_bytes = 0
        self._transport._deliver(self.src, self.dst, batch, cancel)

    def close(self) -> None:
        self.flush(None)


class LocalTransport(Transport):
    """In-process transport with token-bucket shaping and bounded queues.

    Frames are handed over by reference (no serialization); ownership of the
    payload buffer moves with the frame.  An ``observer`` callback sees every
    frame in flight, which the tests use to check the hop-sum invariant and
    per-link byte counts.
    """

    def __init__(
        self,
        shaping: ShapingProfile | None = None,
        *,
        window: int = 64,
        batch: int = 16,
        observer: Callable[[str, str, SliceFrame], None] | None = None,
    ):
        self._shaping = shaping or ShapingProfile()
        self._batch = min(max(1, batch), window)
        self._window = max(1, window // self._batch)  # queue depth in batches
        self._observer = observer
        self._queues: dict[tuple[str, bytes], Queue] = {}
        self._egress: dict[str, TokenBucket] = {}
        self._ingress: dict[str, TokenBucket] = {}
        self._links: dict[tuple[str, str], TokenBucket] = {}
        self._down: set[str] = set()
        self._lock = threading.Lock()

    def sender(self, src: str, dst: Endpoint, session: bytes) -> _LocalSender:
        return _LocalSender(self, src, dst.node, session, self._batch)

    def receiver(self, node: str, session: bytes, cancel=None) -> FrameReceiver:
        return FrameReceiver(self._queue_for(node, session), cancel)

    def cleanup(self, session: bytes) -> None:
        with self._lock:
            for key in [k for k in self._queues if k[1] == session]:
                del self._queues[key]

    def disconnect(self, node: str) -> None:
        """Drop a node: sends to it fail, pending receivers get the error."""
        with self._lock:
            self._down.add(node)
            queues = [q for (n, _), q in self._queues.items() if n == node]
        for q in queues:
            try:
                q.put_nowait(PeerUnreachable(f"node {node} is down"))
            except Full:
                pass

    def _queue_for(self, node: str, session: bytes) -> Queue:
        key = (node, session)
        with self._lock:
            queue = self._queues.get(key)
            if queue is None:
                queue = self._queues[key] = Queue(maxsize=self._window)
            return queue

    def _bucket(self, table: dict, key, rate: float | None) -> TokenBucket | None:
        if rate is None:
            return None
        bucket = table.get(key)
        if bucket is None:
            with self._lock:
                bucket = table.setdefault(key, TokenBucket(rate))
        return bucket

    def _deliver(self, src: str, dst: str, batch: list[SliceFrame], cancel) -> None:
        if dst in self._down or src in self._down:
            raise PeerUnreachable(f"link {src}->{dst} is down")
        size = sum(frame.payload.nbytes for frame in batch)
        wait = 0.0
        for bucket in (
            self._bucket(self._egress, src, self._shaping.egress_rate(src)),
            self._bucket(self._ingress, dst, self._shaping.ingress_rate(dst)),
            self._bucket(self._links, (src, dst), self._shaping.link_rate(src, dst)),
        ):
            if bucket is not None:
                wait = max(wait, bucket.reserve(size))
        if wait > 0:
            time.sleep(wait)
        if self._observer is not None:
            for frame in batch:
                self._observer(src, dst, frame)
        queue = self._queue_for(dst, batch[0].session)
        while True:
            if cancel is not None and cancel.is_set():
                raise Cancelled("session cancelled while sending")
            if dst in self._down:
                raise PeerUnreachable(f"node {dst} went down mid-session")
            try:
                queue.put(batch, timeout=_POLL)
                return
            except Full:
                continue


class _SocketSender:
    def __init__(self, sock: socket.socket, flush_every: int = 8):
        self._sock = sock
        self._file = sock.makefile("wb", buffering=256 * 1024)
        self._flush_every = flush_every
        self._unflushed = 0

    def send(self, frame: SliceFrame, cancel=None) -> None:
        try:
            self._file.write(frame.encode())
            self._unflushed += 1
            if self._unflushed >= self._flush_every:
                self._file.flush()
                self._unflushed = 0
        except OSError as exc:
            raise PeerUnreachable(f"peer closed the data stream: {exc}") from exc

    def flush(self, cancel=None) -> None:
        try:
            self._file.flush()
            self._unflushed = 0
        except OSError as exc:
            raise PeerUnreachable(f"peer closed the data stream: {exc}") from exc

    def close(self) -> None:
        try:
            self._file.flush()
            self._sock.close()
        except OSError:
            pass


class SocketTransport(Transport):
    """Framed streaming over TCP with one data listener per daemon.

    The address book maps node ids to (host, port); requestor endpoints may
    instead carry an explicit host/port.  Inbound connections are demuxed by
    the session id carried in every frame.
    """

    def __init__(
        self,
        node: str,
        addresses: Mapping[str, tuple[str, int]] | None = None,
        listen: tuple[str, int] | None = ("127.0.0.1", 0),
        *,
        window: int = 64,
        connect_timeout: float = 5.0,
    ):
        self.node = node
        self._addresses = dict(addresses or {})
        self._window = window
        self._connect_timeout = connect_timeout
        self._queues: dict[bytes, Queue] = {}
        self._lock = threading.Lock()
        self._server: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._closing = threading.Event()
        if listen is not None:
            self._server = socket.create_server(listen, backlog=64)
            self._accept_thread = threading.Thread(
                target=self._accept_loop, name=f"data-accept-{node}", daemon=True
            )
            self._accept_thread.start()

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            raise TransportError("transport has no data listener")
        host, port = self._server.getsockname()[:2]
        return host, port

    def add_address(self, node: str, host: str, port: int) -> None:
        with self._lock:
            self._addresses[node] = (host, port)

    def sender(self, src: str, dst: Endpoint, session: bytes) -> _SocketSender:
        if dst.host is not None and dst.port is not None:
            target = (dst.host, dst.port)
        else:
            target = self._addresses.get(dst.node)
            if target is None:
                raise PeerUnreachable(f"no address for node {dst.node}")
        try:
            sock = socket.create_connection(target, timeout=self._connect_timeout)
        except OSError as exc:
            raise PeerUnreachable(f"cannot reach {dst.node} at {target}: {exc}") from exc
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return _SocketSender(sock)

    def receiver(self, node: str, session: bytes, cancel=None) -> FrameReceiver:
        if node != self.node:
            raise TransportError(f"this transport receives for {self.node}, not {node}")
        return FrameReceiver(self._queue_for(session), cancel)

    def cleanup(self, session: bytes) -> None:
        with self._lock:
            self._queues.pop(session, None)

    def close(self) -> None:
        self._closing.set()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass

    def _queue_for(self, session: bytes) -> Queue:
        with self._lock:
            queue = self._queues.get(session)
            if queue is None:
                queue = self._queues[session] = Queue(maxsize=self._window)
            return queue

    def _accept_loop(self) -> None:
        assert self._server is not None
        while not self._closing.is_set():
            try:
                conn, _addr = self._server.accept()
            except OSError:
                return
            threading.Thread(
                target=self._read_loop, args=(conn,), name=f"data-read-{self.node}", daemon=True
            ).start()

    def _read_loop(self, conn: socket.socket) -> None:
        stream = conn.makefile("rb", buffering=256 * 1024)
        session: bytes | None = None
        try:
            while True:
                frame = read_frame(stream)
                if frame is None:
                    return
                session = frame.session
                self._queue_for(session).put(frame)
        except ValueError as exc:
            # Corrupt or truncated frame: surface the failure to whichever
            # session this stream was feeding instead of timing it out.
            if session is not None:
                try:
                    self._queue_for(session).put_nowait(
                        TransportError(f"corrupt data stream: {exc}")
                    )
                except Full:
                    pass
        except OSError:
            return
        finally:
            try:
                conn.close()
            except OSError:
                pass
