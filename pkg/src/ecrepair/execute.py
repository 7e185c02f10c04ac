"""Execute repair plans: per-node hop logic and requestor assembly.

Each helper runs its hop as two concurrently progressing stages joined by a
bounded queue: an upstream stage (receive the partial slice, read the local
slice) and a downstream stage (combine, send).  Stages for different slice
indices therefore overlap, and the in-flight window bounds per-session
buffering to a small multiple of ``window * slice_size`` bytes (stage queue
plus transport queue plus send buffers).

Slices move through the stage queue in small batches to keep per-frame
overhead low; a hop flushes its outgoing buffers whenever it is about to
block, so batching never stalls a dependent hop.

The same functions drive both the in-process transport (tests, benches) and
the helper daemons over sockets.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager, nullcontext
from queue import Empty, Full, Queue
from typing import Mapping, Protocol

import numpy as np

from .frames import SliceFrame
from .kernels import as_byte_array, matrix_apply, mul_into, xor_mul_into
from .plans import CONVENTIONAL, PPR, RP_BASIC, RP_CYCLIC, RP_MULTI, Endpoint, RepairPlan
from .transport import Cancelled, Transport

DEFAULT_WINDOW = 64
_POLL = 0.05


class RepairAborted(RuntimeError):
    """A session failed; carries the hop where progress stopped."""

    def __init__(self, message: str, *, node: str | None = None, position: int | None = None):
        super().__init__(message)
        self.node = node
        self.position = position


class BlockReader(Protocol):
    def read_slice(self, block_id: str, index: int, slice_size: int) -> np.ndarray: ...


class MemoryBlockReader:
    """Blocks held in memory; read_slice returns zero-copy views."""

    def __init__(self, blocks: Mapping[str, np.ndarray] | None = None):
        self._blocks = {k: as_byte_array(v) for k, v in (blocks or {}).items()}

    def put(self, block_id: str, data) -> None:
        self._blocks[block_id] = as_byte_array(data)

    def read_slice(self, block_id: str, index: int, slice_size: int) -> np.ndarray:
        block = self._blocks.get(block_id)
        if block is None:
            raise KeyError(f"block {block_id} not present")
        offset = index * slice_size
        if offset + slice_size > block.shape[0]:
            raise ValueError(f"slice {index} beyond end of block {block_id}")
        return block[offset : offset + slice_size]


class StageTrace:
    """Collects (node, stage, slice_index, start, end) tuples when enabled."""

    def __init__(self):
        self.events: list[tuple[str, str, int, float, float]] = []

    @contextmanager
    def span(self, node: str, stage: str, index: int):
        start = time.monotonic()
        yield
        self.events.append((node, stage, index, start, time.monotonic()))

    def spans(self, node: str, stage: str) -> list[tuple[int, float, float]]:
        return [(i, s, e) for n, st, i, s, e in self.events if n == node and st == stage]


_NULL = nullcontext()


def _timed(trace: StageTrace | None, node: str, stage: str, index: int):
    return _NULL if trace is None else trace.span(node, stage, index)


def _writable_payload(frame: SliceFrame) -> np.ndarray:
    return as_byte_array(frame.payload, writable=True)


def _stage_batch(per_block: int, window: int, slice_size: int) -> int:
    """Frames per stage-queue handoff: amortise overhead, keep overlap.

    Capped in bytes so large slices stream one at a time; batching must not
    coarsen the pipelining granularity the slice size defines.
    """
    by_bytes = max(1, 512 * 1024 // slice_size)
    return max(1, min(16, window // 2, per_block // 4 or 1, by_bytes))


def _queue_put(queue: Queue, item, cancel: threading.Event) -> None:
    while True:
        if cancel.is_set():
            raise Cancelled("session cancelled")
        try:
            queue.put(item, timeout=_POLL)
            return
        except Full:
            continue


def _queue_get(queue: Queue, cancel: threading.Event, timeout: float, senders=()) -> list:
    """Pop the next stage batch, flushing our senders before blocking."""
    try:
        item = queue.get_nowait()
    except Empty:
        for sender in senders:
            sender.flush(cancel)
        deadline = time.monotonic() + timeout
        while True:
            if cancel.is_set():
                raise Cancelled("session cancelled")
            try:
                item = queue.get(timeout=_POLL)
                break
            except Empty:
                if time.monotonic() >= deadline:
                    raise RepairAborted("stage queue starved") from None
                continue
    if isinstance(item, BaseException):
        raise item
    return item


# -- helper hop ---------------------------------------------------------------


def run_helper(
    plan: RepairPlan,
    position: int,
    transport: Transport,
    reader: BlockReader,
    *,
    window: int = DEFAULT_WINDOW,
    recv_timeout: float = 30.0,
    cancel: threading.Event | None = None,
    trace: StageTrace | None = None,
) -> None:
    """Run this node's part of the plan; raises RepairAborted on failure."""
    cancel = cancel or threading.Event()
    node = plan.helpers[position].node
    runner = {
        RP_BASIC: _run_path_hop,
        RP_MULTI: _run_path_hop,
        RP_CYCLIC: _run_cyclic_hop,
        CONVENTIONAL: _run_conventional_source,
        PPR: _run_ppr_node,
    }[plan.scheme]
    try:
        runner(plan, position, transport, reader, window, recv_timeout, cancel, trace)
    except (RepairAborted, Cancelled):
        raise
    except Exception as exc:
        raise RepairAborted(
            f"hop {position} on {node} failed: {exc}", node=node, position=position
        ) from exc


def _feed_stage(plan, position, rx, reader, expect, queue, batch, cancel, recv_timeout, trace):
    """Upstream stage: receive partial frames and read local slices.

    ``expect`` yields (slice_index, frames_expected) in schedule order; items
    are forwarded to the combine stage in batches.
    """
    node = plan.helpers[position].node
    block_id = plan.helpers[position].block_id
    slice_size = plan.slices.slice_size
    read_slice = reader.read_slice
    pending: list = []
    try:
        for index, inbound in expect:
            frames = []
            for _ in range(inbound):
                frame = rx.try_recv()
                if frame is None:
                    # About to block: hand what we have to the combine stage
                    # so downstream hops keep moving (ring schedules depend
                    # on it), then wait.
                    if pending:
                        _queue_put(queue, pending, cancel)
                        pending = []
                    with _timed(trace, node, "receive", index):
                        frame = rx.recv(timeout=recv_timeout)
                frames.append(frame)
            with _timed(trace, node, "read", index):
                local = read_slice(block_id, index, slice_size)
            pending.append((index, frames, local))
            if len(pending) >= batch:
                _queue_put(queue, pending, cancel)
                pending = []
        if pending:
            _queue_put(queue, pending, cancel)
    except BaseException as exc:  # propagate to the combine stage
        try:
            queue.put_nowait(exc)
        except Full:
            cancel.set()


def _spawn_feeder(plan, position, rx, reader, expect, queue, batch, cancel, recv_timeout, trace):
    thread = threading.Thread(
        target=_feed_stage,
        args=(plan, position, rx, reader, expect, queue, batch, cancel, recv_timeout, trace),
        name=f"feed-{plan.helpers[position].node}",
        daemon=True,
    )
    thread.start()
    return thread


def _run_path_hop(plan, position, transport, reader, window, recv_timeout, cancel, trace):
    """rp-basic and rp-multi: fixed predecessor/successor along the path."""
    node = plan.helpers[position].node
    count = plan.slices.per_block
    slice_size = plan.slices.slice_size
    fails = plan.fail_count if plan.scheme == RP_MULTI else 1
    last = position == plan.k - 1
    first = position == 0
    session = plan.session
    rx = transport.receiver(node, session, cancel) if not first else None
    if last:
        senders = [transport.sender(node, ep, session) for ep in plan.requestors]
    else:
        senders = [transport.sender(node, Endpoint(plan.helpers[position + 1].node), session)]
    coefs = [plan.coefficients[j][position] for j in range(fails)]
    hop = position + 1
    batch = _stage_batch(count, window, slice_size)
    queue = Queue(maxsize=max(1, window // batch))
    inbound = 0 if first else fails
    feeder = _spawn_feeder(
        plan, position, rx, reader, ((t, inbound) for t in range(count)),
        queue, batch, cancel, recv_timeout, trace,
    )
    done = 0
    try:
        while done < count:
            for index, frames, local in _queue_get(queue, cancel, recv_timeout, senders):
                if len(frames) > 1:
                    frames = sorted(frames, key=lambda fr: fr.target)
                with _timed(trace, node, "combine", index):
                    outputs = []
                    for j in range(fails):
                        if first:
                            buf = np.empty(slice_size, dtype=np.uint8)
                            mul_into(buf, coefs[j], local)
                        else:
                            buf = _writable_payload(frames[j])
                            xor_mul_into(buf, coefs[j], local)
                        outputs.append(buf)
                with _timed(trace, node, "send", index):
                    for j, buf in enumerate(outputs):
                        frame = SliceFrame(
                            session=session, target=j, index=index, hop=hop, payload=buf
                        )
                        senders[j if last and fails > 1 else 0].send(frame, cancel)
                done += 1
    finally:
        for sender in senders:
            sender.close()
        feeder.join(timeout=1.0)


def _run_cyclic_hop(plan, position, transport, reader, window, recv_timeout, cancel, trace):
    node = plan.helpers[position].node
    count = plan.slices.per_block
    slice_size = plan.slices.slice_size
    k = plan.k
    session = plan.session
    rx = transport.receiver(node, session, cancel)
    succ = transport.sender(node, Endpoint(plan.helpers[(position + 1) % k].node), session)
    deliver = transport.sender(node, plan.requestors[0], session)
    senders = (succ, deliver)
    coef = plan.coefficients[0][position]

    def expected():
        for t in range(count):
            role, _ = plan.cyclic_role(position, t)
            yield t, 0 if role == "originate" else 1

    # Cyclic chains interlock across helpers, so keep handoffs small: a
    # buffered frame another helper is waiting on flushes on first idle.
    batch = min(_stage_batch(count, window, slice_size), max(1, k - 1))
    queue = Queue(maxsize=max(1, window // batch))
    feeder = _spawn_feeder(
        plan, position, rx, reader, expected(), queue, batch, cancel, recv_timeout, trace
    )
    done = 0
    try:
        while done < count:
            for index, frames, local in _queue_get(queue, cancel, recv_timeout, senders):
                role, offset = plan.cyclic_role(position, index)
                with _timed(trace, node, "combine", index):
                    if role == "originate":
                        buf = np.empty(slice_size, dtype=np.uint8)
                        mul_into(buf, coef, local)
                    else:
                        buf = _writable_payload(frames[0])
                        xor_mul_into(buf, coef, local)
                with _timed(trace, node, "send", index):
                    frame = SliceFrame(
                        session=session, target=0, index=index, hop=offset + 1, payload=buf
                    )
                    (deliver if role == "deliver" else succ).send(frame, cancel)
                done += 1
    finally:
        succ.close()
        deliver.close()
        feeder.join(timeout=1.0)


def _run_conventional_source(plan, position, transport, reader, window, recv_timeout, cancel, trace):
    """Ship the local block, slice by slice, to the dedicated requestor."""
    node = plan.helpers[position].node
    block_id = plan.helpers[position].block_id
    count = plan.slices.per_block
    slice_size = plan.slices.slice_size
    sender = transport.sender(node, plan.requestors[0], plan.session)
    hop = position + 1
    try:
        for t in range(count):
            with _timed(trace, node, "read", t):
                local = reader.read_slice(block_id, t, slice_size)
            with _timed(trace, node, "send", t):
                sender.send(
                    SliceFrame(session=plan.session, target=0, index=t, hop=hop, payload=local),
                    cancel,
                )
    finally:
        sender.close()


def _ppr_terms(k: int, edges) -> dict[int, int]:
    terms = {p: 1 for p in range(k)}
    for src, dst, _ in edges:
        if dst < k:
            terms[dst] += terms[src]
    return terms


def _run_ppr_node(plan, position, transport, reader, window, recv_timeout, cancel, trace):
    """Fold received partial blocks with the scaled local block, send to parent."""
    node = plan.helpers[position].node
    block_id = plan.helpers[position].block_id
    count = plan.slices.per_block
    slice_size = plan.slices.slice_size
    edges = plan.ppr_edges()
    inbound = [e for e in edges if e[1] == position]
    (outbound,) = [e for e in edges if e[0] == position]
    terms = _ppr_terms(plan.k, edges)

    partial = np.empty(plan.slices.block_size, dtype=np.uint8)
    coef = plan.coefficients[0][position]
    for t in range(count):
        with _timed(trace, node, "read", t):
            local = reader.read_slice(block_id, t, slice_size)
        mul_into(partial[t * slice_size : (t + 1) * slice_size], coef, local)

    if inbound:
        rx = transport.receiver(node, plan.session, cancel)
        for _ in range(len(inbound) * count):
            with _timed(trace, node, "receive", 0):
                frame = rx.recv(timeout=recv_timeout)
            span = partial[frame.index * slice_size : (frame.index + 1) * slice_size]
            xor_mul_into(span, 1, frame.payload)

    parent_pos = outbound[1]
    dest = plan.requestors[0] if parent_pos == plan.k else Endpoint(plan.helpers[parent_pos].node)
    sender = transport.sender(node, dest, plan.session)
    try:
        for t in range(count):
            with _timed(trace, node, "send", t):
                sender.send(
                    SliceFrame(
                        session=plan.session,
                        target=0,
                        index=t,
                        hop=terms[position],
                        payload=partial[t * slice_size : (t + 1) * slice_size],
                    ),
                    cancel,
                )
    finally:
        sender.close()


# -- requestors ---------------------------------------------------------------


def run_requestor(
    plan: RepairPlan,
    index: int,
    transport: Transport,
    *,
    window: int = DEFAULT_WINDOW,
    recv_timeout: float = 30.0,
    cancel: threading.Event | None = None,
    trace: StageTrace | None = None,
) -> np.ndarray:
    """Collect this requestor's reconstructed block; returns its bytes."""
    cancel = cancel or threading.Event()
    try:
        if plan.scheme == CONVENTIONAL:
            if index == 0:
                return _run_conventional_primary(plan, transport, cancel, recv_timeout)
            return _assemble_plain(plan, index, transport, cancel, recv_timeout, expect_hop=None)
        if plan.scheme == PPR:
            return _assemble_ppr(plan, transport, cancel, recv_timeout)
        return _assemble_plain(plan, index, transport, cancel, recv_timeout, expect_hop=plan.k)
    except (RepairAborted, Cancelled):
        raise
    except Exception as exc:
        node = plan.requestors[index].node
        raise RepairAborted(f"requestor {node} failed: {exc}", node=node) from exc


def _assemble_plain(plan, index, transport, cancel, recv_timeout, expect_hop):
    """Receive s slices for target ``index`` and stitch the block together."""
    me = plan.requestors[index]
    rx = transport.receiver(me.node, plan.session, cancel)
    count = plan.slices.per_block
    slice_size = plan.slices.slice_size
    block = np.empty(plan.slices.block_size, dtype=np.uint8)
    seen = np.zeros(count, dtype=bool)
    received = 0
    while received < count:
        frame = rx.recv(timeout=recv_timeout)
        if frame.target != index:
            raise RepairAborted(f"frame for target {frame.target} reached requestor {index}")
        if expect_hop is not None and frame.hop != expect_hop:
            raise RepairAborted(
                f"slice {frame.index} arrived with {frame.hop} of {expect_hop} terms folded"
            )
        if seen[frame.index]:
            raise RepairAborted(f"duplicate slice {frame.index}")
        seen[frame.index] = True
        block[frame.index * slice_size : (frame.index + 1) * slice_size] = frame.payload
        received += 1
    return block


def _run_conventional_primary(plan, transport, cancel, recv_timeout):
    """Gather all k helper blocks, decode every target, forward the extras."""
    me = plan.requestors[0]
    rx = transport.receiver(me.node, plan.session, cancel)
    count = plan.slices.per_block
    slice_size = plan.slices.slice_size
    k = plan.k
    blocks = np.empty((k, plan.slices.block_size), dtype=np.uint8)
    remaining = k * count
    while remaining:
        frame = rx.recv(timeout=recv_timeout)
        helper = frame.hop - 1
        if not 0 <= helper < k:
            raise RepairAborted(f"frame carries helper position {helper} outside the path")
        blocks[helper, frame.index * slice_size : (frame.index + 1) * slice_size] = frame.payload
        remaining -= 1
    coefs = np.array(plan.coefficients, dtype=np.uint8)
    rebuilt = np.empty((plan.fail_count, plan.slices.block_size), dtype=np.uint8)
    matrix_apply(rebuilt, coefs, blocks)
    for j in range(1, plan.fail_count):
        sender = transport.sender(me.node, plan.requestors[j], plan.session)
        try:
            for t in range(count):
                sender.send(
                    SliceFrame(
                        session=plan.session,
                        target=j,
                        index=t,
                        hop=k,
                        payload=rebuilt[j, t * slice_size : (t + 1) * slice_size],
                    ),
                    cancel,
                )
        finally:
            sender.close()
    return rebuilt[0]


def _assemble_ppr(plan, transport, cancel, recv_timeout):
    """XOR partial blocks as they arrive; done when k terms folded per slice."""
    me = plan.requestors[0]
    rx = transport.receiver(me.node, plan.session, cancel)
    count = plan.slices.per_block
    slice_size = plan.slices.slice_size
    block = np.zeros(plan.slices.block_size, dtype=np.uint8)
    terms = np.zeros(count, dtype=np.int64)
    while (terms < plan.k).any():
        frame = rx.recv(timeout=recv_timeout)
        span = block[frame.index * slice_size : (frame.index + 1) * slice_size]
        xor_mul_into(span, 1, frame.payload)
        terms[frame.index] += frame.hop
        if terms[frame.index] > plan.k:
            raise RepairAborted(f"slice {frame.index} over-folded: {terms[frame.index]} terms")
    return block


# -- whole-session driver -----------------------------------------------------


def execute(
    plan: RepairPlan,
    transport: Transport,
    readers: Mapping[str, BlockReader],
    *,
    window: int = DEFAULT_WINDOW,
    recv_timeout: float = 30.0,
    trace: StageTrace | None = None,
) -> dict[int, np.ndarray]:
    """Run every role of a plan in-process; returns target index -> block.

    On failure the session is cancelled and RepairAborted identifies the
    first hop that broke, so the caller can retry with fresh helpers.
    """
    cancel = threading.Event()
    errors: list[RepairAborted] = []
    results: dict[int, np.ndarray] = {}
    lock = threading.Lock()

    def helper_main(position):
        try:
            run_helper(
                plan,
                position,
                transport,
                readers[plan.helpers[position].node],
                window=window,
                recv_timeout=recv_timeout,
                cancel=cancel,
                trace=trace,
            )
        except RepairAborted as exc:
            with lock:
                errors.append(exc)
            cancel.set()
        except Cancelled:
            pass

    def requestor_main(idx):
        try:
            block = run_requestor(
                plan,
                idx,
                transport,
                window=window,
                recv_timeout=recv_timeout,
                cancel=cancel,
                trace=trace,
            )
            with lock:
                results[plan.targets[idx]] = block
        except RepairAborted as exc:
            with lock:
                errors.append(exc)
            cancel.set()
        except Cancelled:
            pass

    threads = [
        threading.Thread(target=helper_main, args=(p,), name=f"hop-{p}", daemon=True)
        for p in range(plan.k)
    ]
    threads += [
        threading.Thread(target=requestor_main, args=(j,), name=f"req-{j}", daemon=True)
        for j in range(len(plan.requestors))
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    transport.cleanup(plan.session)
    if errors:
        raise errors[0]
    return results
