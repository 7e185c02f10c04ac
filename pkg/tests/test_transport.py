"""Token-bucket shaping accuracy and socket transport behaviour."""

import threading
import time

import numpy as np
import pytest

from ecrepair.frames import SliceFrame
from ecrepair.plans import Endpoint
from ecrepair.transport import (
    LocalTransport,
    PeerUnreachable,
    ReceiveTimeout,
    ShapingProfile,
    SocketTransport,
    TokenBucket,
    TransportError,
)

SESSION = bytes(16)


def frame(index=0, payload_size=1024, hop=1):
    return SliceFrame(
        session=SESSION,
        target=0,
        index=index,
        hop=hop,
        payload=np.zeros(payload_size, dtype=np.uint8),
    )


def test_token_bucket_long_run_rate():
    bucket = TokenBucket(rate=1_000_000, burst=10_000)
    start = time.monotonic()
    total = 0
    while total < 300_000:
        bucket.acquire(10_000)
        total += 10_000
    elapsed = time.monotonic() - start
    rate = total / elapsed
    assert 0.85e6 < rate < 1.25e6, rate


def test_token_bucket_burst_passes_instantly():
    bucket = TokenBucket(rate=1000, burst=50_000)
    start = time.monotonic()
    bucket.acquire(40_000)
    assert time.monotonic() - start < 0.05


def test_token_bucket_rejects_bad_rate():
    with pytest.raises(ValueError):
        TokenBucket(rate=0)


def test_local_transport_delivers_in_order():
    transport = LocalTransport()
    sender = transport.sender("a", Endpoint("b"), SESSION)
    rx = transport.receiver("b", SESSION)
    for i in range(10):
        sender.send(frame(index=i))
    sender.flush()
    got = [rx.recv(timeout=1.0).index for _ in range(10)]
    assert got == list(range(10))


def test_local_transport_recv_timeout():
    transport = LocalTransport()
    rx = transport.receiver("b", SESSION)
    with pytest.raises(ReceiveTimeout):
        rx.recv(timeout=0.2)


def test_local_transport_shaping_paces_traffic():
    # 1 MiB at 4 MiB/s should take about a quarter second.
    rate = 4 * 2**20
    transport = LocalTransport(ShapingProfile.uniform(rate), window=256)
    sender = transport.sender("a", Endpoint("b"), SESSION)
    rx = transport.receiver("b", SESSION)
    done = []

    def producer():
        for i in range(32):
            sender.send(frame(index=i, payload_size=32 * 2**10))
        sender.flush()
        done.append(time.monotonic())

    start = time.monotonic()
    t = threading.Thread(target=producer)
    t.start()
    for _ in range(32):
        rx.recv(timeout=5.0)
    t.join()
    elapsed = done[0] - start
    assert 0.15 < elapsed < 0.6, elapsed


def test_local_transport_per_link_shaping_is_independent():
    profile = ShapingProfile(links={("a", "b"): 1 * 2**20})
    transport = LocalTransport(profile, window=256, batch=1)
    slow = transport.sender("a", Endpoint("b"), SESSION)
    fast = transport.sender("a", Endpoint("c"), SESSION)
    start = time.monotonic()
    for i in range(8):
        fast.send(frame(index=i, payload_size=64 * 2**10))
    fast_elapsed = time.monotonic() - start
    start = time.monotonic()
    for i in range(8):
        slow.send(frame(index=i, payload_size=64 * 2**10))
    slow_elapsed = time.monotonic() - start
    assert fast_elapsed < 0.1
    assert slow_elapsed > 0.3


def test_local_transport_disconnect():
    transport = LocalTransport()
    transport.disconnect("down")
    sender = transport.sender("a", Endpoint("down"), SESSION)
    with pytest.raises(PeerUnreachable):
        sender.send(frame())
        sender.flush()


def test_local_transport_cleanup_drops_queues():
    transport = LocalTransport()
    sender = transport.sender("a", Endpoint("b"), SESSION)
    sender.send(frame(index=7))
    sender.flush()
    transport.cleanup(SESSION)
    rx = transport.receiver("b", SESSION)
    with pytest.raises(ReceiveTimeout):
        rx.recv(timeout=0.2)


def test_socket_transport_round_trip():
    server = SocketTransport("dst")
    host, port = server.address
    client = SocketTransport("src", addresses={"dst": (host, port)}, listen=None)
    sender = client.sender("src", Endpoint("dst"), SESSION)
    payload = np.arange(256, dtype=np.uint8) % 251
    sent = SliceFrame(session=SESSION, target=3, index=9, hop=2, payload=payload)
    sender.send(sent)
    sender.flush()
    rx = server.receiver("dst", SESSION)
    got = rx.recv(timeout=5.0)
    assert got.target == 3 and got.index == 9 and got.hop == 2
    assert got.payload.tobytes() == payload.tobytes()
    sender.close()
    server.close()


def test_socket_transport_endpoint_address_overrides_book():
    server = SocketTransport("dst")
    host, port = server.address
    client = SocketTransport("src", listen=None)
    sender = client.sender("src", Endpoint("dst", host, port), SESSION)
    sender.send(frame(index=1))
    sender.flush()
    assert server.receiver("dst", SESSION).recv(timeout=5.0).index == 1
    sender.close()
    server.close()


def test_socket_transport_unknown_peer():
    client = SocketTransport("src", listen=None)
    with pytest.raises(PeerUnreachable):
        client.sender("src", Endpoint("ghost"), SESSION)


def test_socket_transport_connection_refused():
    client = SocketTransport("src", addresses={"dst": ("127.0.0.1", 1)}, listen=None)
    with pytest.raises(PeerUnreachable):
        client.sender("src", Endpoint("dst"), SESSION)


def test_socket_transport_corrupt_stream_surfaces_error():
    import socket as socketlib

    server = SocketTransport("dst")
    host, port = server.address
    raw = socketlib.create_connection((host, port))
    good = frame(index=0).encode()
    raw.sendall(good)
    rx = server.receiver("dst", SESSION)
    assert rx.recv(timeout=5.0).index == 0
    corrupted = bytearray(frame(index=1).encode())
    corrupted[-1] ^= 0xFF  # break the checksum
    raw.sendall(bytes(corrupted))
    with pytest.raises(TransportError):
        rx.recv(timeout=5.0)
    raw.close()
    server.close()
