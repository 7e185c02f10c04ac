"""Block store behaviour and the helper daemon over real sockets."""

import random
import time

import numpy as np
import pytest

from ecrepair import codec, plans, protocol
from ecrepair.execute import run_requestor
from ecrepair.helper import BlockStore, BlockStoreError, HelperDaemon, MissingBlockError
from ecrepair.plans import Endpoint, SliceSpec
from ecrepair.stripes import make_stripe
from ecrepair.transport import SocketTransport


def test_store_then_read_round_trip(tmp_path):
    store = BlockStore(tmp_path)
    payload = bytes(range(256)) * 4
    store.store_block("blk-1", np.frombuffer(payload, dtype=np.uint8))
    assert store.read_block("blk-1") == payload
    assert store.has_block("blk-1")
    assert store.block_ids() == ["blk-1"]


def test_store_rejects_duplicate(tmp_path):
    store = BlockStore(tmp_path)
    store.store_block("b", b"\x00" * 16)
    with pytest.raises(BlockStoreError):
        store.store_block("b", b"\x00" * 16)


def test_read_missing_block(tmp_path):
    store = BlockStore(tmp_path)
    with pytest.raises(MissingBlockError):
        store.read_block("nope")
    with pytest.raises(MissingBlockError):
        store.read_slice("nope", 0, 16)


def test_delete_block(tmp_path):
    store = BlockStore(tmp_path)
    store.store_block("b", b"\x01" * 64)
    store.delete_block("b")
    assert not store.has_block("b")
    with pytest.raises(MissingBlockError):
        store.delete_block("b")


def test_read_slice_offsets(tmp_path):
    store = BlockStore(tmp_path)
    block = bytes(range(256))
    store.store_block("b", block)
    for index in range(4):
        piece = store.read_slice("b", index, 64)
        assert piece.tobytes() == block[index * 64 : (index + 1) * 64]
    with pytest.raises(BlockStoreError):
        store.read_slice("b", 4, 64)  # beyond end: short read


def test_block_id_path_traversal_rejected(tmp_path):
    store = BlockStore(tmp_path)
    with pytest.raises(BlockStoreError):
        store.store_block("../evil", b"zz")


def test_block_sizes_on_disk(tmp_path):
    store = BlockStore(tmp_path)
    for i in range(4):
        store.store_block(f"b{i}", bytes(1024))
    for i in range(4):
        assert (tmp_path / f"b{i}").stat().st_size == 1024


@pytest.fixture
def socket_cluster(tmp_path):
    """(9,6) stripe served by nine helper daemons on loopback sockets."""
    rng = random.Random(99)
    stripe = make_stripe("st0", 9, 6, [f"n{i}" for i in range(9)])
    data = [np.frombuffer(rng.randbytes(2048), dtype=np.uint8) for _ in range(6)]
    blocks = codec.encode_stripe(stripe.code, data)
    daemons = []
    addresses = {}
    for i, node in enumerate(stripe.nodes):
        daemon = HelperDaemon(node, tmp_path / node, recv_timeout=10.0)
        daemon.store.store_block(stripe.block_ids[i], blocks[i])
        daemon.start()
        addresses[node] = daemon.data_address
        daemons.append(daemon)
    for daemon in daemons:
        for node, address in addresses.items():
            daemon.transport.add_address(node, *address)
    yield stripe, blocks, daemons, addresses
    for daemon in daemons:
        daemon.close()


def dispatch_plan(plan, daemons):
    by_node = {d.node_id: d for d in daemons}
    for position, slot in enumerate(plan.helpers):
        daemon = by_node[slot.node]
        protocol.call(
            daemon.control_address,
            protocol.PLAN_DISPATCH,
            {"plan": plan.to_wire(), "role": {"type": "hop", "position": position}},
        )


@pytest.mark.parametrize("scheme", ["rp-basic", "rp-cyclic", "ppr"])
def test_daemon_repairs_over_sockets(socket_cluster, scheme):
    stripe, blocks, daemons, addresses = socket_cluster
    requestor_transport = SocketTransport("client", addresses=addresses)
    host, port = requestor_transport.address
    path = [f"n{i}" for i in range(1, 7)]
    spec = SliceSpec.for_block(2048, 256)
    build = {
        "rp-basic": plans.plan_basic,
        "rp-cyclic": plans.plan_cyclic,
        "ppr": plans.plan_ppr,
    }[scheme]
    plan = build(stripe, 0, path, Endpoint("client", host, port), spec)
    dispatch_plan(plan, daemons)
    block = run_requestor(plan, 0, requestor_transport, recv_timeout=10.0)
    assert block.tobytes() == blocks[0].tobytes()
    requestor_transport.close()


def test_daemon_requestor_role_stores_block(socket_cluster):
    stripe, blocks, daemons, addresses = socket_cluster
    # n0 fails; n8 (a live daemon that is not on the path) plays requestor.
    path = [f"n{i}" for i in range(1, 7)]
    spec = SliceSpec.for_block(2048, 256)
    plan = plans.plan_basic(stripe, 0, path, Endpoint("n8"), spec)
    by_node = {d.node_id: d for d in daemons}
    protocol.call(
        by_node["n8"].control_address,
        protocol.PLAN_DISPATCH,
        {
            "plan": plan.to_wire(),
            "role": {"type": "requestor", "index": 0, "store_as": "st0.b0-recovered"},
        },
    )
    dispatch_plan(plan, daemons)
    deadline = time.time() + 10
    while time.time() < deadline and not by_node["n8"].store.has_block("st0.b0-recovered"):
        time.sleep(0.05)
    assert by_node["n8"].store.read_block("st0.b0-recovered") == blocks[0].tobytes()


def test_daemon_reports_missing_block_as_failure(socket_cluster, tmp_path):
    stripe, blocks, daemons, addresses = socket_cluster
    by_node = {d.node_id: d for d in daemons}
    by_node["n3"].store.delete_block(stripe.block_ids[3])
    requestor_transport = SocketTransport("client", addresses=addresses)
    host, port = requestor_transport.address
    path = [f"n{i}" for i in range(1, 7)]
    spec = SliceSpec.for_block(2048, 256)
    plan = plans.plan_basic(stripe, 0, path, Endpoint("client", host, port), spec)
    dispatch_plan(plan, daemons)
    from ecrepair.execute import RepairAborted

    with pytest.raises(RepairAborted):
        run_requestor(plan, 0, requestor_transport, recv_timeout=1.5)
    requestor_transport.close()


def test_daemon_status_query(socket_cluster):
    stripe, blocks, daemons, addresses = socket_cluster
    reply = protocol.call(
        daemons[0].control_address, protocol.SESSION_STATUS, {"session": "00" * 16}
    )
    assert reply["blocks"] == 1
