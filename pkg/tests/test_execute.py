"""End-to-end plan execution over the in-process transport."""

import random
import threading

import numpy as np
import pytest

from ecrepair import codec, plans
from ecrepair.execute import (
    MemoryBlockReader,
    RepairAborted,
    StageTrace,
    execute,
)
from ecrepair.plans import Endpoint, SliceSpec
from ecrepair.stripes import make_stripe
from ecrepair.transport import LocalTransport, ShapingProfile


def build_cluster(n, k, block_size, seed=0, stripe_id="st"):
    """Random stripe stored across n single-block nodes plus readers."""
    rng = random.Random(seed)
    stripe = make_stripe(stripe_id, n, k, [f"n{i}" for i in range(n)])
    data = [np.frombuffer(rng.randbytes(block_size), dtype=np.uint8) for _ in range(k)]
    blocks = codec.encode_stripe(stripe.code, data)
    readers = {}
    for i, node in enumerate(stripe.nodes):
        readers[node] = MemoryBlockReader({stripe.block_ids[i]: blocks[i]})
    return stripe, blocks, readers


def available_path(stripe, targets, k):
    nodes = [stripe.nodes[i] for i in range(stripe.code.n) if i not in set(targets)]
    return nodes[:k]


@pytest.mark.parametrize("scheme", ["rp-basic", "rp-cyclic", "ppr", "conventional"])
def test_single_block_round_trip(scheme):
    stripe, blocks, readers = build_cluster(9, 6, 4096, seed=1)
    spec = SliceSpec.for_block(4096, 256)
    path = available_path(stripe, [0], 6)
    requestor = Endpoint("req")
    builder = {
        "rp-basic": plans.plan_basic,
        "rp-cyclic": plans.plan_cyclic,
        "ppr": plans.plan_ppr,
    }
    if scheme == "conventional":
        plan = plans.plan_conventional(stripe, [0], path, [requestor], spec)
    else:
        plan = builder[scheme](stripe, 0, path, requestor, spec)
    result = execute(plan, LocalTransport(), readers)
    assert result[0].tobytes() == blocks[0].tobytes()


def test_zero_stripe_reconstructs_zeros():
    stripe = make_stripe("zs", 9, 6, [f"n{i}" for i in range(9)])
    readers = {
        node: MemoryBlockReader({stripe.block_ids[i]: np.zeros(1024, dtype=np.uint8)})
        for i, node in enumerate(stripe.nodes)
    }
    spec = SliceSpec.for_block(1024, 128)
    plan = plans.plan_basic(stripe, 0, available_path(stripe, [0], 6), Endpoint("req"), spec)
    result = execute(plan, LocalTransport(), readers)
    assert not result[0].any()


def test_all_schemes_agree_byte_for_byte():
    for n, k, seed in ((9, 6, 11), (14, 10, 12), (16, 12, 13)):
        stripe, blocks, readers = build_cluster(n, k, 2048, seed=seed)
        spec = SliceSpec.for_block(2048, 128)
        target = seed % n
        path = available_path(stripe, [target], k)
        requestor = Endpoint("req")
        outputs = []
        for build in (plans.plan_basic, plans.plan_cyclic, plans.plan_ppr):
            plan = build(stripe, target, path, requestor, spec)
            outputs.append(execute(plan, LocalTransport(), readers)[target])
        plan = plans.plan_conventional(stripe, [target], path, [requestor], spec)
        outputs.append(execute(plan, LocalTransport(), readers)[target])
        plan = plans.plan_multiblock(stripe, [target], path, [requestor], spec)
        outputs.append(execute(plan, LocalTransport(), readers)[target])
        reference = blocks[target].tobytes()
        assert all(out.tobytes() == reference for out in outputs)


def test_multiblock_repair_three_targets():
    stripe, blocks, readers = build_cluster(14, 10, 4096, seed=21)
    spec = SliceSpec.for_block(4096, 512)
    targets = [1, 5, 12]
    path = available_path(stripe, targets, 10)
    requestors = [Endpoint(f"req{j}") for j in range(3)]
    plan = plans.plan_multiblock(stripe, targets, path, requestors, spec)
    result = execute(plan, LocalTransport(), readers)
    for t in targets:
        assert result[t].tobytes() == blocks[t].tobytes()


def test_conventional_multiblock_forwards():
    stripe, blocks, readers = build_cluster(9, 6, 1536, seed=22)
    spec = SliceSpec.for_block(1536, 256)
    targets = [0, 7]
    path = available_path(stripe, targets, 6)
    plan = plans.plan_conventional(
        stripe, targets, path, [Endpoint("reqA"), Endpoint("reqB")], spec
    )
    result = execute(plan, LocalTransport(), readers)
    assert result[0].tobytes() == blocks[0].tobytes()
    assert result[7].tobytes() == blocks[7].tobytes()


def test_hop_sum_invariant_on_instrumented_transport():
    stripe, blocks, readers = build_cluster(9, 6, 768, seed=31)
    spec = SliceSpec.for_block(768, 128)
    target = 0
    path = available_path(stripe, [target], 6)
    plan = plans.plan_basic(stripe, target, path, Endpoint("req"), spec)

    coefs = plan.coefficients[0]
    helper_blocks = [blocks[slot.block_index] for slot in plan.helpers]
    seen = []

    def observer(src, dst, frame):
        seen.append((frame.hop, frame.index, frame.payload.copy()))

    result = execute(plan, LocalTransport(observer=observer), readers)
    assert result[target].tobytes() == blocks[target].tobytes()
    assert len(seen) == 6 * spec.per_block
    for hop, index, payload in seen:
        expected = np.zeros(spec.slice_size, dtype=np.uint8)
        for m in range(hop):
            piece = helper_blocks[m][index * 128 : (index + 1) * 128]
            codec.combine_into(expected, piece, coefs[m])
        assert payload.tobytes() == expected.tobytes(), (hop, index)


def test_link_load_balance_basic():
    stripe, _, readers = build_cluster(9, 6, 1024, seed=41)
    spec = SliceSpec.for_block(1024, 128)
    plan = plans.plan_basic(stripe, 0, available_path(stripe, [0], 6), Endpoint("req"), spec)
    traffic = {}

    def observer(src, dst, frame):
        key = (src, dst)
        traffic[key] = traffic.get(key, 0) + frame.payload.nbytes

    execute(plan, LocalTransport(observer=observer), readers)
    assert len(traffic) == 6
    assert set(traffic.values()) == {1024}


def test_single_read_property_multiblock():
    stripe, blocks, readers = build_cluster(9, 6, 1024, seed=42)

    class CountingReader(MemoryBlockReader):
        def __init__(self, blocks):
            super().__init__(blocks)
            self.reads = 0

        def read_slice(self, block_id, index, slice_size):
            self.reads += 1
            return super().read_slice(block_id, index, slice_size)

    counting = {}
    for i, node in enumerate(stripe.nodes):
        counting[node] = CountingReader({stripe.block_ids[i]: blocks[i]})
    spec = SliceSpec.for_block(1024, 64)
    targets = [0, 1, 2]
    path = available_path(stripe, targets, 6)
    plan = plans.plan_multiblock(
        stripe, targets, path, [Endpoint(f"r{j}") for j in range(3)], spec
    )
    execute(plan, LocalTransport(), counting)
    for node in path:
        assert counting[node].reads == spec.per_block  # one pass over the block


def test_stage_overlap_across_slices():
    stripe, _, readers = build_cluster(9, 6, 4096 * 32, seed=43)
    spec = SliceSpec.for_block(4096 * 32, 4096)  # 32 slices
    plan = plans.plan_basic(stripe, 0, available_path(stripe, [0], 6), Endpoint("req"), spec)
    trace = StageTrace()
    # Pace the links so stage intervals span measurable time.
    shaping = ShapingProfile.uniform(4 * 2**20)
    execute(plan, LocalTransport(shaping), readers, trace=trace)
    middle = plan.helpers[2].node
    receives = trace.spans(middle, "receive")
    sends = trace.spans(middle, "send")
    assert receives and sends
    overlapping = 0
    for ri, rs, re in receives:
        for si, ss, se in sends:
            if si != ri and rs < se and ss < re:
                overlapping += 1
    assert overlapping > 0, "receive and send stages never overlapped across slices"


def test_missing_block_aborts_with_failed_hop():
    stripe, blocks, readers = build_cluster(9, 6, 512, seed=44)
    spec = SliceSpec.for_block(512, 64)
    path = available_path(stripe, [0], 6)
    # Erase the local block of the third helper.
    victim = path[2]
    readers[victim] = MemoryBlockReader({})
    plan = plans.plan_basic(stripe, 0, path, Endpoint("req"), spec)
    with pytest.raises(RepairAborted) as info:
        execute(plan, LocalTransport(), readers, recv_timeout=2.0)
    assert info.value.node == victim or info.value.position == 2


def test_unreachable_helper_aborts():
    stripe, blocks, readers = build_cluster(9, 6, 512, seed=45)
    spec = SliceSpec.for_block(512, 64)
    path = available_path(stripe, [0], 6)
    transport = LocalTransport()
    transport.disconnect(path[3])
    plan = plans.plan_basic(stripe, 0, path, Endpoint("req"), spec)
    with pytest.raises(RepairAborted):
        execute(plan, transport, readers, recv_timeout=2.0)


def test_concurrent_sessions_are_isolated():
    stripe, blocks, readers = build_cluster(9, 6, 1024, seed=46)
    spec = SliceSpec.for_block(1024, 128)
    transport = LocalTransport()
    path0 = available_path(stripe, [0], 6)
    path8 = available_path(stripe, [8], 6)
    plan_a = plans.plan_basic(stripe, 0, path0, Endpoint("reqA"), spec)
    plan_b = plans.plan_basic(stripe, 8, path8, Endpoint("reqB"), spec)
    results = {}

    def run(plan, key):
        results[key] = execute(plan, transport, readers)

    threads = [
        threading.Thread(target=run, args=(plan_a, "a")),
        threading.Thread(target=run, args=(plan_b, "b")),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results["a"][0].tobytes() == blocks[0].tobytes()
    assert results["b"][8].tobytes() == blocks[8].tobytes()
