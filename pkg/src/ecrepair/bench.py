"""In-process benchmark harness over shaped links.

Runs whole repair sessions through :mod:`ecrepair.execute` on the
token-bucket transport, so relative timings between schemes reflect the
transfer schedules rather than hardware.  Every run verifies the
reconstructed bytes against the original block before its time is recorded.

``python -m ecrepair.bench scenario.json [--csv out.csv]`` runs a scenario
file; the acceptance suite drives the same functions directly.
"""

from __future__ import annotations

import argparse
import json
import random
import statistics
import sys
import threading
import time
import uuid
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import codec, plans
from .execute import MemoryBlockReader, execute
from .frames import SliceFrame
from .plans import Endpoint, SliceSpec
from .stripes import make_stripe
from .transport import LocalTransport, ShapingProfile

DEFAULT_RATE = 32 * 2**20  # bytes/second per node port

EDGE_LIMITED = "edge-limited"
UNIFORM = "uniform"


@dataclass(frozen=True)
class BenchScenario:
    """One benchmark configuration; ``schemes`` run over the same dataset."""

    schemes: tuple[str, ...] = (plans.RP_BASIC,)
    n: int = 14
    k: int = 10
    block_size: int = 64 * 2**20
    slice_size: int = 32 * 2**10
    fails: int = 1
    link_rate: float = DEFAULT_RATE
    shaping: str = UNIFORM
    edge_factor: float = 10.0
    runs: int = 10
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchScenario":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        kwargs = {key: value for key, value in doc.items() if key in known}
        if "schemes" in kwargs:
            kwargs["schemes"] = tuple(kwargs["schemes"])
        return cls(**kwargs)


@dataclass(frozen=True)
class BenchRecord:
    scheme: str
    run: int
    seconds: float
    bytes_repaired: int
    verified: bool


@dataclass
class BenchDataset:
    """One encoded stripe held in memory, shared by every run."""

    stripe: object
    blocks: list[np.ndarray]
    readers: dict[str, MemoryBlockReader]
    targets: list[int]
    spec: SliceSpec

    @classmethod
    def build(cls, scenario: BenchScenario) -> "BenchDataset":
        rng = random.Random(scenario.seed)
        stripe = make_stripe(
            f"bench-{scenario.n}-{scenario.k}-{scenario.seed}",
            scenario.n,
            scenario.k,
            [f"h{i}" for i in range(scenario.n)],
        )
        rng_np = np.random.default_rng(scenario.seed)
        data = [
            rng_np.integers(0, 256, scenario.block_size, dtype=np.uint8)
            for _ in range(scenario.k)
        ]
        blocks = codec.encode_stripe(stripe.code, data)
        readers = {
            node: MemoryBlockReader({stripe.block_ids[i]: blocks[i]})
            for i, node in enumerate(stripe.nodes)
        }
        targets = [rng.randrange(scenario.n)]
        while len(targets) < scenario.fails:
            candidate = rng.randrange(scenario.n)
            if candidate not in targets:
                targets.append(candidate)
        return cls(
            stripe=stripe,
            blocks=blocks,
            readers=readers,
            targets=sorted(targets),
            spec=SliceSpec.for_block(scenario.block_size, scenario.slice_size),
        )

    def helper_path(self) -> list[str]:
        excluded = set(self.targets)
        nodes = [
            node
            for i, node in enumerate(self.stripe.nodes)  # type: ignore[attr-defined]
            if i not in excluded
        ]
        return nodes[: self.stripe.code.k]  # type: ignore[attr-defined]


def shaping_profile(scenario: BenchScenario, requestor_nodes: list[str]) -> ShapingProfile:
    if scenario.shaping == UNIFORM:
        return ShapingProfile.uniform(scenario.link_rate)
    if scenario.shaping == EDGE_LIMITED:
        links = {
            (f"h{i}", req): scenario.link_rate / scenario.edge_factor
            for i in range(scenario.n)
            for req in requestor_nodes
        }
        return ShapingProfile.uniform(scenario.link_rate, links=links)
    raise ValueError(f"unknown shaping profile {scenario.shaping!r}")


def build_plan(scheme: str, dataset: BenchDataset, scenario: BenchScenario):
    path = dataset.helper_path()
    requestors = [Endpoint(f"req{j}") for j in range(scenario.fails)]
    stripe = dataset.stripe
    if scheme == plans.RP_BASIC:
        return plans.plan_basic(stripe, dataset.targets[0], path, requestors[0], dataset.spec)
    if scheme == plans.RP_CYCLIC:
        return plans.plan_cyclic(stripe, dataset.targets[0], path, requestors[0], dataset.spec)
    if scheme == plans.PPR:
        return plans.plan_ppr(stripe, dataset.targets[0], path, requestors[0], dataset.spec)
    if scheme == plans.RP_MULTI:
        return plans.plan_multiblock(stripe, dataset.targets, path, requestors, dataset.spec)
    if scheme == plans.CONVENTIONAL:
        return plans.plan_conventional(stripe, dataset.targets, path, requestors, dataset.spec)
    raise ValueError(f"unknown scheme {scheme!r}")


def measure_once(scheme, dataset, scenario, *, window=64, recv_timeout=120.0) -> BenchRecord:
    plan = build_plan(scheme, dataset, scenario)
    if scheme in (plans.RP_BASIC, plans.RP_CYCLIC, plans.PPR):
        expected = {dataset.targets[0]: dataset.blocks[dataset.targets[0]]}
    else:
        expected = {t: dataset.blocks[t] for t in dataset.targets}
    requestor_nodes = [ep.node for ep in plan.requestors]
    transport = LocalTransport(shaping_profile(scenario, requestor_nodes), window=window)
    start = time.monotonic()
    results = execute(plan, transport, dataset.readers, window=window, recv_timeout=recv_timeout)
    seconds = time.monotonic() - start
    verified = all(
        np.array_equal(results[t], expected[t]) for t in expected
    )
    return BenchRecord(
        scheme=scheme,
        run=-1,
        seconds=seconds,
        bytes_repaired=len(expected) * scenario.block_size,
        verified=verified,
    )


def run_scenario(scenario: BenchScenario, *, window: int = 64) -> list[BenchRecord]:
    dataset = BenchDataset.build(scenario)
    records = []
    for scheme in scenario.schemes:
        if scheme in (plans.RP_BASIC, plans.RP_CYCLIC, plans.PPR) and scenario.fails > 1:
            raise ValueError(f"{scheme} is single-block only; set fails=1")
        for run in range(scenario.runs):
            record = measure_once(scheme, dataset, scenario, window=window)
            records.append(replace(record, run=run))
    return records


def direct_send_baseline(
    block_size: int,
    slice_size: int,
    rate: float = DEFAULT_RATE,
    runs: int = 10,
    *,
    window: int = 64,
    seed: int = 0,
) -> list[float]:
    """Time to stream one block of slices over a single shaped link."""
    spec = SliceSpec.for_block(block_size, slice_size)
    rng = np.random.default_rng(seed)
    block = rng.integers(0, 256, block_size, dtype=np.uint8)
    times = []
    for run in range(runs):
        transport = LocalTransport(ShapingProfile.uniform(rate), window=window)
        session = uuid.uuid4().bytes
        sender = transport.sender("src", Endpoint("dst"), session)
        receiver = transport.receiver("dst", session)
        received = np.empty(block_size, dtype=np.uint8)

        def pull():
            for _ in range(spec.per_block):
                frame = receiver.recv(timeout=120.0)
                offset = frame.index * slice_size
                received[offset : offset + slice_size] = frame.payload

        thread = threading.Thread(target=pull)
        start = time.monotonic()
        thread.start()
        for t in range(spec.per_block):
            payload = block[t * slice_size : (t + 1) * slice_size]
            sender.send(SliceFrame(session=session, target=0, index=t, hop=1, payload=payload))
        thread.join()
        times.append(time.monotonic() - start)
        if not np.array_equal(received, block):
            raise AssertionError("direct send corrupted the block")
    return times


def summarize(records: list[BenchRecord]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for scheme in {r.scheme for r in records}:
        values = [r.seconds for r in records if r.scheme == scheme]
        out[scheme] = {
            "runs": len(values),
            "mean": statistics.fmean(values),
            "stddev": statistics.pstdev(values) if len(values) > 1 else 0.0,
            "min": min(values),
            "max": max(values),
        }
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ecrepair-bench", description="in-process shaped-link repair benchmarks"
    )
    parser.add_argument("scenario", help="scenario JSON file")
    parser.add_argument("--csv", help="append per-run rows to this CSV")
    args = parser.parse_args(argv)
    doc = json.loads(Path(args.scenario).read_text())
    scenario = BenchScenario.from_dict(doc)
    records = run_scenario(scenario)
    if args.csv:
        import csv as csvlib

        fresh = not Path(args.csv).exists()
        with open(args.csv, "a", newline="") as handle:
            writer = csvlib.writer(handle)
            if fresh:
                writer.writerow(["scheme", "run", "seconds", "bytes", "verified"])
            for r in records:
                writer.writerow([r.scheme, r.run, f"{r.seconds:.6f}", r.bytes_repaired, r.verified])
    for scheme, stats in sorted(summarize(records).items()):
        print(
            f"{scheme}: mean {stats['mean']:.3f}s stddev {stats['stddev']:.3f}s "
            f"over {int(stats['runs'])} runs"
        )
    if not all(r.verified for r in records):
        print("WARNING: some runs failed hash verification", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
