"""Operator CLI: dataset setup, failure injection, repairs, recovery, sims.

Subcommands: write | fail | repair | recover-node | sim | probe-import.
Global flags: --coordinator HOST:PORT, --config FILE, --csv PATH, --seed N.

The CLI is a short-lived client of the coordinator/helper daemons.  Block
files are written and erased through each node's configured root directory
(the daemons and CLI share a filesystem view, as on a local cluster); all
repair traffic flows through the daemons' sockets.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import random
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import codec, protocol, sim
from .config import ClusterConfig, ConfigError
from .execute import RepairAborted, run_requestor
from .helper import BlockStore
from .pathsel import LinkWeightMatrix
from .plans import Endpoint, RepairPlan
from .stripes import StripeMetadata, make_stripe
from .transport import SocketTransport

REPAIR_CSV_COLUMNS = [
    "command", "scheme", "path_policy", "stripe", "blocks", "n", "k",
    "block_size", "slice_size", "run", "seconds", "verified",
]
RECOVERY_CSV_COLUMNS = [
    "command", "node", "blocks", "bytes", "seconds", "rate_bytes_per_s",
    "scheduling", "verified",
]
SIM_CSV_COLUMNS = ["scheme", "k", "slices", "fails", "timeslots"]


class CliError(RuntimeError):
    pass


def sha256(data) -> str:
    return hashlib.sha256(data).hexdigest()


def _append_csv(path: str | None, columns: list[str], rows: list[dict]) -> None:
    if not path:
        return
    target = Path(path)
    fresh = not target.exists()
    with target.open("a", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        if fresh:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _coordinator_address(args, config: ClusterConfig | None) -> tuple[str, int]:
    if args.coordinator:
        return ClusterConfig.parse_listen(args.coordinator)
    if config is not None:
        return config.coordinator
    raise CliError("no coordinator address: pass --coordinator or --config")


def _load_config(args) -> ClusterConfig:
    if not args.config:
        raise CliError("this command needs --config")
    return ClusterConfig.load(args.config)


def _load_report(path: str | None) -> dict:
    if not path:
        raise CliError("this command needs --report (produced by `ecrepair write`)")
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read placement report {path}: {exc}") from exc


# -- write ----------------------------------------------------------------------


def cmd_write(args) -> int:
    config = _load_config(args)
    rng = random.Random(args.seed)
    block_size = args.block_size or config.block_size
    if block_size % config.slice_size:
        raise CliError(
            f"block size {block_size} is not a multiple of slice size {config.slice_size}"
        )
    n, k = config.n, config.k
    if len(config.nodes) < n:
        raise CliError(f"scheme needs {n} nodes, config has {len(config.nodes)}")
    scheme = codec.rs_scheme(n, k)
    node_ids = [node.id for node in config.nodes]
    stores = {node.id: BlockStore(node.root) for node in config.nodes}

    if args.input:
        source = Path(args.input).read_bytes()
        source_digest = sha256(source)
        per_stripe = k * block_size
        stripe_count = max(1, -(-len(source) // per_stripe))
    else:
        source = None
        source_digest = None
        stripe_count = args.stripes

    report = {
        "scheme": {"n": n, "k": k},
        "block_size": block_size,
        "slice_size": config.slice_size,
        "seed": args.seed,
        "source_sha256": source_digest,
        "source_length": len(source) if source is not None else None,
        "stripes": [],
    }
    registered = 0
    for s in range(stripe_count):
        if source is not None:
            chunk = source[s * k * block_size : (s + 1) * k * block_size]
            data_length = len(chunk)
            chunk = chunk.ljust(k * block_size, b"\x00")  # zero padding, true length kept
            data = [
                np.frombuffer(chunk[i * block_size : (i + 1) * block_size], dtype=np.uint8)
                for i in range(k)
            ]
        else:
            data_length = k * block_size
            data = [
                np.frombuffer(rng.randbytes(block_size), dtype=np.uint8) for _ in range(k)
            ]
        placement = rng.sample(node_ids, n)
        stripe = make_stripe(f"st{s:05d}", n, k, placement)
        blocks = codec.encode_stripe(stripe.code, data)
        for i, node in enumerate(placement):
            stores[node].store_block(stripe.block_ids[i], blocks[i])
        if args.offline:
            _register_offline(config, stripe)
        else:
            protocol.call(
                _coordinator_address(args, config),
                protocol.REGISTER_STRIPE,
                {"stripe": stripe.to_record()},
            )
        registered += 1
        report["stripes"].append(
            {
                "stripe_id": stripe.stripe_id,
                "data_length": data_length,
                "blocks": [
                    {"id": stripe.block_ids[i], "node": placement[i], "sha256": sha256(blocks[i])}
                    for i in range(n)
                ],
            }
        )
    Path(args.report).write_text(json.dumps(report, indent=1))
    total_blocks = registered * n
    print(
        f"wrote {registered} stripes ({total_blocks} blocks of {block_size} bytes) "
        f"across {len(node_ids)} nodes; report: {args.report}"
    )
    return 0


def _register_offline(config: ClusterConfig, stripe: StripeMetadata) -> None:
    if config.journal is None:
        raise CliError("offline registration needs a journal path in the config")
    config.journal.parent.mkdir(parents=True, exist_ok=True)
    with config.journal.open("a") as handle:
        handle.write(json.dumps(stripe.to_record(), separators=(",", ":")) + "\n")


# -- fail -----------------------------------------------------------------------


def cmd_fail(args) -> int:
    config = _load_config(args)
    report = _load_report(args.report)
    targets: list[tuple[str, str]] = []  # (block_id, node)
    if args.node:
        known = {node.id for node in config.nodes}
        if args.node not in known:
            raise CliError(f"unknown node {args.node}")
        for stripe in report["stripes"]:
            for block in stripe["blocks"]:
                if block["node"] == args.node:
                    targets.append((block["id"], args.node))
    if args.blocks:
        index = {
            block["id"]: block["node"]
            for stripe in report["stripes"]
            for block in stripe["blocks"]
        }
        for bid in args.blocks.split(","):
            bid = bid.strip()
            if bid not in index:
                raise CliError(f"block {bid} not in the placement report")
            targets.append((bid, index[bid]))
    if not targets:
        raise CliError("nothing to fail: pass --node or --blocks")
    erased = 0
    for block_id, node in targets:
        store = BlockStore(config.node(node).root)
        if store.has_block(block_id):
            store.delete_block(block_id)
            erased += 1
    print(f"erased {erased} of {len(targets)} targeted blocks")
    return 0


# -- repair ---------------------------------------------------------------------


def _expected_hashes(report: dict) -> dict[str, str]:
    return {
        block["id"]: block["sha256"]
        for stripe in report["stripes"]
        for block in stripe["blocks"]
    }


def cmd_repair(args) -> int:
    config = _load_config(args)
    report = _load_report(args.report)
    hashes = _expected_hashes(report)
    address = _coordinator_address(args, config)
    blocks = [b.strip() for b in args.blocks.split(",") if b.strip()]
    if not blocks:
        raise CliError("no blocks named")

    transports = []
    endpoints = []
    for j in range(len(blocks)):
        transport = SocketTransport(f"client-{j}", addresses=config.data_addresses())
        host, port = transport.address
        transports.append(transport)
        endpoints.append(Endpoint(f"client-{j}", host, port))

    rows = []
    code = None
    try:
        for run in range(args.runs):
            reply = protocol.call(
                address,
                protocol.REPAIR_REQUEST,
                {
                    "blocks": blocks,
                    "requestors": [list(ep) for ep in endpoints],
                    "scheme": args.scheme,
                    "path_policy": args.path_policy,
                    "slice_size": args.slice_size,
                    "requestor_rack": args.requestor_rack,
                },
            )
            plan = RepairPlan.from_wire(reply["plan"])
            code = plan.code
            started = time.perf_counter()
            results: dict[int, bytes] = {}
            with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
                futures = {
                    pool.submit(
                        run_requestor, plan, j, transports[j], recv_timeout=args.timeout
                    ): j
                    for j in range(len(blocks))
                }
                for future, j in futures.items():
                    results[j] = future.result()
            seconds = time.perf_counter() - started
            verified = all(
                sha256(results[j]) == hashes.get(blocks[j], "?") for j in range(len(blocks))
            )
            protocol.call(
                address,
                protocol.SESSION_STATUS,
                {"session": reply["session"], "state": "done" if verified else "failed"},
            )
            rows.append(
                {
                    "command": "repair",
                    "scheme": args.scheme,
                    "path_policy": args.path_policy,
                    "stripe": plan.stripe_id,
                    "blocks": ";".join(blocks),
                    "n": code.n,
                    "k": code.k,
                    "block_size": plan.slices.block_size,
                    "slice_size": plan.slices.slice_size,
                    "run": run,
                    "seconds": f"{seconds:.6f}",
                    "verified": verified,
                }
            )
            status = "verified" if verified else "HASH MISMATCH"
            print(f"run {run}: repaired {len(blocks)} block(s) in {seconds:.3f}s [{status}]")
            if not verified:
                _append_csv(args.csv, REPAIR_CSV_COLUMNS, rows)
                return 1
    finally:
        for transport in transports:
            transport.close()
    values = [float(r["seconds"]) for r in rows]
    mean = sum(values) / len(values)
    stddev = (sum((v - mean) ** 2 for v in values) / len(values)) ** 0.5
    print(f"mean {mean:.3f}s stddev {stddev:.3f}s over {len(values)} run(s)")
    _append_csv(args.csv, REPAIR_CSV_COLUMNS, rows)
    return 0


# -- recover-node -----------------------------------------------------------------


def cmd_recover_node(args) -> int:
    config = _load_config(args)
    report = _load_report(args.report)
    hashes = _expected_hashes(report)
    address = _coordinator_address(args, config)
    requestors = [r.strip() for r in args.requestors.split(",") if r.strip()]
    if not requestors:
        raise CliError("need at least one requestor node")
    for node in requestors:
        config.node(node)  # validates

    lost: list[tuple[str, str]] = []  # (stripe_id, block_id)
    for stripe in report["stripes"]:
        for block in stripe["blocks"]:
            if block["node"] == args.node:
                lost.append((stripe["stripe_id"], block["id"]))
    if not lost:
        print(f"node {args.node} holds no blocks; nothing to recover")
        return 0

    block_size = report["block_size"]
    selection = "greedy" if args.scheduling else "first-k"
    started = time.perf_counter()

    def recover_one(item):
        index, (stripe_id, block_id) = item
        target = requestors[index % len(requestors)]
        reply = protocol.call(
            address,
            protocol.REPAIR_REQUEST,
            {
                "blocks": [block_id],
                "requestors": [[target, None, None]],
                "scheme": args.scheme,
                "path_policy": args.path_policy,
                "selection": selection,
                "requestor_roles": "daemon",
            },
        )
        deadline = time.time() + args.timeout
        while time.time() < deadline:
            status = protocol.call(
                address, protocol.SESSION_STATUS, {"session": reply["session"]}
            )
            if status["state"] in ("done", "failed"):
                return block_id, target, status["state"]
            time.sleep(0.02)
        return block_id, target, "timeout"

    outcomes = []
    with ThreadPoolExecutor(max_workers=args.fanout) as pool:
        for outcome in pool.map(recover_one, enumerate(lost)):
            outcomes.append(outcome)
    seconds = time.perf_counter() - started

    failed = [o for o in outcomes if o[2] != "done"]
    verified = True
    for block_id, target, state in outcomes:
        if state != "done":
            verified = False
            continue
        store = BlockStore(config.node(target).root)
        if sha256(store.read_block(block_id)) != hashes.get(block_id, "?"):
            verified = False
    recovered_bytes = (len(outcomes) - len(failed)) * block_size
    rate = recovered_bytes / seconds if seconds > 0 else 0.0
    row = {
        "command": "recover-node",
        "node": args.node,
        "blocks": len(lost),
        "bytes": recovered_bytes,
        "seconds": f"{seconds:.6f}",
        "rate_bytes_per_s": f"{rate:.1f}",
        "scheduling": args.scheduling,
        "verified": verified,
    }
    _append_csv(args.csv, RECOVERY_CSV_COLUMNS, [row])
    print(
        f"recovered {len(lost) - len(failed)}/{len(lost)} blocks "
        f"({recovered_bytes} bytes) in {seconds:.3f}s -> {rate / 2**20:.1f} MiB/s "
        f"[{'verified' if verified else 'FAILURES'}]"
    )
    return 0 if verified else 1


# -- sim ---------------------------------------------------------------------------


def cmd_sim(args) -> int:
    if args.scenario:
        try:
            doc = json.loads(Path(args.scenario).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read scenario {args.scenario}: {exc}") from exc
    else:
        doc = {}
    schemes = args.schemes.split(",") if args.schemes else doc.get("schemes", list(sim.SCHEMES))
    ks = _int_list(args.k_values) or doc.get("k", [10])
    slices = _int_list(args.slice_counts) or doc.get("slices", [2048])
    fails = _int_list(args.fail_counts) or doc.get("fails", [1])
    links = sim.LinkModel(
        link_weights={(src, dst): w for src, dst, w in doc.get("link_weights", [])}
    )
    rows = sim.sweep(schemes, ks, slices, fails, links)
    table = [
        {
            "scheme": scheme,
            "k": k,
            "slices": s,
            "fails": f,
            "timeslots": f"{float(ts):.12g}",
        }
        for scheme, k, s, f, ts in rows
    ]
    writer = csv.DictWriter(sys.stdout, fieldnames=SIM_CSV_COLUMNS)
    writer.writeheader()
    for row in table:
        writer.writerow(row)
    _append_csv(args.csv, SIM_CSV_COLUMNS, table)
    return 0


def _int_list(text: str | None) -> list[int] | None:
    if not text:
        return None
    return [int(x) for x in text.split(",") if x.strip()]


# -- probe-import --------------------------------------------------------------------


def cmd_probe_import(args) -> int:
    matrix = LinkWeightMatrix.from_probe_csv(args.input)
    links = [[src, dst, 1.0 / w] for (src, dst), w in matrix.weights.items()]
    if args.out:
        Path(args.out).write_text(
            json.dumps(
                {"default": matrix.default,
                 "links": [[src, dst, w] for (src, dst), w in matrix.weights.items()]},
                indent=1,
            )
        )
        print(f"wrote {len(links)} link weights to {args.out}")
        return 0
    config = ClusterConfig.load(args.config) if args.config else None
    address = _coordinator_address(args, config)
    reply = protocol.call(address, protocol.PROBE_REPORT, {"links": links})
    print(f"coordinator accepted {reply['links']} link measurements")
    return 0


# -- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecrepair",
        description="erasure-coded block store with pipelined slice repair",
    )
    parser.add_argument("--coordinator", help="coordinator HOST:PORT (overrides config)")
    parser.add_argument("--config", help="cluster config JSON")
    parser.add_argument("--csv", help="append result rows to this CSV file")
    parser.add_argument("--seed", type=int, default=0, help="seed for generated data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("write", help="encode and place stripes, register metadata")
    p.add_argument("--stripes", type=int, default=1)
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--input", help="source file (default: seeded random data)")
    p.add_argument("--report", default="placement-report.json")
    p.add_argument("--offline", action="store_true",
                   help="append to the journal instead of calling the coordinator")
    p.set_defaults(func=cmd_write)

    p = sub.add_parser("fail", help="erase stored blocks to inject failures")
    p.add_argument("--node", help="erase every block on this node")
    p.add_argument("--blocks", help="comma-separated block ids")
    p.add_argument("--report", default="placement-report.json")
    p.set_defaults(func=cmd_fail)

    p = sub.add_parser("repair", help="degraded read: reconstruct blocks at this client")
    p.add_argument("--blocks", required=True, help="comma-separated failed block ids")
    p.add_argument("--scheme", default="rp-basic",
                   choices=["conventional", "ppr", "rp-basic", "rp-cyclic", "rp-multi"])
    p.add_argument("--path-policy", default="plain",
                   choices=["plain", "rack-aware", "weighted"])
    p.add_argument("--requestor-rack", default=None,
                   help="rack this client sits in (rack-aware policy)")
    p.add_argument("--slice-size", type=int, default=None)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--report", default="placement-report.json")
    p.set_defaults(func=cmd_repair)

    p = sub.add_parser("recover-node", help="rebuild everything a failed node stored")
    p.add_argument("--node", required=True)
    p.add_argument("--requestors", required=True, help="comma-separated replacement nodes")
    p.add_argument("--scheme", default="rp-basic",
                   choices=["conventional", "ppr", "rp-basic", "rp-cyclic"])
    p.add_argument("--path-policy", default="plain",
                   choices=["plain", "rack-aware", "weighted"])
    p.add_argument("--scheduling", action=argparse.BooleanOptionalAction, default=True,
                   help="greedy least-recently-selected helpers (default on)")
    p.add_argument("--fanout", type=int, default=8, help="concurrent repair sessions")
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--report", default="placement-report.json")
    p.set_defaults(func=cmd_recover_node)

    p = sub.add_parser("sim", help="timeslot-simulator sweeps, CSV output")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--schemes", help="comma-separated scheme tags")
    p.add_argument("--k-values", help="comma-separated k values")
    p.add_argument("--slice-counts", help="comma-separated slices-per-block values")
    p.add_argument("--fail-counts", help="comma-separated failure counts")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("probe-import", help="import bandwidth probes as link weights")
    p.add_argument("--input", required=True, help="CSV of src,dst,Mb/s rows")
    p.add_argument("--out", help="write weights JSON here instead of the coordinator")
    p.set_defaults(func=cmd_probe_import)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, protocol.ProtocolError, RepairAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
