"""Coordinator: stripe metadata authority and repair orchestrator.

Holds the block-to-stripe map, picks helpers (least-recently-selected) and a
path (plain, rack-aware, or weighted), computes decoding coefficients, and
dispatches the plan to every participant.  Metadata mutations append to a
journal that is replayed at startup, so the daemon is restartable.

Run as a daemon: ``python -m ecrepair.coordinator --config cluster.json``.
"""

from __future__ import annotations

import argparse
import json
import socketserver
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from . import pathsel, plans, protocol
from .config import ClusterConfig
from .plans import Endpoint, RepairPlan, SliceSpec
from .stripes import StripeMetadata


class CoordinatorError(RuntimeError):
    pass


class UnknownBlockError(CoordinatorError):
    pass


DEFAULT_SESSION_TIMEOUT = 30.0

_STATES = ("dispatched", "running", "done", "failed")
_TRANSITIONS = {
    "dispatched": {"running", "done", "failed"},
    "running": {"done", "failed"},
    "done": set(),
    "failed": set(),
}


@dataclass
class RepairSession:
    session_id: bytes
    plan: RepairPlan
    state: str = "dispatched"
    started: float = field(default_factory=time.time)
    ended: float | None = None
    failed_hop: int | None = None
    failed_node: str | None = None
    error: str | None = None
    acked_hops: set[int] = field(default_factory=set)
    done_requestors: set[int] = field(default_factory=set)

    def transition(self, state: str, **info) -> None:
        if state not in _STATES:
            raise CoordinatorError(f"unknown session state {state!r}")
        if state not in _TRANSITIONS[self.state]:
            raise CoordinatorError(f"illegal transition {self.state} -> {state}")
        self.state = state
        if state in ("done", "failed"):
            self.ended = time.time()
        self.failed_hop = info.get("failed_hop", self.failed_hop)
        self.failed_node = info.get("failed_node", self.failed_node)
        self.error = info.get("error", self.error)


class StripeStore:
    """Block-to-stripe map with an append-only JSONL journal."""

    def __init__(self, journal: str | Path | None = None):
        self._stripes: dict[str, StripeMetadata] = {}
        self._blocks: dict[str, tuple[str, int]] = {}
        self._lock = threading.Lock()
        self._journal = Path(journal) if journal else None
        if self._journal and self._journal.exists():
            for line in self._journal.read_text().splitlines():
                if line.strip():
                    self._register(StripeMetadata.from_record(json.loads(line)), journal=False)

    def __len__(self) -> int:
        return len(self._stripes)

    def register(self, stripe: StripeMetadata) -> str:
        return self._register(stripe, journal=True)

    def _register(self, stripe: StripeMetadata, journal: bool) -> str:
        with self._lock:
            existing = self._stripes.get(stripe.stripe_id)
            if existing is not None:
                if existing == stripe:
                    return stripe.stripe_id  # idempotent re-registration
                raise CoordinatorError(f"stripe {stripe.stripe_id} already registered differently")
            clash = [bid for bid in stripe.block_ids if bid in self._blocks]
            if clash:
                raise CoordinatorError(f"block ids already registered: {clash[:3]}")
            self._stripes[stripe.stripe_id] = stripe
            for index, bid in enumerate(stripe.block_ids):
                self._blocks[bid] = (stripe.stripe_id, index)
            if journal and self._journal:
                with self._journal.open("a") as handle:
                    handle.write(json.dumps(stripe.to_record(), separators=(",", ":")) + "\n")
            return stripe.stripe_id

    def locate(self, block_id: str) -> tuple[str, str, int]:
        """block id -> (stripe id, node, index within stripe)."""
        entry = self._blocks.get(block_id)
        if entry is None:
            raise UnknownBlockError(f"unknown block {block_id}")
        stripe_id, index = entry
        return stripe_id, self._stripes[stripe_id].nodes[index], index

    def stripe(self, stripe_id: str) -> StripeMetadata:
        meta = self._stripes.get(stripe_id)
        if meta is None:
            raise CoordinatorError(f"unknown stripe {stripe_id}")
        return meta

    def stripes(self) -> list[StripeMetadata]:
        return list(self._stripes.values())

    def blocks_on_node(self, node: str) -> list[tuple[str, str, int]]:
        out = []
        for stripe in self._stripes.values():
            for index, placed in enumerate(stripe.nodes):
                if placed == node:
                    out.append((stripe.stripe_id, stripe.block_ids[index], index))
        return out


def validate_rack_placement(stripe: StripeMetadata, topology: Mapping[str, str]) -> None:
    """Hierarchical placement: at most n-k blocks of a stripe per rack."""
    limit = stripe.code.n - stripe.code.k
    for rack, count in stripe.rack_counts(topology).items():
        if count > limit:
            raise CoordinatorError(
                f"stripe {stripe.stripe_id} puts {count} blocks in rack {rack}; "
                f"a rack failure would exceed the {limit}-erasure tolerance"
            )


class Coordinator:
    """Repair orchestration logic, transport-agnostic.

    ``dispatcher(plan, role, endpoint)`` delivers one PLAN_DISPATCH; the
    server wires it to the control protocol, tests substitute a stub.
    """

    def __init__(
        self,
        store: StripeStore,
        *,
        topology: Mapping[str, str] | None = None,
        weights: pathsel.LinkWeightMatrix | None = None,
        dispatcher: Callable[[RepairPlan, dict, str], None] | None = None,
        slice_size: int = 32 * 2**10,
        block_size: int = 64 * 2**20,
        session_timeout: float = DEFAULT_SESSION_TIMEOUT,
        enforce_rack_placement: bool = False,
    ):
        self.store = store
        self.topology = dict(topology) if topology else None
        self.weights = weights or pathsel.LinkWeightMatrix()
        self.timestamps = pathsel.HelperTimestamps()
        self.slice_size = slice_size
        self.block_size = block_size
        self.session_timeout = session_timeout
        self.enforce_rack_placement = enforce_rack_placement
        self._dispatcher = dispatcher
        self._sessions: dict[bytes, RepairSession] = {}
        self._lock = threading.Lock()

    # -- metadata ---------------------------------------------------------

    def register_stripe(self, stripe: StripeMetadata) -> str:
        if self.enforce_rack_placement:
            if self.topology is None:
                raise CoordinatorError("rack placement enforcement needs a topology")
            validate_rack_placement(stripe, self.topology)
        return self.store.register(stripe)

    def locate(self, block_id: str) -> tuple[str, str, int]:
        return self.store.locate(block_id)

    # -- repair ------------------------------------------------------------

    def handle_repair_request(
        self,
        failed_block_ids: Iterable[str],
        requestor_endpoints: list[Endpoint],
        scheme: str = plans.RP_BASIC,
        path_policy: str = pathsel.PLAIN,
        selection: str = "greedy",
        slice_size: int | None = None,
        requestor_roles: str = "client",
        requestor_rack: str | None = None,
    ) -> RepairSession:
        failed = list(failed_block_ids)
        if not failed:
            raise CoordinatorError("no failed blocks named")
        located = [self.store.locate(bid) for bid in failed]
        stripe_ids = {sid for sid, _, _ in located}
        if len(stripe_ids) != 1:
            raise CoordinatorError(f"failed blocks span {len(stripe_ids)} stripes; one at a time")
        stripe = self.store.stripe(stripe_ids.pop())
        targets = [index for _, _, index in located]
        fails = len(targets)
        code = stripe.code
        if fails > code.n - code.k:
            raise CoordinatorError(
                f"{fails} failures exceed the tolerance n-k={code.n - code.k}; unrecoverable"
            )
        if fails > 1 and scheme in (plans.RP_BASIC, plans.RP_CYCLIC, plans.PPR):
            raise CoordinatorError(f"{scheme} repairs a single block; use rp-multi or conventional")
        if len(requestor_endpoints) != fails:
            raise CoordinatorError(f"need {fails} requestor endpoints, got {len(requestor_endpoints)}")

        failed_nodes = {stripe.nodes[t] for t in targets}
        requestor_nodes = {ep.node for ep in requestor_endpoints}
        available = [
            node for node in stripe.nodes if node not in failed_nodes | requestor_nodes
        ]
        if selection == "greedy":
            chosen = self.timestamps.select(available, code.k)
        elif selection == "first-k":
            if len(available) < code.k:
                raise pathsel.PathSelectionError("not enough live helpers")
            chosen = sorted(available)[: code.k]
        else:
            raise CoordinatorError(f"unknown selection policy {selection!r}")

        requestor = requestor_endpoints[0].node
        if path_policy == pathsel.PLAIN:
            path = list(chosen)
        elif path_policy == pathsel.RACK_AWARE:
            if self.topology is None:
                raise CoordinatorError("rack-aware path policy needs a topology")
            topology = dict(self.topology)
            if requestor not in topology:
                # An external client counts as a rack of its own unless the
                # request states where it actually sits.
                topology[requestor] = requestor_rack or f"~{requestor}"
            path = pathsel.rack_aware_path(topology, requestor, chosen, code.k)
        elif path_policy == pathsel.WEIGHTED:
            path = pathsel.weighted_path(self.weights, requestor, chosen, code.k)
        else:
            raise CoordinatorError(f"unknown path policy {path_policy!r}")

        spec = SliceSpec.for_block(self.block_size, slice_size or self.slice_size)
        session_id = uuid.uuid4().bytes
        if scheme == plans.RP_BASIC:
            plan = plans.plan_basic(stripe, targets[0], path, requestor_endpoints[0], spec,
                                    session=session_id)
        elif scheme == plans.RP_CYCLIC:
            plan = plans.plan_cyclic(stripe, targets[0], path, requestor_endpoints[0], spec,
                                     session=session_id)
        elif scheme == plans.PPR:
            plan = plans.plan_ppr(stripe, targets[0], path, requestor_endpoints[0], spec,
                                  session=session_id)
        elif scheme == plans.RP_MULTI:
            plan = plans.plan_multiblock(stripe, targets, path, requestor_endpoints, spec,
                                         session=session_id)
        elif scheme == plans.CONVENTIONAL:
            plan = plans.plan_conventional(stripe, targets, path, requestor_endpoints, spec,
                                           session=session_id)
        else:
            raise CoordinatorError(f"unknown repair scheme {scheme!r}")

        session = RepairSession(session_id=session_id, plan=plan)
        with self._lock:
            self._sessions[session_id] = session
        if self._dispatcher is not None:
            try:
                for position, slot in enumerate(plan.helpers):
                    self._dispatcher(plan, {"type": "hop", "position": position}, slot.node)
                if requestor_roles == "daemon":
                    for j, endpoint in enumerate(plan.requestors):
                        self._dispatcher(
                            plan,
                            {
                                "type": "requestor",
                                "index": j,
                                "store_as": stripe.block_ids[targets[j]],
                            },
                            endpoint.node,
                        )
            except Exception as exc:
                session.transition("failed", error=f"dispatch failed: {exc}")
                raise CoordinatorError(f"plan dispatch failed: {exc}") from exc
        return session

    # -- session tracking ---------------------------------------------------

    def session(self, session_id: bytes) -> RepairSession:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise CoordinatorError(f"unknown session {session_id.hex()}")
        return session

    def session_update(self, session_id: bytes, state: str, **info) -> RepairSession:
        session = self.session(session_id)
        with self._lock:
            requestor = info.pop("requestor", None)
            if state == "done" and requestor is not None:
                # Multi-requestor sessions finish when every requestor has
                # its block; partial completions keep the session running.
                session.done_requestors.add(int(requestor))
                if len(session.done_requestors) < session.plan.fail_count:
                    state = "running"
            if state == "running" and session.state == "running":
                pass  # repeated progress reports are fine
            else:
                session.transition(state, **info)
            if "hop" in info and info["hop"] is not None:
                session.acked_hops.add(int(info["hop"]))
        return session

    def check_timeouts(self, now: float | None = None) -> list[RepairSession]:
        """Mark overdue sessions failed, recording the slowest unacked hop."""
        now = time.time() if now is None else now
        expired = []
        with self._lock:
            active = [s for s in self._sessions.values() if s.state in ("dispatched", "running")]
        for session in active:
            if now - session.started > self.session_timeout:
                pending = [
                    p for p in range(session.plan.k) if p not in session.acked_hops
                ]
                slowest = max(pending) if pending else None
                node = session.plan.helpers[slowest].node if slowest is not None else None
                session.transition(
                    "failed",
                    failed_hop=slowest,
                    failed_node=node,
                    error=f"session timed out after {self.session_timeout:.0f}s",
                )
                expired.append(session)
        return expired


# -- socket server --------------------------------------------------------------


class CoordinatorServer:
    """Control-protocol front end for a Coordinator."""

    def __init__(self, coordinator: Coordinator, listen: tuple[str, int] = ("127.0.0.1", 0)):
        self.coordinator = coordinator
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                while True:
                    try:
                        record = protocol.read_message(self.rfile)
                    except protocol.ProtocolError:
                        return
                    if record is None:
                        return
                    msg_type, body = record
                    try:
                        reply = outer._handle(msg_type, body)
                        reply.setdefault("ok", True)
                    except Exception as exc:  # reply with the failure, keep serving
                        reply = {"ok": False, "error": str(exc)}
                    try:
                        protocol.write_message(self.wfile, msg_type, reply)
                    except OSError:
                        return

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server(listen, Handler)
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="coordinator-server", daemon=True
        )

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return host, port

    def start(self) -> None:
        self._thread.start()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def _handle(self, msg_type: int, body: dict) -> dict:
        if msg_type == protocol.REGISTER_STRIPE:
            stripe = StripeMetadata.from_record(body["stripe"])
            return {"stripe_id": self.coordinator.register_stripe(stripe)}
        if msg_type == protocol.REPAIR_REQUEST:
            endpoints = [Endpoint(*ep) for ep in body["requestors"]]
            session = self.coordinator.handle_repair_request(
                body["blocks"],
                endpoints,
                scheme=body.get("scheme", plans.RP_BASIC),
                path_policy=body.get("path_policy", pathsel.PLAIN),
                selection=body.get("selection", "greedy"),
                slice_size=body.get("slice_size"),
                requestor_roles=body.get("requestor_roles", "client"),
                requestor_rack=body.get("requestor_rack"),
            )
            return {"session": session.session_id.hex(), "plan": session.plan.to_wire()}
        if msg_type == protocol.SESSION_STATUS:
            session_id = bytes.fromhex(body["session"])
            if "state" in body:
                session = self.coordinator.session_update(
                    session_id,
                    body["state"],
                    hop=body.get("hop"),
                    requestor=body.get("requestor"),
                    failed_hop=body.get("failed_hop"),
                    failed_node=body.get("failed_node"),
                    error=body.get("error"),
                )
            else:
                session = self.coordinator.session(session_id)
            return {
                "state": session.state,
                "failed_hop": session.failed_hop,
                "failed_node": session.failed_node,
                "error": session.error,
            }
        if msg_type == protocol.PROBE_REPORT:
            rows = [(src, dst, float(mbps)) for src, dst, mbps in body["links"]]
            fresh = pathsel.LinkWeightMatrix.from_probe_rows(rows)
            merged = dict(self.coordinator.weights.weights)
            merged.update(fresh.weights)
            self.coordinator.weights = pathsel.LinkWeightMatrix(
                weights=merged, default=self.coordinator.weights.default
            )
            return {"links": len(rows)}
        if msg_type == protocol.PLAN_DISPATCH:
            raise CoordinatorError("coordinator does not accept plan dispatches")
        raise CoordinatorError(f"unhandled message type {msg_type}")


def dispatch_over_sockets(addresses: Mapping[str, tuple[str, int]]):
    """Dispatcher that pushes PLAN_DISPATCH to helper daemons' control ports."""

    def dispatch(plan: RepairPlan, role: dict, node: str) -> None:
        address = addresses.get(node)
        if address is None:
            raise CoordinatorError(f"no control address for node {node}")
        try:
            protocol.call(
                address, protocol.PLAN_DISPATCH, {"plan": plan.to_wire(), "role": role}
            )
        except (OSError, protocol.ProtocolError) as exc:
            raise CoordinatorError(f"dispatch to {node} failed: {exc}") from exc

    return dispatch


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ecrepair-coordinator", description="metadata and repair coordination daemon"
    )
    parser.add_argument("--config", required=True, help="cluster config JSON")
    parser.add_argument("--listen", default=None, help="host:port (default from config)")
    parser.add_argument("--journal", default=None, help="journal path (default from config)")
    args = parser.parse_args(argv)

    config = ClusterConfig.load(args.config)
    listen = config.parse_listen(args.listen) if args.listen else config.coordinator
    journal = args.journal or config.journal
    store = StripeStore(journal)
    coordinator = Coordinator(
        store,
        topology=config.topology(),
        dispatcher=dispatch_over_sockets(config.control_addresses()),
        slice_size=config.slice_size,
        block_size=config.block_size,
    )
    server = CoordinatorServer(coordinator, listen)
    server.start()
    print(f"coordinator listening on {server.address[0]}:{server.address[1]}, "
          f"{len(store)} stripes loaded")
    try:
        while True:
            time.sleep(5.0)
            coordinator.check_timeouts()
    except KeyboardInterrupt:
        server.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
