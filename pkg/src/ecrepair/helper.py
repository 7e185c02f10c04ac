"""Per-node storage daemon: block files plus hop execution.

Blocks live as plain files named by block id under a root directory, so a
repair reads stored data straight off the native file system.  The daemon
accepts PLAN_DISPATCH on its control port and streams slice frames on its
data port; hop stages overlap exactly as in :mod:`ecrepair.execute`.

Run as a daemon: ``python -m ecrepair.helper --config cluster.json --node n1``.
"""

from __future__ import annotations

import argparse
import os
import socketserver
import threading
import time
from pathlib import Path

import numpy as np

from . import protocol
from .config import ClusterConfig
from .execute import RepairAborted, run_helper, run_requestor
from .kernels import as_byte_array
from .plans import RepairPlan
from .transport import SocketTransport


class BlockStoreError(RuntimeError):
    pass


class MissingBlockError(BlockStoreError):
    pass


class BlockStore:
    """One file per block, file name = block id; sequential slice reads.

    Reads go through a per-call pread so concurrent sessions never share
    file offsets; writes are exclusive per block id.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, block_id: str) -> Path:
        if "/" in block_id or block_id in (".", "..") or "\x00" in block_id:
            raise BlockStoreError(f"unusable block id {block_id!r}")
        return self.root / block_id

    def store_block(self, block_id: str, data) -> None:
        path = self._path(block_id)
        with self._lock:
            if path.exists():
                raise BlockStoreError(f"block {block_id} already stored")
            tmp = path.with_name(path.name + ".partial")
            with open(tmp, "wb") as handle:
                handle.write(as_byte_array(data).tobytes())
                handle.flush()
                os.fsync(handle.fileno())
            tmp.rename(path)

    def read_block(self, block_id: str) -> bytes:
        path = self._path(block_id)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise MissingBlockError(f"block {block_id} not stored here") from None

    def read_slice(self, block_id: str, index: int, slice_size: int) -> np.ndarray:
        path = self._path(block_id)
        try:
            fd = os.open(path, os.O_RDONLY)
        except FileNotFoundError:
            raise MissingBlockError(f"block {block_id} not stored here") from None
        try:
            data = os.pread(fd, slice_size, index * slice_size)
        finally:
            os.close(fd)
        if len(data) != slice_size:
            raise BlockStoreError(
                f"short read: slice {index} of {block_id} returned {len(data)} bytes"
            )
        return np.frombuffer(data, dtype=np.uint8)

    def delete_block(self, block_id: str) -> None:
        try:
            self._path(block_id).unlink()
        except FileNotFoundError:
            raise MissingBlockError(f"block {block_id} not stored here") from None

    def has_block(self, block_id: str) -> bool:
        return self._path(block_id).exists()

    def block_ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if not p.name.endswith(".partial"))


class HelperDaemon:
    """Executes dispatched plan roles against the local block store."""

    def __init__(
        self,
        node_id: str,
        root: str | Path,
        *,
        control_listen: tuple[str, int] = ("127.0.0.1", 0),
        data_listen: tuple[str, int] = ("127.0.0.1", 0),
        data_addresses: dict[str, tuple[str, int]] | None = None,
        coordinator: tuple[str, int] | None = None,
        window: int = 64,
        recv_timeout: float = 30.0,
    ):
        self.node_id = node_id
        self.store = BlockStore(root)
        self.transport = SocketTransport(node_id, addresses=data_addresses, listen=data_listen)
        self.coordinator = coordinator
        self.window = window
        self.recv_timeout = recv_timeout
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
                    except Exception as exc:
                        reply = {"ok": False, "error": str(exc)}
                    try:
                        protocol.write_message(self.wfile, msg_type, reply)
                    except OSError:
                        return

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._control = Server(control_listen, Handler)
        self._control_thread = threading.Thread(
            target=self._control.serve_forever, name=f"helper-control-{node_id}", daemon=True
        )

    @property
    def control_address(self) -> tuple[str, int]:
        host, port = self._control.server_address[:2]
        return host, port

    @property
    def data_address(self) -> tuple[str, int]:
        return self.transport.address

    def start(self) -> None:
        self._control_thread.start()

    def close(self) -> None:
        self._control.shutdown()
        self._control.server_close()
        self.transport.close()

    def _handle(self, msg_type: int, body: dict) -> dict:
        if msg_type == protocol.PLAN_DISPATCH:
            plan = RepairPlan.from_wire(body["plan"])
            role = body.get("role", {})
            threading.Thread(
                target=self._run_role,
                args=(plan, role),
                name=f"session-{plan.session.hex()[:8]}-{self.node_id}",
                daemon=True,
            ).start()
            return {"node": self.node_id}
        if msg_type == protocol.SESSION_STATUS:
            return {"node": self.node_id, "blocks": len(self.store.block_ids())}
        raise BlockStoreError(f"helper does not handle message type {msg_type}")

    def _run_role(self, plan: RepairPlan, role: dict) -> None:
        kind = role.get("type", "hop")
        try:
            if kind == "hop":
                position = int(role["position"])
                run_helper(
                    plan,
                    position,
                    self.transport,
                    self.store,
                    window=self.window,
                    recv_timeout=self.recv_timeout,
                )
                self._report(plan, "running", hop=position)
            elif kind == "requestor":
                index = int(role["index"])
                block = run_requestor(
                    plan,
                    index,
                    self.transport,
                    window=self.window,
                    recv_timeout=self.recv_timeout,
                )
                block_id = role.get("store_as")
                if block_id:
                    self.store.store_block(block_id, block)
                self._report(plan, "done", requestor=index)
            else:
                raise BlockStoreError(f"unknown role type {kind!r}")
        except RepairAborted as exc:
            self._report(
                plan, "failed",
                failed_hop=exc.position, failed_node=exc.node or self.node_id, error=str(exc),
            )
        except Exception as exc:
            self._report(plan, "failed", failed_node=self.node_id, error=str(exc))
        finally:
            # One role per daemon per session, so the session's frame queue
            # can be dropped as soon as that role finishes.
            self.transport.cleanup(plan.session)

    def _report(self, plan: RepairPlan, state: str, **info) -> None:
        if self.coordinator is None:
            return
        body = {"session": plan.session.hex(), "state": state}
        body.update({k: v for k, v in info.items() if v is not None})
        try:
            protocol.call(self.coordinator, protocol.SESSION_STATUS, body)
        except (OSError, protocol.ProtocolError):
            pass  # status reporting is best-effort


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ecrepair-helper", description="per-node block storage and repair daemon"
    )
    parser.add_argument("--config", required=True, help="cluster config JSON")
    parser.add_argument("--node", required=True, help="node id from the config")
    parser.add_argument("--root", default=None, help="override the block root directory")
    args = parser.parse_args(argv)

    config = ClusterConfig.load(args.config)
    node = config.node(args.node)
    daemon = HelperDaemon(
        node.id,
        args.root or node.root,
        control_listen=node.control_address,
        data_listen=node.data_address,
        data_addresses=config.data_addresses(),
        coordinator=config.coordinator,
    )
    daemon.start()
    print(f"helper {node.id} control={daemon.control_address} data={daemon.data_address} "
          f"root={daemon.store.root}")
    try:
        while True:
            time.sleep(60)
    except KeyboardInterrupt:
        daemon.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
