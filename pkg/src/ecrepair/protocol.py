"""Control protocol: length-prefixed structured records over stream sockets.

Record layout: 4-byte big-endian body length, then body = 1-byte protocol
version, 1-byte message type, JSON payload.  Five message types cover the
whole control plane:

    REGISTER_STRIPE   client -> coordinator   stripe metadata
    REPAIR_REQUEST    client -> coordinator   failed block ids + requestors
    PLAN_DISPATCH     coordinator -> helper   plan plus this node's role
    SESSION_STATUS    any -> coordinator      progress / completion / query
    PROBE_REPORT      client -> coordinator   bandwidth measurements

Every request gets exactly one JSON reply ({"ok": true, ...} or
{"ok": false, "error": ...}) framed the same way with the same type byte.
"""

from __future__ import annotations

import json
import socket
import struct
from typing import BinaryIO

PROTOCOL_VERSION = 1

REGISTER_STRIPE = 1
REPAIR_REQUEST = 2
PLAN_DISPATCH = 3
SESSION_STATUS = 4
PROBE_REPORT = 5

MESSAGE_NAMES = {
    REGISTER_STRIPE: "REGISTER_STRIPE",
    REPAIR_REQUEST: "REPAIR_REQUEST",
    PLAN_DISPATCH: "PLAN_DISPATCH",
    SESSION_STATUS: "SESSION_STATUS",
    PROBE_REPORT: "PROBE_REPORT",
}

_MAX_BODY = 64 * 2**20


class ProtocolError(RuntimeError):
    pass


def write_message(stream: BinaryIO, msg_type: int, body: dict) -> None:
    if msg_type not in MESSAGE_NAMES:
        raise ProtocolError(f"unknown message type {msg_type}")
    payload = json.dumps(body, separators=(",", ":")).encode()
    stream.write(struct.pack(">IBB", len(payload) + 2, PROTOCOL_VERSION, msg_type) + payload)
    stream.flush()


def read_message(stream: BinaryIO) -> tuple[int, dict] | None:
    """One framed record; None on clean EOF before any bytes."""
    header = stream.read(4)
    if not header:
        return None
    if len(header) < 4:
        raise ProtocolError("truncated length prefix")
    (length,) = struct.unpack(">I", header)
    if not 2 <= length <= _MAX_BODY:
        raise ProtocolError(f"implausible body length {length}")
    body = b""
    while len(body) < length:
        chunk = stream.read(length - len(body))
        if not chunk:
            raise ProtocolError("stream ended mid-record")
        body += chunk
    version, msg_type = body[0], body[1]
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if msg_type not in MESSAGE_NAMES:
        raise ProtocolError(f"unknown message type {msg_type}")
    try:
        payload = json.loads(body[2:].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable payload: {exc}") from exc
    return msg_type, payload


def call(address: tuple[str, int], msg_type: int, body: dict, timeout: float = 10.0) -> dict:
    """Connect, send one request, read one reply; raises on error replies."""
    with socket.create_connection(address, timeout=timeout) as sock:
        stream = sock.makefile("rwb")
        write_message(stream, msg_type, body)
        reply = read_message(stream)
    if reply is None:
        raise ProtocolError("peer closed the connection without replying")
    reply_type, payload = reply
    if reply_type != msg_type:
        raise ProtocolError(f"reply type {reply_type} does not match request {msg_type}")
    if not payload.get("ok", False):
        raise ProtocolError(payload.get("error", "request failed"))
    return payload
