"""Slice wire frame: the unit every repair scheme moves between nodes.

Layout (all integers big-endian):

    magic      2 bytes   0xEC 0x01
    session    16 bytes  repair session id
    target     2 bytes   target index within the plan (multi-block repair)
    slice      4 bytes   slice index within the block
    hop        1 byte    number of linear-combination terms folded so far
    length     4 bytes   payload length
    payload    N bytes   partially combined slice data
    crc32      4 bytes   CRC of session..payload

The in-process transport passes SliceFrame objects directly; the socket
transport moves the encoded form and verifies the checksum on receipt.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .kernels import as_byte_array

MAGIC = b"\xec\x01"
_HEADER = struct.Struct(">2s16sHIBI")
HEADER_SIZE = _HEADER.size
CRC_SIZE = 4


class FrameError(ValueError):
    """Malformed, truncated, or corrupted frame."""


@dataclass
class SliceFrame:
    session: bytes
    target: int
    index: int
    hop: int
    payload: np.ndarray

    def encode(self) -> bytes:
        payload = as_byte_array(self.payload).tobytes()
        header = _HEADER.pack(
            MAGIC, self.session, self.target, self.index, self.hop, len(payload)
        )
        crc = zlib.crc32(payload, zlib.crc32(header[2:]))
        return b"".join((header, payload, struct.pack(">I", crc)))


def decode_frame(buf: bytes) -> SliceFrame:
    if len(buf) < HEADER_SIZE + CRC_SIZE:
        raise FrameError(f"frame truncated at {len(buf)} bytes")
    magic, session, target, index, hop, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    end = HEADER_SIZE + length
    if len(buf) != end + CRC_SIZE:
        raise FrameError(f"frame length {len(buf)} != header + {length} payload + crc")
    (crc,) = struct.unpack_from(">I", buf, end)
    if crc != zlib.crc32(buf[2:end]):
        raise FrameError("crc mismatch")
    payload = np.frombuffer(buf, dtype=np.uint8, count=length, offset=HEADER_SIZE)
    return SliceFrame(session=session, target=target, index=index, hop=hop, payload=payload)


def read_frame(stream: BinaryIO) -> SliceFrame | None:
    """Read one frame from a blocking stream; None on clean EOF."""
    header = _read_exact(stream, HEADER_SIZE, allow_eof=True)
    if header is None:
        return None
    magic, session, target, index, hop, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    rest = _read_exact(stream, length + CRC_SIZE)
    (crc,) = struct.unpack_from(">I", rest, length)
    if crc != zlib.crc32(rest[:length], zlib.crc32(header[2:])):
        raise FrameError("crc mismatch")
    payload = np.frombuffer(rest, dtype=np.uint8, count=length)
    return SliceFrame(session=session, target=target, index=index, hop=hop, payload=payload)


def _read_exact(stream: BinaryIO, size: int, allow_eof: bool = False) -> bytes | None:
    chunks = []
    remaining = size
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            if allow_eof and remaining == size:
                return None
            raise FrameError(f"stream ended {remaining} bytes short of a frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)
