"""Bit-exact message serialization for the in-process bus.

Layout (version 1, little-endian):
  16-byte header: u32 message type, i32 slice id, i32 monitor id
  (-1 when not applicable), u32 iteration.
  Body: u32 tensor count, then per tensor u32 ndim + u32 dims, followed
  by the raw float64 data.

Payload bytes are defined as 8 bytes per float; header and shape metadata
are accounted separately as overhead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

HEADER = struct.Struct("<IiiI")
WIRE_VERSION = 1

MSG_DATA_BATCH = 1
MSG_GEN_PACKET = 2
MSG_FEEDBACK = 3
MSG_PARAMS_UP = 4
MSG_PARAMS_DOWN = 5

MSG_NAMES = {
    MSG_DATA_BATCH: "data_batch",
    MSG_GEN_PACKET: "gen_packet",
    MSG_FEEDBACK: "feedback",
    MSG_PARAMS_UP: "params_up",
    MSG_PARAMS_DOWN: "params_down",
}


@dataclass
class Message:
    msg_type: int
    slice_id: int
    monitor_id: int
    iteration: int
    tensors: list


def encode_message(msg: Message) -> bytes:
    parts = [HEADER.pack(msg.msg_type, msg.slice_id, msg.monitor_id, msg.iteration)]
    parts.append(struct.pack("<I", len(msg.tensors)))
    for t in msg.tensors:
        arr = np.ascontiguousarray(t, dtype="<f8")
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_message(buf: bytes) -> Message:
    msg_type, slice_id, monitor_id, iteration = HEADER.unpack_from(buf, 0)
    offset = HEADER.size
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    tensors = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        tensors.append(arr.astype(np.float64))
    return Message(msg_type, slice_id, monitor_id, iteration, tensors)


def payload_bytes(tensors) -> int:
    """8 bytes per float, headers and shape metadata excluded."""
    return 8 * sum(int(np.asarray(t).size) for t in tensors)


def overhead_bytes(tensors) -> int:
    return HEADER.size + 4 + sum(4 + 4 * np.asarray(t).ndim for t in tensors)
