"""Byte-exact protocol frames exchanged among the three parties.

Frame header (little-endian, 31 bytes): magic "STIP", version u16, msg_type u8,
epoch u64, session_id u64, payload_len u64. The payload encoding depends on the
message type; matrices travel as (rows u32, cols u32, f32 row-major).
"""

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import CodecError
from .numerics import DTYPE, NEG_INF

WIRE_MAGIC = b"STIP"
WIRE_VERSION = 1

_HEADER = struct.Struct("<4sHBQQQ")
HEADER_SIZE = _HEADER.size  # 31

_MATRIX_PREFIX = struct.Struct("<II")
MATRIX_PREFIX_SIZE = _MATRIX_PREFIX.size  # 8

_ERROR_PREFIX = struct.Struct("<H")
_REKEY_PAYLOAD = struct.Struct("<Q")

_F32_MIN = float(np.finfo(np.float32).min)


class MsgType(IntEnum):
    DEPLOY_MODEL = 1
    DEPLOY_KEYS = 2
    INFER_REQUEST = 3
    INFER_RESPONSE = 4
    REKEY = 5
    ERROR = 6
    ACK = 7


class ErrorCode(IntEnum):
    STALE_EPOCH = 1
    MALFORMED = 2
    UNSUPPORTED = 3
    INTERNAL = 4


@dataclass
class Frame:
    msg_type: MsgType
    epoch: int
    session_id: int
    payload: bytes = field(default=b"", repr=False)


def encode_frame(frame):
    """Frame -> header + payload bytes."""
    return (
        _HEADER.pack(
            WIRE_MAGIC,
            WIRE_VERSION,
            int(frame.msg_type),
            frame.epoch,
            frame.session_id,
            len(frame.payload),
        )
        + frame.payload
    )


def decode_header(raw):
    """31 header bytes -> (msg_type, epoch, session_id, payload_len)."""
    if len(raw) != HEADER_SIZE:
        raise CodecError(f"header must be {HEADER_SIZE} bytes, got {len(raw)}")
    magic, version, msg_type, epoch, session_id, payload_len = _HEADER.unpack(raw)
    if magic != WIRE_MAGIC:
        raise CodecError(f"bad frame magic {magic!r}")
    if version != WIRE_VERSION:
        raise CodecError(f"unsupported wire version {version}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise CodecError(f"unknown message type {msg_type}") from None
    return msg_type, epoch, session_id, payload_len


def decode_frame(raw):
    """Full frame bytes -> Frame; length must match the header exactly."""
    if len(raw) < HEADER_SIZE:
        raise CodecError(f"frame shorter than header: {len(raw)} bytes")
    msg_type, epoch, session_id, payload_len = decode_header(raw[:HEADER_SIZE])
    payload = raw[HEADER_SIZE:]
    if len(payload) != payload_len:
        raise CodecError(
            f"payload length {len(payload)} != declared {payload_len}"
        )
    return Frame(msg_type, epoch, session_id, bytes(payload))


def encode_matrix(m):
    """Matrix -> (rows u32, cols u32, f32 row-major); -inf stored as float32 min."""
    a = np.ascontiguousarray(m, dtype=DTYPE)
    if a.ndim != 2:
        raise CodecError(f"wire matrices are 2-D, got ndim={a.ndim}")
    if np.any(np.isneginf(a)):
        a = np.where(np.isneginf(a), np.float32(_F32_MIN), a)
    return _MATRIX_PREFIX.pack(a.shape[0], a.shape[1]) + a.tobytes(order="C")


def decode_matrix(raw):
    """Inverse of encode_matrix; float32 minimum reads back as -inf."""
    if len(raw) < MATRIX_PREFIX_SIZE:
        raise CodecError("matrix payload shorter than its dims prefix")
    rows, cols = _MATRIX_PREFIX.unpack(raw[:MATRIX_PREFIX_SIZE])
    body = raw[MATRIX_PREFIX_SIZE:]
    if len(body) != 4 * rows * cols:
        raise CodecError(
            f"matrix payload is {len(body)} bytes, expected {4 * rows * cols}"
        )
    a = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(DTYPE)
    return np.where(a == np.float32(_F32_MIN), np.float32(NEG_INF), a)


def encode_error_payload(code, detail):
    return _ERROR_PREFIX.pack(int(code)) + detail.encode("utf-8")


def decode_error_payload(raw):
    if len(raw) < _ERROR_PREFIX.size:
        raise CodecError("error payload shorter than its code")
    (code,) = _ERROR_PREFIX.unpack(raw[: _ERROR_PREFIX.size])
    return ErrorCode(code) if code in ErrorCode._value2member_map_ else code, raw[
        _ERROR_PREFIX.size :
    ].decode("utf-8")


def make_deploy_model(model_bytes, epoch, session_id):
    return Frame(MsgType.DEPLOY_MODEL, epoch, session_id, bytes(model_bytes))


def make_deploy_keys(keys_bytes, epoch, session_id):
    return Frame(MsgType.DEPLOY_KEYS, epoch, session_id, bytes(keys_bytes))


def make_infer_request(x, epoch, session_id):
    return Frame(MsgType.INFER_REQUEST, epoch, session_id, encode_matrix(x))


def make_infer_response(o, epoch, session_id):
    return Frame(MsgType.INFER_RESPONSE, epoch, session_id, encode_matrix(o))


def make_rekey(new_epoch, retiring_epoch, session_id):
    """Epoch-bump notice: header carries the new epoch, payload the retiring one."""
    return Frame(MsgType.REKEY, new_epoch, session_id, _REKEY_PAYLOAD.pack(retiring_epoch))


def decode_rekey_payload(raw):
    if len(raw) != _REKEY_PAYLOAD.size:
        raise CodecError(f"rekey payload must be {_REKEY_PAYLOAD.size} bytes")
    return _REKEY_PAYLOAD.unpack(raw)[0]


def make_error(code, detail, epoch, session_id):
    return Frame(MsgType.ERROR, epoch, session_id, encode_error_payload(code, detail))


def make_ack(epoch, session_id):
    return Frame(MsgType.ACK, epoch, session_id, b"")
