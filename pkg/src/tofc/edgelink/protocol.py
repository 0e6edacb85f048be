"""Length-prefixed frames with a per-frame CRC32.

Frame layout (little-endian)::

    frame_len u32 | frame_type u8 | correlation_id u64 | body | CRC32

``frame_len`` counts every byte after itself (type, id, body and CRC).
The CRC covers every byte before it, length field included.

Request body: ``instr_len u32 | instruction utf-8 | TOFC container``.
Response body: ``status u8 | server_ms f32 | checksum u64 | echo``, where
the optional echo is ``n_p u16 | n_c u16 | d_v u16 | int32 residuals``.
"""

import enum
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import CRCError, FormatError, TruncationError

FRAME_REQUEST = 1
FRAME_RESPONSE = 2
DEFAULT_MAX_FRAME = 1 << 20

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<BQ")
_RESP = struct.Struct("<BfQ")
_ECHO = struct.Struct("<HHH")
FRAME_OVERHEAD = _LEN.size + _HEAD.size + 4


class Status(enum.IntEnum):
    OK = 0
    CRC_ERROR = 1
    FORMAT_ERROR = 2
    BANK_MISMATCH = 3
    DECODE_ERROR = 4
    BAD_REQUEST = 5


@dataclass(frozen=True)
class Frame:
    frame_type: int
    correlation_id: int
    body: bytes


@dataclass(frozen=True)
class Request:
    instruction: str
    container: bytes


@dataclass(frozen=True)
class Response:
    status: Status
    server_ms: float
    checksum: int
    echo: np.ndarray = None  # (n_p, n_c, d_v) int32 residuals in test mode


def encode_frame(frame_type, correlation_id, body, max_frame=DEFAULT_MAX_FRAME):
    body = bytes(body)
    length = _HEAD.size + len(body) + 4
    if length > max_frame:
        raise FormatError(f"frame of {length} bytes exceeds the {max_frame}-byte limit")
    out = bytearray(_LEN.pack(length))
    out += _HEAD.pack(frame_type, correlation_id & 0xFFFFFFFFFFFFFFFF)
    out += body
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def frame_length(prefix, max_frame=DEFAULT_MAX_FRAME):
    """Bytes that follow a 4-byte length prefix, validated against ``max_frame``."""
    if len(prefix) < _LEN.size:
        raise TruncationError("frame length prefix incomplete", len(prefix))
    (length,) = _LEN.unpack_from(prefix, 0)
    if length < _HEAD.size + 4:
        raise FormatError(f"frame length {length} below the minimum {_HEAD.size + 4}", 0)
    if length > max_frame:
        raise FormatError(f"frame length {length} exceeds the {max_frame}-byte limit", 0)
    return length


def decode_frame(buf, max_frame=DEFAULT_MAX_FRAME):
    """Parse one complete frame; raises a :class:`FormatError` subclass."""
    buf = bytes(buf)
    length = frame_length(buf, max_frame)
    if len(buf) < _LEN.size + length:
        raise TruncationError(f"frame declares {length} bytes, {len(buf) - _LEN.size} present", len(buf))
    if len(buf) > _LEN.size + length:
        raise FormatError(f"{len(buf) - _LEN.size - length} bytes after the frame", _LEN.size + length)
    end = len(buf) - 4
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(buf[:end]) != crc:
        raise CRCError("frame CRC mismatch", end)
    frame_type, cid = _HEAD.unpack_from(buf, _LEN.size)
    if frame_type not in (FRAME_REQUEST, FRAME_RESPONSE):
        raise FormatError(f"unknown frame type {frame_type}", _LEN.size)
    return Frame(frame_type, cid, buf[_LEN.size + _HEAD.size : end])


def encode_request_body(instruction, container):
    raw = instruction.encode("utf-8")
    return _LEN.pack(len(raw)) + raw + bytes(container)


def decode_request_body(body):
    if len(body) < _LEN.size:
        raise TruncationError("request body lacks the instruction length", len(body))
    (n,) = _LEN.unpack_from(body, 0)
    if _LEN.size + n > len(body):
        raise TruncationError(f"instruction declares {n} bytes, {len(body) - _LEN.size} present", _LEN.size)
    try:
        text = body[_LEN.size : _LEN.size + n].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"instruction is not valid utf-8: {exc.reason}", _LEN.size + exc.start) from exc
    return Request(text, bytes(body[_LEN.size + n :]))


def encode_response_body(response):
    out = _RESP.pack(int(response.status), float(response.server_ms), response.checksum & 0xFFFFFFFFFFFFFFFF)
    if response.echo is not None:
        echo = np.asarray(response.echo)
        out += _ECHO.pack(*echo.shape) + np.ascontiguousarray(echo, dtype="<i4").tobytes()
    return out


def decode_response_body(body):
    if len(body) < _RESP.size:
        raise TruncationError("response body too short", len(body))
    status, server_ms, checksum = _RESP.unpack_from(body, 0)
    try:
        status = Status(status)
    except ValueError as exc:
        raise FormatError(f"unknown status code {status}", 0) from exc
    echo = None
    rest = body[_RESP.size :]
    if rest:
        if len(rest) < _ECHO.size:
            raise TruncationError("echo header incomplete", _RESP.size)
        shape = _ECHO.unpack_from(rest, 0)
        need = 4 * int(np.prod(shape))
        if len(rest) - _ECHO.size != need:
            raise FormatError(f"echo declares {need} bytes, {len(rest) - _ECHO.size} present", _RESP.size)
        echo = np.frombuffer(rest[_ECHO.size :], dtype="<i4").reshape(shape).astype(np.int32)
    return Response(status, float(server_ms), checksum, echo)
