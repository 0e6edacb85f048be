"""TFCP parameter container.

Layout (little-endian): magic ``TFCP``, version u8, tensor count u32, then per
tensor {name length u16, utf-8 name, rank u8, dims u32 x rank, float32 data},
then CRC32 of every preceding byte.
"""

import struct
import zlib
from collections import OrderedDict

import numpy as np

from ..errors import CRCError, FormatError, TruncationError

MAGIC = b"TFCP"
VERSION = 1


def dumps_params(arrays):
    out = bytearray(MAGIC)
    out += struct.pack("<BI", VERSION, len(arrays))
    for name, value in arrays.items():
        raw = name.encode("utf-8")
        value = np.asarray(value)
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def loads_params(buf):
    buf = bytes(buf)
    if len(buf) < 13:
        raise TruncationError("parameter file too short", 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CRCError("parameter file CRC mismatch", len(buf) - 4)
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported parameter file version {version}", 4)
    pos, end = 9, len(buf) - 4
    arrays = OrderedDict()

    def need(n):
        if pos + n > end:
            raise TruncationError(f"need {n} bytes, {end - pos} left", pos)

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1)
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(4 * n)
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
    if pos != end:
        raise FormatError("trailing bytes after last tensor", pos)
    return arrays


def save_params(arrays, path):
    with open(path, "wb") as fh:
        fh.write(dumps_params(arrays))


def load_params(path):
    with open(path, "rb") as fh:
        return loads_params(fh.read())
