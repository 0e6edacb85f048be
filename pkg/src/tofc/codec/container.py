"""TOFC request container: header, side information, hyperprior stream, main stream.

Layout (little-endian)::

    magic "TOFC" | version u8 | flags u8 | n_p u16 | n_c u16 | d_v u16 | n_e u8 | reserved u8
    side_len u32 | side bytes | hyper_len u32 | hyper bytes | main_len u32 | main bytes | CRC32

The CRC covers every preceding byte. The hyper stream comes first because
the Laplacian tables of the main stream are rebuilt from decoded hyper
symbols; tables never travel.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..density import SYMBOL_MAX
from ..errors import ConfigError, CRCError, DecodeError, FormatError, InvalidArgumentError, TofcError, TruncationError
from ..merge import MergedFeatures
from ..selector import hard_select, pack_side_info, route, unpack_side_info
from .rangecoder import RangeDecoder, RangeEncoder
from .tables import factorized_tables, laplace_table

MAGIC = b"TOFC"
VERSION = 1
KNOWN_FLAGS = 0
_HEAD = struct.Struct("<4sBBHHHBB")
_LEN = struct.Struct("<I")
HEADER_BYTES = _HEAD.size + 3 * _LEN.size + 4
HEADER_BITS = 8 * HEADER_BYTES
MAX_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class TofcBitstream:
    n_p: int
    n_c: int
    d_v: int
    n_e: int
    side_info: bytes
    hyper: bytes
    main: bytes
    flags: int = 0
    version: int = VERSION

    def to_bytes(self):
        out = bytearray(_HEAD.pack(MAGIC, self.version, self.flags, self.n_p, self.n_c, self.d_v, self.n_e, 0))
        for part in (self.side_info, self.hyper, self.main):
            out += _LEN.pack(len(part)) + part
        out += struct.pack("<I", zlib.crc32(out))
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf):
        """Parse and validate framing; raises a :class:`FormatError` subclass."""
        buf = bytes(buf)
        if len(buf) < HEADER_BYTES:
            raise TruncationError(f"container needs at least {HEADER_BYTES} bytes, got {len(buf)}", len(buf))
        magic, version, flags, n_p, n_c, d_v, n_e, _ = _HEAD.unpack_from(buf, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        parts = []
        pos = _HEAD.size
        for name in ("side info", "hyper stream", "main stream"):
            if pos + 4 > len(buf) - 4:
                raise TruncationError(f"{name} length field missing", pos)
            (n,) = _LEN.unpack_from(buf, pos)
            pos += 4
            if pos + n > len(buf) - 4:
                raise TruncationError(f"{name} declares {n} bytes, {len(buf) - 4 - pos} available", pos)
            parts.append(buf[pos : pos + n])
            pos += n
        if pos != len(buf) - 4:
            raise FormatError(f"{len(buf) - 4 - pos} unexpected trailing bytes", pos)
        (crc,) = struct.unpack_from("<I", buf, pos)
        if zlib.crc32(buf[:pos]) != crc:
            raise CRCError("container CRC mismatch", pos)
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}", 4)
        if flags & ~KNOWN_FLAGS:
            raise FormatError(f"unknown flag bits 0x{flags:02x}", 5)
        return cls(n_p, n_c, d_v, n_e, *parts, flags=flags, version=version)

    @property
    def total_bits(self):
        return HEADER_BITS + 8 * (len(self.side_info) + len(self.hyper) + len(self.main))

    def breakdown(self):
        """Bit counts per section; they sum to :attr:`total_bits`."""
        return {
            "header": HEADER_BITS,
            "side": 8 * len(self.side_info),
            "hyper": 8 * len(self.hyper),
            "main": 8 * len(self.main),
        }


@dataclass(frozen=True)
class EncodedRequest:
    bitstream: TofcBitstream
    residuals: np.ndarray  # (n_p, n_c, d_v) int32
    reconstruction: np.ndarray  # (n_p, n_c, d_v) float32
    hard_index: np.ndarray  # (n_p, n_c)
    estimated_bits: float  # entropy-model estimate for hyper + main

    @property
    def checksum(self):
        return fnv1a64(self.residuals)


@dataclass(frozen=True)
class DecodedRequest:
    residuals: np.ndarray
    reconstruction: np.ndarray
    hard_index: np.ndarray

    @property
    def checksum(self):
        return fnv1a64(self.residuals)


def fnv1a64(residuals):
    """64-bit FNV-1a over int32 little-endian residuals in row-major order."""
    h = 0xCBF29CE484222325
    for byte in np.ascontiguousarray(residuals, dtype="<i4").tobytes():
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _check_bank(bank, d_v, n_e):
    if d_v != bank.d_v or n_e != bank.n_e:
        raise ConfigError(f"container expects d_v={d_v}, n_e={n_e}; bank has d_v={bank.d_v}, n_e={bank.n_e}")


def compress_request(y, bank, hard_index=None):
    """Entropy-code merged features ``y`` of shape ``(n_p, n_c, d_v)``.

    ``hard_index`` defaults to the router's argmax choice per feature.
    """
    if isinstance(y, MergedFeatures):
        y = y.data
    y = np.asarray(y, dtype=np.float32)
    if y.ndim != 3:
        raise InvalidArgumentError(f"expected (n_p, n_c, d_v) merged features, got {y.shape}")
    n_p, n_c, d_v = y.shape
    if d_v != bank.d_v:
        raise ConfigError(f"features have d_v={d_v}, bank expects {bank.d_v}")
    if not (0 < n_p < 1 << 16 and 0 < n_c < 1 << 16 and n_p * n_c * d_v <= MAX_ELEMENTS):
        raise InvalidArgumentError(f"request shape {y.shape} outside container limits")
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("features contain non-finite values")
    flat = y.reshape(-1, d_v)
    n = flat.shape[0]
    if hard_index is None:
        hard_index = hard_select(route(bank, flat, dtype=np.float32))
    idx = np.asarray(hard_index, dtype=np.int64).reshape(-1)
    if idx.size != n:
        raise InvalidArgumentError(f"hard_index has {idx.size} entries for {n} features")
    side = pack_side_info(idx, bank.n_e)

    k = np.zeros((n, d_v), dtype=np.int32)
    zs = np.zeros((n, bank.d_z), dtype=np.int32)
    b = np.zeros((n, d_v), dtype=np.float32)
    recon = np.zeros((n, d_v), dtype=np.float32)
    estimate = 0.0
    for e in np.unique(idx):
        rows = np.flatnonzero(idx == e)
        model = bank.models[e]
        codes = model.compress(flat[rows])
        k[rows], zs[rows], b[rows], recon[rows] = codes.k, codes.zs, codes.b, codes.recon
        estimate += model.estimate_rate(codes).bits

    enc = RangeEncoder()
    for i in range(n):
        tables = factorized_tables(bank.models[idx[i]])
        for c, s in enumerate(zs[i].tolist()):
            enc.encode_symbol(tables[c], s)
    hyper = enc.finish()

    enc = RangeEncoder()
    for kv, bv in zip(k.ravel().tolist(), b.ravel().tolist()):
        enc.encode_symbol(laplace_table(bv), kv)
    main = enc.finish()

    stream = TofcBitstream(n_p, n_c, d_v, bank.n_e, side, hyper, main)
    return EncodedRequest(
        bitstream=stream,
        residuals=k.reshape(n_p, n_c, d_v),
        reconstruction=recon.reshape(n_p, n_c, d_v),
        hard_index=idx.reshape(n_p, n_c),
        estimated_bits=estimate,
    )


def encode_request(y, bank, hard_index=None):
    """Container bytes for ``y``; see :func:`compress_request`."""
    return compress_request(y, bank, hard_index).bitstream.to_bytes()


def decode_request(data, bank):
    """Recover residuals and reconstruction from container bytes.

    Raises
    ------
    FormatError
        Bad framing, CRC mismatch, unknown version or corrupt streams.
    ConfigError
        The container was produced for a different bank shape.
    """
    stream = data if isinstance(data, TofcBitstream) else TofcBitstream.from_bytes(data)
    _check_bank(bank, stream.d_v, stream.n_e)
    n_p, n_c, d_v = stream.n_p, stream.n_c, stream.d_v
    n = n_p * n_c
    if n == 0 or n * d_v > MAX_ELEMENTS:
        raise FormatError(f"declared shape ({n_p}, {n_c}, {d_v}) outside container limits", 6)
    try:
        idx = unpack_side_info(stream.side_info, n, bank.n_e)
    except InvalidArgumentError as exc:
        raise DecodeError(str(exc)) from exc
    try:
        return _decode_streams(stream, bank, idx)
    except TofcError:
        raise
    except (ValueError, IndexError, OverflowError) as exc:
        raise DecodeError(f"corrupt entropy-coded stream: {exc}") from exc


def _checked(symbol):
    if abs(symbol) > SYMBOL_MAX:
        raise DecodeError(f"decoded symbol {symbol} outside the coded range")
    return symbol


def _decode_streams(stream, bank, idx):
    n_p, n_c, d_v = stream.n_p, stream.n_c, stream.d_v
    n = idx.size
    dec = RangeDecoder(stream.hyper)
    zs = np.zeros((n, bank.d_z), dtype=np.int32)
    for i in range(n):
        tables = factorized_tables(bank.models[idx[i]])
        zs[i] = [_checked(dec.decode_symbol(t)) for t in tables]

    mu = np.zeros((n, d_v), dtype=np.float32)
    b = np.zeros((n, d_v), dtype=np.float32)
    for e in np.unique(idx):
        rows = np.flatnonzero(idx == e)
        mu[rows], b[rows] = bank.models[e].stats_from_symbols(zs[rows])

    dec = RangeDecoder(stream.main)
    k = np.array([_checked(dec.decode_symbol(laplace_table(bv))) for bv in b.ravel().tolist()], dtype=np.int32)
    k = k.reshape(n, d_v)
    recon = np.zeros((n, d_v), dtype=np.float32)
    for e in np.unique(idx):
        rows = np.flatnonzero(idx == e)
        recon[rows] = bank.models[e].reconstruct(k[rows], mu[rows])
    return DecodedRequest(
        residuals=k.reshape(n_p, n_c, d_v),
        reconstruction=recon.reshape(n_p, n_c, d_v),
        hard_index=idx.reshape(n_p, n_c),
    )
