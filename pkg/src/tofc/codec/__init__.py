"""Range coding and the TOFC request container."""

from .container import (
    HEADER_BITS,
    HEADER_BYTES,
    DecodedRequest,
    EncodedRequest,
    TofcBitstream,
    compress_request,
    decode_request,
    encode_request,
    fnv1a64,
)
from .rangecoder import RangeDecoder, RangeEncoder
from .tables import CdfTable, build_table, factorized_tables, laplace_half_width, laplace_table

__all__ = [
    "HEADER_BITS",
    "HEADER_BYTES",
    "CdfTable",
    "DecodedRequest",
    "EncodedRequest",
    "RangeDecoder",
    "RangeEncoder",
    "TofcBitstream",
    "build_table",
    "compress_request",
    "decode_request",
    "encode_request",
    "factorized_tables",
    "fnv1a64",
    "laplace_half_width",
    "laplace_table",
]
