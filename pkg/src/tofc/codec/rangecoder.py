"""32-bit range coder with 16-bit frequency tables.

The encoder propagates carries through a cached byte and a run of pending
0xFF bytes. ``finish`` picks the value in the final interval with the most
trailing zero bytes and drops those bytes; the decoder reads zeros past the
end of its buffer, so nothing is lost.
"""

from bisect import bisect_right

from ..errors import DecodeError
from .tables import PRECISION, TOTAL

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_MAX_GOLOMB_PREFIX = 40


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = None
        self._pending = 0
        self._out = bytearray()
        self._done = False

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            if self._cache is not None:
                self._out.append((self._cache + carry) & 0xFF)
            for _ in range(self._pending):
                self._out.append((0xFF + carry) & 0xFF)
            self._pending = 0
            self._cache = (self.low >> 24) & 0xFF
        else:
            self._pending += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum, freq):
        r = self.range >> PRECISION
        self.low += r * cum
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value, nbits):
        """Append ``nbits`` raw bits of ``value``, most significant first."""
        while nbits > 0:
            n = min(nbits, PRECISION)
            nbits -= n
            chunk = (value >> nbits) & ((1 << n) - 1)
            self.encode(chunk << (PRECISION - n), 1 << (PRECISION - n))

    def encode_exp_golomb(self, value, order):
        # prefix goes out bit by bit because the decoder reads it that way
        q = (value >> order) + 1
        width = q.bit_length()
        for _ in range(width - 1):
            self.encode_bits(0, 1)
        self.encode_bits(1, 1)
        self.encode_bits(q & ((1 << (width - 1)) - 1), width - 1)
        self.encode_bits(value & ((1 << order) - 1), order)

    def encode_symbol(self, table, symbol):
        """Code ``symbol`` with ``table``; out-of-window symbols use the escape path."""
        i = table.index_of(symbol)
        self.encode(table.cum_list[i], table.freq_list[i])
        if table.escape and i == table.escape_index:
            below = symbol < table.offset
            excess = table.offset - 1 - symbol if below else symbol - (table.offset + table.window)
            self.encode_bits(int(below), 1)
            self.encode_exp_golomb(int(excess), table.golomb_order)

    def finish(self):
        if self._done:
            return bytes(self._out)
        for nbytes in range(5):
            step = 1 << (32 - 8 * nbytes)
            v = -(-self.low // step) * step
            if v < self.low + self.range:
                self.low = v
                break
        for _ in range(5):
            self._shift_low()
        self._done = True
        end = len(self._out)
        while end and self._out[end - 1] == 0:
            end -= 1
        del self._out[end:]
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        self._r = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self):
        pos = self.pos
        self.pos += 1
        return self.data[pos] if pos < len(self.data) else 0

    def decode_freq(self):
        self._r = self.range >> PRECISION
        value = self.code // self._r
        if value >= TOTAL:
            raise DecodeError("range decoder state out of bounds (corrupt stream)")
        return value

    def consume(self, cum, freq):
        self.code -= self._r * cum
        self.range = self._r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8

    def decode_bits(self, nbits):
        value = 0
        while nbits > 0:
            n = min(nbits, PRECISION)
            nbits -= n
            shift = PRECISION - n
            chunk = self.decode_freq() >> shift
            self.consume(chunk << shift, 1 << shift)
            value = (value << n) | chunk
        return value

    def decode_exp_golomb(self, order):
        zeros = 0
        while self.decode_bits(1) == 0:
            zeros += 1
            if zeros > _MAX_GOLOMB_PREFIX:
                raise DecodeError("escape code prefix too long (corrupt stream)")
        q = (1 << zeros) | self.decode_bits(zeros)
        return ((q - 1) << order) | self.decode_bits(order)

    def decode_symbol(self, table):
        value = self.decode_freq()
        lo = bisect_right(table.cum_list, value) - 1
        self.consume(table.cum_list[lo], table.freq_list[lo])
        if table.escape and lo == table.escape_index:
            below = self.decode_bits(1)
            excess = self.decode_exp_golomb(table.golomb_order)
            return table.offset - 1 - excess if below else table.offset + table.window + excess
        return table.offset + lo
