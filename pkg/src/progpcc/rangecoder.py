"""Byte-wise range coder with carry propagation.

32-bit low/range registers, 16-bit frequency precision (total = 65536).
Renormalization emits one byte whenever range drops below 2^24; a pending
run of 0xFF bytes absorbs carries out of the 32-bit window. The flush picks
the coarsest value inside the final interval so trailing zero bytes can be
dropped; the decoder zero-pads past the end of the stream, which also means
an empty symbol list encodes to zero bytes.
"""

from __future__ import annotations

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS


class CorruptStreamError(ValueError):
    """Decoding fell outside the live interval; the stream is damaged."""


class RangeEncoder:
    def __init__(self) -> None:
        self._low = 0
        self._range = _MASK32
        self._cache: int | None = None
        self._ff = 0
        self._out = bytearray()
        self._done = False

    def encode(self, cum: int, freq: int) -> None:
        """Narrow the interval to [cum, cum+freq) / TOTAL."""
        if freq <= 0 or cum < 0 or cum + freq > TOTAL:
            raise ValueError("invalid cumulative/frequency pair")
        r = self._range // TOTAL
        self._low += r * cum
        self._range = r * freq
        while self._range < _TOP:
            self._shift_low()
            self._range = (self._range << 8) & _MASK32

    def encode_bypass_byte(self, byte: int) -> None:
        """Code one byte at uniform probability (freq 256 of 65536)."""
        self.encode((byte & 0xFF) << 8, 1 << 8)

    def _shift_low(self) -> None:
        if self._low < 0xFF000000 or self._low > _MASK32:
            carry = self._low >> 32
            if self._cache is not None:
                self._out.append((self._cache + carry) & 0xFF)
            while self._ff:
                self._out.append((0xFF + carry) & 0xFF)
                self._ff -= 1
            self._cache = (self._low >> 24) & 0xFF
        else:
            self._ff += 1
        self._low = (self._low << 8) & _MASK32

    def finish(self) -> bytes:
        """Flush the interval and return the stream."""
        if self._done:
            raise RuntimeError("finish() called twice")
        self._done = True
        # Coarsest value in [low, low+range): its binary tail is all zeros,
        # so after emission the trailing zero bytes can be trimmed away.
        value = self._low
        for k in range(32, -1, -1):
            step = 1 << k
            cand = (self._low + step - 1) // step * step
            if cand < self._low + self._range:
                value = cand
                break
        self._low = value
        for _ in range(5):
            carry = self._low >> 32
            if self._cache is not None:
                self._out.append((self._cache + carry) & 0xFF)
            while self._ff:
                self._out.append((0xFF + carry) & 0xFF)
                self._ff -= 1
            self._cache = (self._low >> 24) & 0xFF
            self._low = (self._low << 8) & _MASK32
        if self._cache is not None:
            self._out.append(self._cache)
        while self._out and self._out[-1] == 0:
            self._out.pop()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self._data = bytes(data)
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        for _ in range(4):
            self._code = (self._code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos < len(self._data):
            b = self._data[self._pos]
            self._pos += 1
            return b
        return 0  # implicit zero tail matches the encoder's trimmed flush

    def decode_target(self) -> int:
        """Cumulative-frequency position of the next symbol in [0, TOTAL)."""
        r = self._range // TOTAL
        target = self._code // r
        if target >= TOTAL:
            raise CorruptStreamError("target outside the code space")
        return target

    def consume(self, cum: int, freq: int) -> None:
        """Remove the decoded symbol's interval, mirroring encode()."""
        r = self._range // TOTAL
        if self._code < r * cum:
            raise CorruptStreamError("code fell below the symbol interval")
        self._code -= r * cum
        self._range = r * freq
        while self._range < _TOP:
            self._code = ((self._code << 8) | self._next_byte()) & ((1 << 40) - 1)
            self._range = (self._range << 8) & _MASK32
            if self._code > _MASK32:
                raise CorruptStreamError("code overflowed the 32-bit window")

    def decode_bypass_byte(self) -> int:
        byte = self.decode_target() >> 8
        self.consume(byte << 8, 1 << 8)
        return byte
