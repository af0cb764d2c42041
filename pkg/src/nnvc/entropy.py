"""Byte-oriented range coder driven by 16-bit fixed-point CDF tables.

The coder keeps a 32-bit ``range`` and a ``low`` register with one carry bit,
renormalizing a byte at a time whenever ``range`` drops below 2**24. All
arithmetic is on Python integers, so the produced bytes are identical on every
platform.

A CDF table is a sequence of ``alphabet + 1`` non-decreasing integers starting
at 0 and ending at ``2**PRECISION``; symbol ``s`` owns ``[cdf[s], cdf[s+1])``.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
# bytes the decoder may read past the end of a trimmed stream
_MAX_OVERREAD = 5

CdfProvider = Callable[[int], Sequence[int]]


class EntropyCodingError(ValueError):
    """Raised on malformed CDFs, out-of-alphabet symbols or corrupt streams."""


@dataclass(frozen=True)
class CodedStream:
    data: bytes
    num_symbols: int


def check_cdf(cdf: Sequence[int]) -> None:
    if len(cdf) < 2:
        raise EntropyCodingError("CDF needs at least one symbol")
    if cdf[0] != 0 or cdf[-1] != TOTAL:
        raise EntropyCodingError(f"CDF must span [0, {TOTAL}], got [{cdf[0]}, {cdf[-1]}]")
    for a, b in zip(cdf[:-1], cdf[1:]):
        if b <= a:
            raise EntropyCodingError("CDF must be strictly increasing")


def pmf_to_cdf(pmf: np.ndarray) -> np.ndarray:
    """Quantize probability rows to integer CDFs with every count >= 1.

    ``pmf`` has shape ``(..., alphabet)``; the result has shape
    ``(..., alphabet + 1)`` and dtype int64. Purely integer after the initial
    floor, so the mapping is deterministic for identical float inputs.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.shape[-1]
    if n > TOTAL:
        raise EntropyCodingError("alphabet larger than the probability precision")
    spare = TOTAL - n
    counts = np.floor(pmf * spare).astype(np.int64) + 1
    deficit = TOTAL - counts.sum(axis=-1)
    # hand leftover mass to the most probable symbol
    idx = np.argmax(counts, axis=-1)
    np.put_along_axis(
        counts, idx[..., None], np.take_along_axis(counts, idx[..., None], -1) + deficit[..., None], -1
    )
    cdf = np.zeros(pmf.shape[:-1] + (n + 1,), dtype=np.int64)
    np.cumsum(counts, axis=-1, out=cdf[..., 1:])
    return cdf


class RangeEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = _MASK32
        self._out = bytearray()
        self._cache = 0
        self._has_cache = False
        self._pending = 0
        self.num_symbols = 0

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            if self._has_cache:
                self._out.append((self._cache + carry) & 0xFF)
            for _ in range(self._pending):
                self._out.append((0xFF + carry) & 0xFF)
            self._pending = 0
            self._cache = (self.low >> 24) & 0xFF
            self._has_cache = True
        else:
            self._pending += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, symbol: int, cdf: Sequence[int]) -> None:
        if not 0 <= symbol < len(cdf) - 1:
            raise EntropyCodingError(f"symbol {symbol} outside alphabet of size {len(cdf) - 1}")
        start = int(cdf[symbol])
        size = int(cdf[symbol + 1]) - start
        if size <= 0:
            raise EntropyCodingError(f"symbol {symbol} has zero probability")
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()
        self.num_symbols += 1

    def finish(self) -> bytes:
        # Pick the value in [low, low + range) with the most trailing zero bits;
        # zeros are implied by the decoder reading past the end.
        high = self.low + self.range
        value = self.low
        for shift in (32, 24, 16, 8):
            step = 1 << shift
            candidate = -(-self.low // step) * step
            if candidate < high:
                value = candidate
                break
        self.low = value
        for _ in range(5):
            self._shift_low()
        out = bytes(self._out)
        # only the flushed tail may be trimmed
        keep = len(out) - 5
        tail = out[keep:].rstrip(b"\x00")
        return out[:keep] + tail


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        pos = self._pos
        self._pos += 1
        if pos < len(self._data):
            return self._data[pos]
        if pos >= len(self._data) + _MAX_OVERREAD:
            raise EntropyCodingError("stream truncated")
        return 0

    def decode(self, cdf: Sequence[int]) -> int:
        r = self.range >> PRECISION
        target = min(self.code // r, TOTAL - 1)
        symbol = bisect_right(cdf, target) - 1
        symbol = min(max(symbol, 0), len(cdf) - 2)
        start = int(cdf[symbol])
        self.code -= r * start
        self.range = r * (int(cdf[symbol + 1]) - start)
        if self.code < 0 or self.code >= self.range:
            raise EntropyCodingError("corrupt stream: code value left the coding interval")
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range <<= 8
        return symbol

    def verify_consumed(self) -> None:
        """Check that decoding ended exactly where the encoder's flush did."""
        # a valid decode reads every byte the encoder wrote, trimmed zeros included
        if self._pos < len(self._data):
            raise EntropyCodingError(
                f"{len(self._data) - self._pos} trailing bytes left after decoding"
            )


def encode_symbols(symbols: Sequence[int], cdf_provider: CdfProvider, validate: bool = True) -> CodedStream:
    """Arithmetic-code ``symbols``; ``cdf_provider(i)`` returns the table for symbol ``i``."""
    enc = RangeEncoder()
    for i, s in enumerate(symbols):
        cdf = cdf_provider(i)
        if validate:
            check_cdf(cdf)
        enc.encode(int(s), cdf)
    return CodedStream(enc.finish(), len(symbols))


def decode_symbols(stream: CodedStream | bytes, cdf_provider: CdfProvider, num_symbols: int | None = None) -> list[int]:
    """Inverse of :func:`encode_symbols` given the same causal CDF sequence."""
    if isinstance(stream, CodedStream):
        data, n = stream.data, stream.num_symbols
    else:
        data, n = stream, num_symbols
    if n is None:
        raise EntropyCodingError("symbol count required")
    dec = RangeDecoder(data)
    out = []
    for i in range(n):
        out.append(dec.decode(cdf_provider(i)))
    dec.verify_consumed()
    return out


def cross_entropy_bits(symbols: Sequence[int], cdf_provider: CdfProvider) -> float:
    """Ideal code length of ``symbols`` under the quantized CDF sequence."""
    bits = 0.0
    for i, s in enumerate(symbols):
        cdf = cdf_provider(i)
        bits -= np.log2((int(cdf[s + 1]) - int(cdf[s])) / TOTAL)
    return bits
