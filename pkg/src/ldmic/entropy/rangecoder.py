"""Byte-oriented range coder over 16-bit quantized CDF tables.

The coder is the carry-propagating variant (32-bit range, 64-bit low with a
pending-byte cache). Tables are rows of an int32 matrix holding cumulative
frequencies ``cdf[0] = 0 .. cdf[n] = 1 << PRECISION``; the last symbol of
every row is the escape symbol. Values outside a table's support are sent as
the escape symbol followed by an Exp-Golomb style code in bypass mode.

Heavy loops are compiled with numba; the Python classes only hold state so
that encoding and decoding can be interleaved with model evaluation (needed by
the auto-regressive context model).
"""

from __future__ import annotations

import numpy as np
from numba import njit

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = (1 << 32) - 1

# encoder state slots
_LOW, _RANGE, _CACHE, _CACHE_SIZE, _POS = 0, 1, 2, 3, 4
# decoder state slots
_CODE, _DRANGE, _DPOS, _ERR = 0, 1, 2, 3


class DecodeError(ValueError):
    """Raised when a byte stream cannot be decoded."""


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Turn probabilities into a cumulative frequency table summing to 2**16.

    Every symbol receives at least frequency 1, so no interval has zero width.
    ``pmf`` does not have to be normalized.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.shape[0]
    if n < 1 or n > TOTAL // 2:
        raise ValueError(f"alphabet size {n} not codable at {PRECISION}-bit precision")
    if np.any(~np.isfinite(pmf)) or np.any(pmf < 0):
        raise ValueError("pmf must be finite and non-negative")
    total = pmf.sum()
    if total <= 0:
        pmf = np.full(n, 1.0 / n)
    else:
        pmf = pmf / total
    freq = np.floor(pmf * (TOTAL - n)).astype(np.int64) + 1
    freq[int(np.argmax(freq))] += TOTAL - int(freq.sum())
    cdf = np.zeros(n + 1, dtype=np.int32)
    cdf[1:] = np.cumsum(freq)
    return cdf


def pack_tables(cdfs: list[np.ndarray], offsets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack variable-length CDFs into the (matrix, lengths, offsets) triple.

    ``offsets[i]`` is the value coded by index 0 of table ``i``; a table with
    ``n`` coded values has ``n + 2`` CDF entries (values plus escape).
    """
    width = max(len(c) for c in cdfs)
    mat = np.zeros((len(cdfs), width), dtype=np.int32)
    lengths = np.zeros(len(cdfs), dtype=np.int32)
    for i, c in enumerate(cdfs):
        c = np.asarray(c, dtype=np.int32)
        if c[0] != 0 or c[-1] != TOTAL or np.any(np.diff(c) <= 0):
            raise ValueError(f"table {i} is not a valid quantized CDF")
        mat[i, : len(c)] = c
        mat[i, len(c):] = TOTAL
        lengths[i] = len(c)
    return mat, lengths, np.asarray(offsets, dtype=np.int32)


@njit(cache=True)
def _shift_low(st, out):
    low = st[_LOW]
    if low < 0xFF000000 or low > _MASK32:
        carry = low >> 32
        temp = st[_CACHE]
        while True:
            out[st[_POS]] = (temp + carry) & 0xFF
            st[_POS] += 1
            temp = 0xFF
            st[_CACHE_SIZE] -= 1
            if st[_CACHE_SIZE] == 0:
                break
        st[_CACHE] = (low >> 24) & 0xFF
    st[_CACHE_SIZE] += 1
    st[_LOW] = (low & 0x00FFFFFF) << 8


@njit(cache=True)
def _enc_interval(st, out, start, freq, bits):
    r = st[_RANGE] >> bits
    st[_LOW] += r * start
    st[_RANGE] = r * freq
    while st[_RANGE] < _TOP:
        st[_RANGE] <<= 8
        _shift_low(st, out)


@njit(cache=True)
def _enc_bypass(st, out, value, nbits):
    # split into <= 16-bit chunks, most significant first
    while nbits > 0:
        take = nbits if nbits <= 16 else 16
        nbits -= take
        chunk = (value >> nbits) & ((1 << take) - 1)
        _enc_interval(st, out, chunk, 1, take)


@njit(cache=True)
def _bit_length(v):
    n = 0
    while v > 0:
        v >>= 1
        n += 1
    return n


@njit(cache=True)
def _encode_symbols(st, out, symbols, indexes, cdfs, lengths, offsets):
    n_escape = 0
    for i in range(symbols.shape[0]):
        t = indexes[i]
        n_sym = lengths[t] - 1  # includes escape
        v = symbols[i] - offsets[t]
        if 0 <= v < n_sym - 1:
            lo = cdfs[t, v]
            _enc_interval(st, out, lo, cdfs[t, v + 1] - lo, PRECISION)
        else:
            n_escape += 1
            lo = cdfs[t, n_sym - 1]
            _enc_interval(st, out, lo, TOTAL - lo, PRECISION)
            if v < 0:
                sign = 1
                mag = -v - 1
            else:
                sign = 0
                mag = v - (n_sym - 1)
            m1 = mag + 1
            nb = _bit_length(m1)
            _enc_bypass(st, out, sign, 1)
            _enc_bypass(st, out, nb - 1, 6)
            _enc_bypass(st, out, m1 & ((1 << (nb - 1)) - 1), nb - 1)
    return n_escape


@njit(cache=True)
def _next_byte(st, data):
    p = st[_DPOS]
    st[_DPOS] = p + 1
    if p < data.shape[0]:
        return np.int64(data[p])
    st[_ERR] = 1
    return np.int64(0)


@njit(cache=True)
def _dec_normalize(st, data):
    while st[_DRANGE] < _TOP:
        st[_CODE] = ((st[_CODE] << 8) | _next_byte(st, data)) & _MASK32
        st[_DRANGE] <<= 8


@njit(cache=True)
def _dec_bypass(st, data, nbits):
    value = np.int64(0)
    while nbits > 0:
        take = nbits if nbits <= 16 else 16
        nbits -= take
        r = st[_DRANGE] >> take
        chunk = st[_CODE] // r
        if chunk >= (1 << take):
            st[_ERR] = 2
            return value
        st[_CODE] -= chunk * r
        st[_DRANGE] = r
        _dec_normalize(st, data)
        value = (value << take) | chunk
    return value


@njit(cache=True)
def _decode_symbols(st, data, out, indexes, cdfs, lengths, offsets):
    for i in range(indexes.shape[0]):
        t = indexes[i]
        n_sym = lengths[t] - 1
        r = st[_DRANGE] >> PRECISION
        target = st[_CODE] // r
        if target >= TOTAL:
            st[_ERR] = 2
            return i
        # binary search for the symbol whose interval holds target
        lo_i = 0
        hi_i = n_sym
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) >> 1
            if cdfs[t, mid] <= target:
                lo_i = mid
            else:
                hi_i = mid
        lo = cdfs[t, lo_i]
        st[_CODE] -= r * lo
        st[_DRANGE] = r * (cdfs[t, lo_i + 1] - lo)
        _dec_normalize(st, data)
        if lo_i < n_sym - 1:
            out[i] = lo_i + offsets[t]
        else:
            sign = _dec_bypass(st, data, 1)
            nb = _dec_bypass(st, data, 6) + 1
            if nb > 40:
                st[_ERR] = 2
                return i
            m1 = (np.int64(1) << (nb - 1)) | _dec_bypass(st, data, nb - 1)
            mag = m1 - 1
            if sign == 1:
                out[i] = offsets[t] - 1 - mag
            else:
                out[i] = offsets[t] + (n_sym - 1) + mag
        if st[_ERR] != 0:
            return i
    return indexes.shape[0]


class RangeEncoder:
    """Incremental encoder; call :meth:`encode` any number of times, then :meth:`finish`."""

    def __init__(self, capacity: int = 1024):
        self._state = np.array([0, _MASK32, 0, 1, 0], dtype=np.int64)
        self._out = np.zeros(max(capacity, 64), dtype=np.uint8)
        self.escapes = 0
        self.count = 0

    def _reserve(self, n_symbols: int):
        # worst case per symbol: 16 + 1 + 6 + 40 bits, rounded up generously
        need = int(self._state[_POS]) + 16 * n_symbols + 64
        if need > self._out.shape[0]:
            grown = np.zeros(max(need, 2 * self._out.shape[0]), dtype=np.uint8)
            grown[: self._out.shape[0]] = self._out
            self._out = grown

    def encode(self, symbols, indexes, tables) -> None:
        cdfs, lengths, offsets = tables
        symbols = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
        indexes = np.ascontiguousarray(indexes, dtype=np.int64).ravel()
        if symbols.shape != indexes.shape:
            raise ValueError("symbols and table indexes must have the same size")
        if indexes.size and (indexes.min() < 0 or indexes.max() >= cdfs.shape[0]):
            raise ValueError("table index out of range")
        self._reserve(symbols.size)
        self.escapes += int(_encode_symbols(self._state, self._out, symbols, indexes,
                                            cdfs, lengths, offsets))
        self.count += symbols.size

    def finish(self) -> bytes:
        self._reserve(8)
        for _ in range(5):
            _shift_low(self._state, self._out)
        return self._out[: self._state[_POS]].tobytes()


class RangeDecoder:
    """Incremental decoder mirroring :class:`RangeEncoder`."""

    def __init__(self, data: bytes):
        self._data = np.frombuffer(bytes(data), dtype=np.uint8)
        if self._data.shape[0] < 5:
            raise DecodeError(f"stream too short ({self._data.shape[0]} bytes)")
        self._state = np.array([0, _MASK32, 0, 0], dtype=np.int64)
        for _ in range(5):
            self._state[_CODE] = ((self._state[_CODE] << 8) | int(self._data[self._state[_DPOS]])) & _MASK32
            self._state[_DPOS] += 1
        self.count = 0

    def decode(self, indexes, tables) -> np.ndarray:
        cdfs, lengths, offsets = tables
        indexes = np.ascontiguousarray(indexes, dtype=np.int64).ravel()
        out = np.zeros(indexes.shape[0], dtype=np.int64)
        done = _decode_symbols(self._state, self._data, out, indexes, cdfs, lengths, offsets)
        if self._state[_ERR] != 0:
            raise DecodeError(
                f"corrupt stream at symbol {self.count + done} "
                f"(byte {min(int(self._state[_DPOS]), self._data.shape[0])})"
            )
        self.count += indexes.shape[0]
        return out

    def finish(self) -> None:
        """Check that the whole stream was consumed."""
        if int(self._state[_DPOS]) != self._data.shape[0]:
            raise DecodeError(
                f"stream has {self._data.shape[0] - int(self._state[_DPOS])} trailing bytes"
            )


def encode(symbols, indexes, tables) -> bytes:
    enc = RangeEncoder(capacity=2 * len(np.ravel(symbols)) + 64)
    enc.encode(symbols, indexes, tables)
    return enc.finish()


def decode(data: bytes, indexes, tables) -> np.ndarray:
    dec = RangeDecoder(data)
    out = dec.decode(indexes, tables)
    dec.finish()
    return out


def ideal_bits(symbols, indexes, tables) -> float:
    """Information content of ``symbols`` under the quantized tables (escape payload included)."""
    cdfs, lengths, offsets = tables
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    indexes = np.asarray(indexes, dtype=np.int64).ravel()
    n_sym = lengths[indexes] - 1
    v = symbols - offsets[indexes]
    inside = (v >= 0) & (v < n_sym - 1)
    pos = np.where(inside, v, n_sym - 1)
    freq = cdfs[indexes, pos + 1].astype(np.int64) - cdfs[indexes, pos]
    bits = float(np.sum(PRECISION - np.log2(freq)))
    if np.any(~inside):
        mag = np.where(v < 0, -v - 1, v - (n_sym - 1))[~inside]
        nb = np.floor(np.log2(mag + 1)).astype(np.int64) + 1
        bits += float(np.sum(1 + 6 + nb - 1))
    return bits
