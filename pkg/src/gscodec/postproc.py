"""Post-processing codecs: 8-bit min-max quantization, hash pruning, canonical Huffman, bit packing."""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numba
import numpy as np

MAX_CODE_LENGTH = 32


class CorruptStreamError(ValueError):
    """A compressed stream is truncated or internally inconsistent."""


# --- min-max quantization ----------------------------------------------------

@dataclass
class QuantizedTensor:
    symbols: np.ndarray  # uint8
    min: float
    max: float

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.uint8).reshape(-1)
        self.min = float(np.float32(self.min))
        self.max = float(np.float32(self.max))
        if not self.min <= self.max:
            raise ValueError("quantization range has min > max")

    def __len__(self):
        return len(self.symbols)

    @property
    def step(self) -> float:
        return (self.max - self.min) / 255.0

    def to_bytes(self, entropy_code: bool = True) -> bytes:
        """f32 min, f32 max, u64 count, u8 flag (0 raw, 1 Huffman), payload."""
        head = struct.pack("<ffQ", self.min, self.max, len(self.symbols))
        raw = self.symbols.tobytes()
        if entropy_code:
            coded = huffman_encode(self.symbols).to_bytes()
            if len(coded) < len(raw):
                return head + b"\x01" + coded
        return head + b"\x00" + raw

    @classmethod
    def from_bytes(cls, data) -> "QuantizedTensor":
        data = bytes(data)
        if len(data) < 17:
            raise CorruptStreamError("quantized tensor header truncated")
        mn, mx, n = struct.unpack_from("<ffQ", data)
        flag = data[16]
        body = data[17:]
        if flag == 1:
            symbols = huffman_decode(HuffmanBlob.from_bytes(body))
        elif flag == 0:
            symbols = np.frombuffer(body, dtype=np.uint8)
        else:
            raise CorruptStreamError(f"unknown payload flag {flag}")
        if len(symbols) != n:
            raise CorruptStreamError(f"expected {n} quantized symbols, found {len(symbols)}")
        return cls(symbols.copy(), mn, mx)


def _range_f32(x):
    """float32 bounds enclosing [x.min(), x.max()]."""
    lo, hi = float(x.min()), float(x.max())
    lo32, hi32 = np.float32(lo), np.float32(hi)
    if float(lo32) > lo:
        lo32 = np.nextafter(lo32, np.float32(-np.inf))
    if float(hi32) < hi:
        hi32 = np.nextafter(hi32, np.float32(np.inf))
    return float(lo32), float(hi32)


def quantize_u8(values) -> QuantizedTensor:
    """q = round(255 (x - min) / (max - min)), rounding half away from zero."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    # the range is stored in f32; magnitudes below its normal range would give a degenerate step
    x = np.where(np.abs(x) < np.finfo(np.float32).tiny, 0.0, x)
    mn, mx = _range_f32(x)
    if mx == mn:
        return QuantizedTensor(np.zeros(x.size, dtype=np.uint8), mn, mx)
    t = 255.0 * (x - mn) / (mx - mn)
    q = np.floor(t + 0.5)
    return QuantizedTensor(np.clip(q, 0, 255).astype(np.uint8), mn, mx)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    return qt.min + qt.symbols.astype(np.float64) / 255.0 * (qt.max - qt.min)


# --- hash pruning ------------------------------------------------------------

@dataclass
class SparseTable:
    shape: tuple
    bitmap: np.ndarray  # bool, flat, True = kept
    values: np.ndarray  # survivors in flat order

    def dense(self) -> np.ndarray:
        out = np.zeros(int(np.prod(self.shape)), dtype=np.float64)
        out[self.bitmap] = self.values
        return out.reshape(self.shape)

    @property
    def packed_bitmap(self) -> bytes:
        return np.packbits(self.bitmap.astype(np.uint8)).tobytes()


def prune_hash(table, threshold: float = 0.1) -> SparseTable:
    """Drop parameters with |value| < threshold; a bitmap records the survivors."""
    t = np.asarray(table, dtype=np.float64)
    flat = t.reshape(-1)
    keep = np.abs(flat) >= threshold
    return SparseTable(t.shape, keep, flat[keep])


# --- canonical Huffman -------------------------------------------------------

@dataclass
class HuffmanBlob:
    lengths: np.ndarray  # (256,) uint8 code lengths, 0 = unused symbol
    count: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return self.lengths.astype(np.uint8).tobytes() + struct.pack("<Q", self.count) + self.payload

    @classmethod
    def from_bytes(cls, data) -> "HuffmanBlob":
        data = bytes(data)
        if len(data) < 264:
            raise CorruptStreamError("Huffman header truncated")
        lengths = np.frombuffer(data[:256], dtype=np.uint8).copy()
        (count,) = struct.unpack_from("<Q", data, 256)
        return cls(lengths, count, data[264:])


def _code_lengths(freq: np.ndarray) -> np.ndarray:
    """Huffman code lengths for 256 symbol frequencies, capped at MAX_CODE_LENGTH."""
    lengths = np.zeros(256, dtype=np.int64)
    used = np.flatnonzero(freq)
    if len(used) == 0:
        return lengths
    if len(used) == 1:
        lengths[used[0]] = 1
        return lengths
    f = freq.astype(np.int64).copy()
    while True:
        heap = [(int(f[s]), int(s), (int(s),)) for s in used]
        heapq.heapify(heap)
        depth = np.zeros(256, dtype=np.int64)
        tie = 256
        while len(heap) > 1:
            fa, _, a = heapq.heappop(heap)
            fb, _, b = heapq.heappop(heap)
            for s in a + b:
                depth[s] += 1
            heapq.heappush(heap, (fa + fb, tie, a + b))
            tie += 1
        if depth.max() <= MAX_CODE_LENGTH:
            return depth
        f[used] = np.maximum(f[used] // 2, 1)


def _canonical_codes(lengths: np.ndarray) -> np.ndarray:
    codes = np.zeros(256, dtype=np.uint64)
    code = 0
    prev = 0
    for s in sorted((s for s in range(256) if lengths[s]), key=lambda s: (lengths[s], s)):
        code <<= int(lengths[s]) - prev
        prev = int(lengths[s])
        codes[s] = code
        code += 1
    return codes


@numba.njit(cache=True)
def _pack_codes(symbols, codes, lengths, nbytes):
    out = np.zeros(nbytes, dtype=np.uint8)
    bit = 0
    for i in range(symbols.shape[0]):
        s = symbols[i]
        ln = lengths[s]
        c = codes[s]
        for k in range(ln - 1, -1, -1):
            if (c >> np.uint64(k)) & np.uint64(1):
                out[bit >> 3] |= np.uint8(0x80 >> (bit & 7))
            bit += 1
    return out


@numba.njit(cache=True)
def _unpack_codes(payload, count, first, counts, offsets, sorted_syms, maxlen):
    out = np.empty(count, dtype=np.uint8)
    total_bits = payload.shape[0] * 8
    bit = 0
    for i in range(count):
        code = 0
        ln = 0
        while True:
            if bit >= total_bits:
                return out, i
            code = (code << 1) | ((payload[bit >> 3] >> (7 - (bit & 7))) & 1)
            bit += 1
            ln += 1
            if ln > maxlen:
                return out, -1 - i
            delta = code - first[ln]
            if delta >= 0 and delta < counts[ln]:
                out[i] = sorted_syms[offsets[ln] + delta]
                break
    return out, count


def huffman_encode(symbols) -> HuffmanBlob:
    s = np.asarray(symbols)
    if s.size and (s.min() < 0 or s.max() > 255):
        raise ValueError("Huffman symbols must be 8-bit")
    s = s.astype(np.uint8).reshape(-1)
    freq = np.bincount(s, minlength=256)
    lengths = _code_lengths(freq)
    codes = _canonical_codes(lengths)
    nbits = int(np.sum(freq * lengths))
    payload = _pack_codes(s, codes, lengths, (nbits + 7) // 8)
    return HuffmanBlob(lengths.astype(np.uint8), int(s.size), payload.tobytes())


def huffman_decode(blob: HuffmanBlob) -> np.ndarray:
    lengths = blob.lengths.astype(np.int64)
    if blob.count == 0:
        return np.zeros(0, dtype=np.uint8)
    if lengths.max() == 0 or lengths.max() > MAX_CODE_LENGTH:
        raise CorruptStreamError("invalid Huffman code-length table")
    kraft = sum(2.0 ** -int(ln) for ln in lengths if ln)
    if kraft > 1.0:
        raise CorruptStreamError("code lengths violate the Kraft inequality")
    maxlen = int(lengths.max())
    order = sorted((s for s in range(256) if lengths[s]), key=lambda s: (lengths[s], s))
    counts = np.zeros(maxlen + 1, dtype=np.int64)
    for s in order:
        counts[lengths[s]] += 1
    first = np.zeros(maxlen + 1, dtype=np.int64)
    offsets = np.zeros(maxlen + 1, dtype=np.int64)
    code = 0
    pos = 0
    for ln in range(1, maxlen + 1):
        code <<= 1
        first[ln] = code
        offsets[ln] = pos
        code += counts[ln]
        pos += counts[ln]
    payload = np.frombuffer(blob.payload, dtype=np.uint8)
    out, got = _unpack_codes(payload, blob.count, first, counts, offsets, np.array(order, dtype=np.uint8), maxlen)
    if got < 0:
        raise CorruptStreamError(f"invalid code word at symbol {-1 - got}")
    if got != blob.count:
        raise CorruptStreamError(f"payload exhausted after {got} of {blob.count} symbols")
    return out


# --- bit packing -------------------------------------------------------------

def bitpack(indices, bits: int) -> bytes:
    """MSB-first packing of non-negative integers at a fixed width."""
    if not 1 <= bits <= 32:
        raise ValueError("bits per symbol must be in [1, 32]")
    v = np.asarray(indices, dtype=np.int64).reshape(-1)
    if v.size and (v.min() < 0 or v.max() >= (1 << bits)):
        raise OverflowError(f"index does not fit in {bits} bits")
    shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
    mat = ((v[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(mat.reshape(-1)).tobytes()


def bitunpack(data, bits: int, count: int) -> np.ndarray:
    need = (count * bits + 7) // 8
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    if len(buf) < need:
        raise CorruptStreamError(f"bit-packed stream needs {need} bytes, got {len(buf)}")
    flat = np.unpackbits(buf[:need])[: count * bits].reshape(count, bits).astype(np.int64)
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    return flat @ weights


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8
