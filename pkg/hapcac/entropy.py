"""
Entropy coding: discretised Laplace tables, the range coder, raw unit
packing and the bitstream container.

The range coder is the carry-propagating kind (low kept on 33 bits, a cache
byte plus a run of pending 0xFF bytes) with 32-bit range and 16-bit
frequencies. Subinterval bounds are (range * cum) >> 16.
tests/data/range_golden.txt pins its output; any change there is a format
version bump.
"""

import logging
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .lod import LodParams
from .model import b_grid
from .neighborhood import PRED_SCALE, NeighborhoodParams
from .pointcloud import AttributeKind
from .utilities import ConfigError, FormatError, IntegrityError

LOG = logging.getLogger(__name__)

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS
MAX_ALPHABET = 1 << 12

RANGE_TOP = 1 << 24
RANGE_MASK = 0xFFFFFFFF
FLUSH_BYTES = 5


##
# Frequency tables
##


@dataclass(frozen=True)
class QuantizedDistribution:
    """
    Integer frequencies over symbols 0..size-1, summing to 2^16, none zero.
    """

    freq: np.ndarray
    cum: np.ndarray = field(repr=False)

    @classmethod
    def from_freq(cls, freq):
        freq = np.asarray(freq, dtype=np.int64)
        if freq.ndim != 1 or len(freq) == 0:
            raise ValueError("A distribution needs a non-empty alphabet.")
        if np.any(freq < 1) or int(freq.sum()) != PROB_TOTAL:
            raise ValueError("Frequencies must be positive and sum to {}.".format(PROB_TOTAL))
        cum = np.zeros(len(freq) + 1, dtype=np.int64)
        np.cumsum(freq, out=cum[1:])
        return cls(freq, cum)

    @classmethod
    def uniform(cls, size):
        if not 1 <= size <= PROB_TOTAL:
            raise ValueError("Alphabet size {} is out of range.".format(size))
        freq = np.full(size, PROB_TOTAL // size, dtype=np.int64)
        freq[: PROB_TOTAL - int(freq.sum())] += 1
        return cls.from_freq(freq)

    @property
    def size(self):
        return len(self.freq)

    def bits(self, symbol):
        """
        Ideal code length of `symbol` under this table.
        """
        return PROB_BITS - float(np.log2(self.freq[symbol]))

    def lookup(self, value):
        """
        Symbol whose cumulative interval contains `value`.
        """
        return int(np.searchsorted(self.cum, value, side="right")) - 1


def laplace_bin_masses(mu, b, size):
    """
    Laplace(mu, b) mass of [v - 1/2, v + 1/2) for v in 0..size-1, with the
    tails folded into the first and last symbol.

    Each bin is computed from the side of mu it lies on (CDF left, survival
    function right) so small masses keep their relative precision.
    """
    if size < 1:
        raise ValueError("A distribution needs a non-empty alphabet.")
    v = np.arange(size, dtype=np.float64)
    lo = v - 0.5
    hi = v + 0.5
    lo[0] = -np.inf
    hi[-1] = np.inf

    def cdf_left(y):
        return 0.5 * np.exp(np.minimum(y - mu, 0.0) / b)

    def survival_right(y):
        return 0.5 * np.exp(-np.maximum(y - mu, 0.0) / b)

    left = cdf_left(hi) - cdf_left(lo)
    right = survival_right(lo) - survival_right(hi)
    center = 1.0 - cdf_left(lo) - survival_right(hi)
    return np.where(hi <= mu, left, np.where(lo >= mu, right, center))


def freq_from_masses(masses):
    """
    Scale masses to a 2^16 total: one guaranteed unit per symbol, the rest
    shared by largest remainder with ties to the lower symbol.
    """
    masses = np.asarray(masses, dtype=np.float64)
    size = len(masses)
    budget = PROB_TOTAL - size
    if budget < 0:
        raise ValueError("Alphabet of {} symbols does not fit 16-bit tables.".format(size))

    scaled = masses / masses.sum() * budget
    base = np.floor(scaled).astype(np.int64)
    extra = budget - int(base.sum())
    if extra > 0:
        fraction = scaled - base
        winners = np.lexsort((np.arange(size), -fraction))[:extra]
        base[winners] += 1
    return base + 1


@lru_cache(maxsize=1 << 16)
def quantize_laplace(mu64, b_index, size):
    """
    Frequency table for quantized Laplace parameters over 0..size-1.

    A pure function of its integer arguments, hence cached and identical
    on both coder sides.
    """
    mu = mu64 / PRED_SCALE
    b = float(b_grid(size)[b_index])
    return QuantizedDistribution.from_freq(freq_from_masses(laplace_bin_masses(mu, b, size)))


##
# Range coder
##


def _subrange(range_, dist, symbol):
    """
    Exact split of the current range: the bounds are (range * cum) >> 16,
    so the last symbol takes what truncation leaves over.
    """
    lo = (range_ * int(dist.cum[symbol])) >> PROB_BITS
    hi = (range_ * int(dist.cum[symbol + 1])) >> PROB_BITS
    return lo, hi


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = RANGE_MASK
        self.cache = 0
        self.cache_size = 1
        self.output = bytearray()
        self.symbols = 0

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > RANGE_MASK:
            carry = self.low >> 32
            byte = self.cache
            while self.cache_size:
                self.output.append((byte + carry) & 0xFF)
                byte = 0xFF
                self.cache_size -= 1
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, symbol, dist):
        if not 0 <= symbol < dist.size:
            raise ValueError("Symbol {} is outside the alphabet 0..{}.".format(symbol, dist.size - 1))
        lo, hi = _subrange(self.range, dist, symbol)
        self.low += lo
        self.range = hi - lo
        while self.range < RANGE_TOP:
            self.range <<= 8
            self._shift_low()
        self.symbols += 1

    def finish(self):
        for _ in range(FLUSH_BYTES):
            self._shift_low()
        return bytes(self.output)


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.position = 0
        self.range = RANGE_MASK
        self.code = 0
        for _ in range(FLUSH_BYTES):
            self.code = ((self.code << 8) | self._next_byte()) & RANGE_MASK

    def _next_byte(self):
        if self.position >= len(self.data):
            raise IntegrityError("Range payload exhausted before the last symbol.")
        byte = self.data[self.position]
        self.position += 1
        return byte

    @property
    def remaining(self):
        return len(self.data) - self.position

    def decode(self, dist):
        # largest cum[s] with (range * cum[s]) >> 16 <= code
        value = (((self.code + 1) << PROB_BITS) - 1) // self.range
        if value >= PROB_TOTAL:
            raise IntegrityError("Range decoder lost synchronisation.")
        symbol = dist.lookup(value)
        lo, hi = _subrange(self.range, dist, symbol)
        self.code -= lo
        self.range = hi - lo
        while self.range < RANGE_TOP:
            self.code = ((self.code << 8) | self._next_byte()) & RANGE_MASK
            self.range <<= 8
        return symbol


def range_encode(symbols, tables):
    if len(symbols) != len(tables):
        raise ValueError("Need exactly one table per symbol.")
    encoder = RangeEncoder()
    for symbol, dist in zip(symbols, tables):
        encoder.encode(int(symbol), dist)
    return encoder.finish()


def range_decode(payload, tables):
    decoder = RangeDecoder(payload)
    return [decoder.decode(dist) for dist in tables]


##
# Raw units
##


def raw_unit_size(n, channel_bits):
    return (n * sum(channel_bits) + 7) // 8


def encode_raw_unit(symbols, channel_bits):
    """
    Fixed-width, MSB-first bit packing; channels interleaved per point.
    """
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1, len(channel_bits))
    columns = []
    for c, bits in enumerate(channel_bits):
        values = symbols[:, c]
        if np.any(values < 0) or np.any(values >= 1 << bits):
            raise ValueError("Channel {} values do not fit {} bits.".format(c, bits))
        shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
        columns.append((values[:, None] >> shifts) & 1)
    packed = np.concatenate(columns, axis=1).astype(np.uint8).reshape(-1)
    return np.packbits(packed).tobytes()


def decode_raw_unit(data, n, channel_bits):
    width = sum(channel_bits)
    if len(data) != raw_unit_size(n, channel_bits):
        raise FormatError(
            "Raw block holds {} bytes, expected {}.".format(len(data), raw_unit_size(n, channel_bits))
        )
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[: n * width]
    bits = bits.reshape(n, width).astype(np.int64)

    out = np.empty((n, len(channel_bits)), dtype=np.int64)
    start = 0
    for c, size in enumerate(channel_bits):
        weights = 1 << np.arange(size - 1, -1, -1, dtype=np.int64)
        out[:, c] = bits[:, start : start + size] @ weights
        start += size
    return out


##
# Bitstream container
##

MAGIC = b"HAPC"
FORMAT_VERSION = 2

# magic, version, attribute kind, attribute bits, geom_bits, point count,
# n1, growth, max unit, max context, slice size, seed, random_first, K, K1, K2,
# baseline flag, checkpoint hash, slice count
_HEADER = struct.Struct("<4sHBBBIIIIIIQBHHHB32sI")
_SLICE = struct.Struct("<I8s")


@dataclass
class SliceEntry:
    length: int
    checksum: bytes


@dataclass
class BitstreamHeader:
    kind: AttributeKind
    attribute_bits: int
    geom_bits: int
    point_count: int
    lod: LodParams
    neighborhood: NeighborhoodParams
    baseline: bool
    checkpoint_hash: bytes = bytes(32)
    slices: list = field(default_factory=list)

    @property
    def size(self):
        return _HEADER.size + _SLICE.size * len(self.slices)

    def pack(self):
        lod, nb = self.lod, self.neighborhood
        head = _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            self.kind.value,
            self.attribute_bits,
            self.geom_bits,
            self.point_count,
            lod.n1,
            lod.growth,
            lod.max_unit_points,
            lod.max_context_points,
            lod.slice_size,
            lod.seed,
            int(lod.random_first),
            nb.k,
            nb.k1,
            nb.k2,
            int(self.baseline),
            self.checkpoint_hash,
            len(self.slices),
        )
        return head + b"".join(_SLICE.pack(s.length, s.checksum) for s in self.slices)

    @classmethod
    def unpack(cls, data):
        """
        Parse the header at the start of `data`; slice lengths must account
        for every remaining byte.
        """
        if len(data) < _HEADER.size:
            raise FormatError("Bitstream is shorter than its header.")
        fields = _HEADER.unpack_from(data, 0)
        magic, version = fields[0], fields[1]
        if magic != MAGIC:
            raise FormatError("Not a hapcac bitstream.")
        if version != FORMAT_VERSION:
            raise FormatError(
                "Bitstream format version {} is not supported (expected {}).".format(
                    version, FORMAT_VERSION
                )
            )
        (
            kind,
            attribute_bits,
            geom_bits,
            point_count,
            n1,
            growth,
            max_unit,
            max_context,
            slice_size,
            seed,
            random_first,
            k,
            k1,
            k2,
            baseline,
            checkpoint_hash,
            slice_count,
        ) = fields[2:]

        try:
            kind = AttributeKind(kind)
            lod = LodParams(
                n1=n1,
                growth=growth,
                max_unit_points=max_unit,
                max_context_points=max_context,
                slice_size=slice_size,
                seed=seed,
                random_first=bool(random_first),
            )
            neighborhood = NeighborhoodParams(k=k, k1=k1, k2=k2)
        except (ValueError, ConfigError) as e:
            raise FormatError("Bitstream header is invalid: {}".format(e))

        header = cls(
            kind=kind,
            attribute_bits=attribute_bits,
            geom_bits=geom_bits,
            point_count=point_count,
            lod=lod,
            neighborhood=neighborhood,
            baseline=bool(baseline),
            checkpoint_hash=checkpoint_hash,
        )
        end = _HEADER.size + _SLICE.size * slice_count
        if len(data) < end:
            raise FormatError("Bitstream slice table is truncated.")
        for i in range(slice_count):
            length, checksum = _SLICE.unpack_from(data, _HEADER.size + i * _SLICE.size)
            header.slices.append(SliceEntry(length, checksum))

        if sum(s.length for s in header.slices) != len(data) - end:
            raise FormatError("Slice lengths do not add up to the bitstream size.")
        return header

    def slice_payloads(self, data):
        """
        Split the bytes after the header into per-slice payloads.
        """
        offset = self.size
        payloads = []
        for entry in self.slices:
            payloads.append(bytes(data[offset : offset + entry.length]))
            offset += entry.length
        return payloads
