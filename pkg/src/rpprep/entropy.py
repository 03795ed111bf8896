"""Per-band Laplacian entropy model, its coding tables, and a range coder.

Scales are stored in 8-bit pixel units of the *unquantized* DCT coefficient.
A coefficient quantized with step ``qstep`` therefore sees the effective
scale ``b / qstep``. This keeps one set of 64 parameters meaningful across
the whole QP range.
"""

from __future__ import annotations

import bisect
import functools
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

N_BANDS = 64
SUPPORT_MIN = -1024
SUPPORT_MAX = 1023
N_SYMBOLS = SUPPORT_MAX - SUPPORT_MIN + 1
ESCAPE = N_SYMBOLS  # symbol index of the escape code
P_MIN = 2.0 ** -16
PRECISION = 24
TOTAL = 1 << PRECISION
SCALE_FRAC_BITS = 8
LN2 = math.log(2.0)


def _zigzag():
    order = sorted(((r, c) for r in range(8) for c in range(8)),
                   key=lambda rc: (rc[0] + rc[1], rc[1] if (rc[0] + rc[1]) % 2 == 0 else rc[0]))
    return [r * 8 + c for r, c in order]


ZIGZAG = np.array(_zigzag(), dtype=np.int64)  # zigzag index -> raster position
BAND_OF_POS = np.argsort(ZIGZAG)  # raster position -> zigzag band

# Maximum-likelihood fit (bin-integrated) on residual coefficients of 30
# photographic and 30 procedural-texture 64x64 crops coded at QP 10, 14, ..., 50.
DEFAULT_SCALES = np.array([
    74.1, 52.3, 51.8, 42.1, 50.3, 38.6, 25.5, 38.1, 42.3, 29.7, 20.9, 33.2, 34.5, 27.4, 17.2, 13.9,
    18.0, 25.5, 27.7, 22.8, 15.2, 11.5, 17.3, 21.4, 22.2, 17.2, 15.2, 10.3, 9.9, 10.5, 14.1, 15.6,
    16.3, 14.8, 12.5, 10.3, 11.7, 11.3, 12.6, 13.1, 11.9, 9.9, 11.8, 9.6, 8.7, 10.3, 10.4, 8.9,
    9.9, 8.8, 8.2, 10.0, 7.8, 8.9, 7.6, 7.9, 8.0, 7.5, 7.9, 7.6, 7.9, 7.2, 7.1, 8.6,
])


class EntropyModel:
    """Zero-mean Laplacian per zigzag band, parameterized by log-scale."""

    def __init__(self, scales=None, dtype=np.float32):
        scales = DEFAULT_SCALES if scales is None else np.asarray(scales, dtype=np.float64)
        if scales.shape != (N_BANDS,) or not np.all(scales > 0):
            raise ValueError("need 64 positive scales")
        self.log_scale = Tensor(np.log(scales).astype(dtype), requires_grad=True)

    @classmethod
    def from_quantized(cls, qscales):
        q = np.asarray(qscales, dtype=np.float64)
        return cls(q / (1 << SCALE_FRAC_BITS))

    def parameters(self):
        return [self.log_scale]

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale.data.astype(np.float64))

    def quantized_scales(self) -> np.ndarray:
        """Scales as unsigned 8.8 fixed point, the form carried in bitstreams."""
        q = np.rint(self.scales() * (1 << SCALE_FRAC_BITS))
        return np.clip(q, 1, 65535).astype(np.uint16)

    def position_scales(self, qstep=1.0) -> Tensor:
        """Differentiable effective scale for each raster position of a block."""
        b = ad.exp(self.log_scale)
        return ad.getitem(b, BAND_OF_POS) * (1.0 / qstep)

    def copy(self):
        m = EntropyModel.__new__(EntropyModel)
        m.log_scale = Tensor(self.log_scale.data.copy(), requires_grad=True)
        return m


# -- differentiable rate ----------------------------------------------------

def bin_probability(y, scale):
    """P(round(Y) = y) for Y ~ Laplace(0, scale), evaluated at possibly non-integer ``y``."""
    y = ad.as_tensor(y)
    scale = ad.as_tensor(scale)
    a = ad.tabs(y)
    inner = a.data < 0.5
    a_in = ad.where(inner, a, 0.5)
    a_out = ad.where(inner, 0.5, a)
    p_in = 1.0 - 0.5 * (ad.exp((a_in - 0.5) / scale) + ad.exp(-(a_in + 0.5) / scale))
    p_out = 0.5 * (ad.exp(-(a_out - 0.5) / scale) - ad.exp(-(a_out + 0.5) / scale))
    return ad.where(inner, p_in, p_out)


def bits_estimate(y_hat, model: EntropyModel, qstep=1.0):
    """Total estimated bits for soft-rounded coefficients laid out as (..., 64)."""
    y_hat = ad.as_tensor(y_hat)
    if y_hat.shape[-1] != N_BANDS:
        raise ValueError(f"coefficients must have a trailing axis of 64, got {y_hat.shape}")
    scale = model.position_scales(qstep)
    if y_hat.dtype != scale.dtype:
        scale = ad.as_tensor(scale) * np.ones(1, dtype=y_hat.dtype)
    scale = ad.broadcast_to(scale, y_hat.shape)
    p = bin_probability(y_hat, scale)
    # Exact floor: no gradient at all once a bin probability drops below P_MIN.
    p = ad.where(p.data > P_MIN, p, P_MIN)
    return ad.tsum(ad.log(p)) * (-1.0 / LN2)


def fit_update(model: EntropyModel, optimizer, lr) -> bool:
    """Apply one optimizer step if the accumulated gradient is finite."""
    g = model.log_scale.grad
    if g is not None and not np.isfinite(g).all():
        optimizer.zero_grad()
        return False
    optimizer.step(lr)
    return True


def fit(model: EntropyModel, levels, qsteps, steps=2000, lr=1e-2, batch=None, seed=0):
    """Fit scales to integer levels by minimizing their estimated bits with Adam.

    ``levels`` is a sequence of (M_i, 64) integer arrays quantized with the
    matching entry of ``qsteps``.
    """
    from .nn import Adam

    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters())
    sets = [np.asarray(lv, dtype=np.float64) for lv in levels]
    for _ in range(steps):
        opt.zero_grad()
        total = None
        for lv, qs in zip(sets, qsteps):
            if batch is not None and len(lv) > batch:
                lv = lv[rng.choice(len(lv), batch, replace=False)]
            bits = bits_estimate(Tensor(lv.astype(model.log_scale.dtype)), model, qs)
            total = bits if total is None else total + bits
        ad.backward(total)
        fit_update(model, opt, lr)
    return model


# -- coding tables ----------------------------------------------------------

def _laplace_cdf(x, b):
    with np.errstate(over="ignore"):
        return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0) / b), 1.0 - 0.5 * np.exp(-np.maximum(x, 0) / b))


class CodingTable:
    """Quantized cumulative frequencies for every band, plus an escape symbol."""

    __slots__ = ("cum", "freq")

    def __init__(self, cum):
        self.cum = cum
        self.freq = [np.diff(np.asarray(c)).tolist() for c in cum]

    @classmethod
    def from_scales(cls, eff_scales):
        eff_scales = np.asarray(eff_scales, dtype=np.float64)
        return _table_cached(eff_scales.tobytes())

    @classmethod
    def for_model(cls, model: EntropyModel, qstep: float):
        """Table built from the model's 8.8 fixed-point scales, as the decoder sees them."""
        q = model.quantized_scales().astype(np.float64) / (1 << SCALE_FRAC_BITS)
        return cls.from_scales(q / qstep)


@functools.lru_cache(maxsize=256)
def _table_cached(key: bytes) -> CodingTable:
    eff = np.frombuffer(key, dtype=np.float64)
    v = np.arange(SUPPORT_MIN, SUPPORT_MAX + 1, dtype=np.float64)
    cum = []
    budget = TOTAL - (N_SYMBOLS + 1)
    for b in eff:
        b = max(float(b), 1e-12)
        p = _laplace_cdf(v + 0.5, b) - _laplace_cdf(v - 0.5, b)
        esc = _laplace_cdf(np.array([SUPPORT_MIN - 0.5]), b)[0] + (1.0 - _laplace_cdf(np.array([SUPPORT_MAX + 0.5]), b)[0])
        probs = np.append(np.clip(p, 0.0, 1.0), max(esc, 0.0))
        probs /= probs.sum()
        freq = np.floor(probs * budget).astype(np.int64) + 1
        freq[int(np.argmax(freq))] += TOTAL - int(freq.sum())
        c = np.concatenate([[0], np.cumsum(freq)])
        cum.append(c.tolist())
    return CodingTable(cum)


def table_bits(symbols, bands, table: CodingTable) -> float:
    """Ideal code length in bits of ``symbols`` under ``table``, escapes included."""
    total = 0.0
    for s, k in zip(symbols, bands):
        idx = s - SUPPORT_MIN
        if 0 <= idx < N_SYMBOLS:
            total += PRECISION - math.log2(table.freq[k][idx])
        else:
            total += PRECISION - math.log2(table.freq[k][ESCAPE]) + 16
    return total


# -- range coder --------------------------------------------------------------

_MASK = (1 << 64) - 1
_TOP = 1 << 56


class BitstreamError(ValueError):
    """Malformed or truncated coded data; ``offset`` is the failing byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class RangeEncoder:
    """64-bit carry-propagating range encoder (LZMA-style byte output)."""

    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF00000000000000 or self.low > _MASK:
            carry = self.low >> 64
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 56) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK

    def encode(self, start, size, total_bits):
        r = self.range >> total_bits
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(9):
            self._shift_low()
        # the first byte is always the initial zero cache
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes, base_offset=0):
        self.data = data
        self.pos = 0
        self.base = base_offset
        self.range = _MASK
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._byte()

    def _byte(self):
        if self.pos >= len(self.data):
            raise BitstreamError("truncated range-coded payload", self.base + self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cum, total_bits):
        r = self.range >> total_bits
        v = self.code // r
        if v >= cum[-1]:
            raise BitstreamError("invalid range-coder state", self.base + self.pos)
        s = bisect.bisect_right(cum, v) - 1
        self.code -= r * cum[s]
        self.range = r * (cum[s + 1] - cum[s])
        while self.range < _TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._byte()) & _MASK
        return s


_UNIFORM8 = list(range(257))


def _encode_symbol(enc, s, cum):
    s = int(s)
    idx = s - SUPPORT_MIN
    if 0 <= idx < N_SYMBOLS:
        enc.encode(cum[idx], cum[idx + 1] - cum[idx], PRECISION)
    else:
        if not -32768 <= s <= 32767:
            raise ValueError(f"value {s} does not fit the 16-bit escape")
        enc.encode(cum[ESCAPE], cum[ESCAPE + 1] - cum[ESCAPE], PRECISION)
        raw = s & 0xFFFF
        enc.encode(raw >> 8, 1, 8)
        enc.encode(raw & 0xFF, 1, 8)


def _decode_symbol(dec, cum):
    idx = dec.decode(cum, PRECISION)
    if idx == ESCAPE:
        raw = (dec.decode(_UNIFORM8, 8) << 8) | dec.decode(_UNIFORM8, 8)
        return raw - 0x10000 if raw & 0x8000 else raw
    return idx + SUPPORT_MIN


def range_encode(symbols, bands, table: CodingTable) -> bytes:
    """Code integer ``symbols`` with the band of each given in ``bands``."""
    enc = RangeEncoder()
    for s, k in zip(symbols, bands):
        _encode_symbol(enc, s, table.cum[k])
    return enc.finish()


# Block flags: two adaptive binary probabilities (12-bit, shift update), one
# for "block has a nonzero level" and one for "only the DC level is nonzero".
FLAG_BITS = 12
FLAG_SHIFT = 4


class _AdaptiveBit:
    def __init__(self):
        self.p_zero = 1 << (FLAG_BITS - 1)

    def encode(self, enc, bit):
        one = 1 << FLAG_BITS
        if bit:
            enc.encode(self.p_zero, one - self.p_zero, FLAG_BITS)
        else:
            enc.encode(0, self.p_zero, FLAG_BITS)
        self._update(bit)

    def decode(self, dec):
        bit = dec.decode([0, self.p_zero, 1 << FLAG_BITS], FLAG_BITS)
        self._update(bit)
        return bit

    def _update(self, bit):
        if bit:
            self.p_zero -= self.p_zero >> FLAG_SHIFT
        else:
            self.p_zero += ((1 << FLAG_BITS) - self.p_zero) >> FLAG_SHIFT


def encode_blocks(levels, table: CodingTable) -> bytes:
    """Code (M, 64) zigzag-ordered levels block by block.

    Each block starts with an adaptively coded "coded" flag; an all-zero block
    is the flag alone. A coded block then carries a "DC only" flag followed by
    either its DC level or all 64 levels.
    """
    enc = RangeEncoder()
    coded_bit, dc_bit = _AdaptiveBit(), _AdaptiveBit()
    for blk in np.asarray(levels).tolist():
        coded = any(blk)
        coded_bit.encode(enc, coded)
        if not coded:
            continue
        dc_only = not any(blk[1:])
        dc_bit.encode(enc, dc_only)
        for k in range(1 if dc_only else N_BANDS):
            _encode_symbol(enc, blk[k], table.cum[k])
    return enc.finish()


def decode_blocks(data: bytes, count, table: CodingTable, base_offset=0, strict=True) -> np.ndarray:
    """Inverse of :func:`encode_blocks`; returns (count, 64) zigzag-ordered levels."""
    dec = RangeDecoder(data, base_offset)
    out = np.zeros((count, N_BANDS), dtype=np.int64)
    coded_bit, dc_bit = _AdaptiveBit(), _AdaptiveBit()
    for i in range(count):
        if not coded_bit.decode(dec):
            continue
        n = 1 if dc_bit.decode(dec) else N_BANDS
        out[i, :n] = [_decode_symbol(dec, table.cum[k]) for k in range(n)]
    if strict and dec.pos != len(data):
        raise BitstreamError("trailing bytes after range-coded payload", base_offset + dec.pos)
    return out


def range_decode(data: bytes, count, bands, table: CodingTable, base_offset=0, strict=True):
    dec = RangeDecoder(data, base_offset)
    out = [_decode_symbol(dec, table.cum[bands[i]]) for i in range(count)]
    if strict and dec.pos != len(data):
        raise BitstreamError("trailing bytes after range-coded payload", base_offset + dec.pos)
    return out
