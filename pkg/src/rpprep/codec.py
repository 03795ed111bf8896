"""Block intra codec: a differentiable surrogate and its exact bitstream twin.

Both paths share the prediction matrix, the DCT and the quantizer. Pixels
enter as floats in [0, 1]; prediction residuals, transform coefficients and
mode costs are computed in 8-bit units (x255), which is where the QP step
sizes make sense.

Blocks depend on their top, left and top-left neighbours only, so both
paths process the block grid one anti-diagonal at a time. The result is
identical to raster order.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import autodiff as ad
from . import entropy
from .autodiff import Tensor
from .entropy import BitstreamError, EntropyModel

BLOCK = 8
QP_MIN, QP_MAX = 0, 51
MAGIC = b"DBPG"
VERSION = 1
BORDER = 0.5
PIXEL_SCALE = 255.0
LAMBDA_MODE_FACTOR = 0.85
DEFAULT_TAU = 0.1
DEFAULT_TERMS = 5
LEVEL_MIN, LEVEL_MAX = -(1 << 15), (1 << 15) - 1

FLAG_TABLE = 0x01
FLAG_GRAY = 0x02


class PredictionMode(IntEnum):
    DC = 0
    PLANAR = 1
    ANGULAR_H = 2
    ANGULAR_V = 3
    ANGULAR_D45 = 4
    ANGULAR_D135 = 5


N_MODES = len(PredictionMode)
# bits to signal each mode; the two smooth modes are cheaper, as with most-probable-mode coding
MODE_BITS = np.array([2.0, 2.0, 3.0, 3.0, 3.0, 3.0])


@dataclass(frozen=True)
class QuantParams:
    qp: int
    qstep: float


def qstep_from_qp(qp) -> QuantParams:
    if isinstance(qp, bool) or int(qp) != qp or not QP_MIN <= qp <= QP_MAX:
        raise ValueError(f"qp must be an integer in [{QP_MIN}, {QP_MAX}], got {qp!r}")
    qp = int(qp)
    return QuantParams(qp, float(2.0 ** ((qp - 4) / 6.0)))


def lambda_mode(q: QuantParams) -> float:
    return LAMBDA_MODE_FACTOR * q.qstep * q.qstep


# -- blocks ---------------------------------------------------------------

@dataclass
class BlockGrid:
    blocks: np.ndarray  # (rows, cols, 8, 8)
    height: int
    width: int


def _pad_index(n):
    padded = -(-n // BLOCK) * BLOCK
    return np.minimum(np.arange(padded), n - 1)


def partition_blocks(plane) -> BlockGrid:
    plane = np.asarray(plane)
    if plane.ndim != 2 or plane.size == 0:
        raise ValueError(f"expected a non-empty 2-D plane, got shape {plane.shape}")
    h, w = plane.shape
    p = plane[np.ix_(_pad_index(h), _pad_index(w))]
    hb, wb = p.shape[0] // BLOCK, p.shape[1] // BLOCK
    blocks = p.reshape(hb, BLOCK, wb, BLOCK).transpose(0, 2, 1, 3)
    return BlockGrid(np.ascontiguousarray(blocks), h, w)


def reassemble(grid: BlockGrid) -> np.ndarray:
    hb, wb = grid.blocks.shape[:2]
    p = grid.blocks.transpose(0, 2, 1, 3).reshape(hb * BLOCK, wb * BLOCK)
    return p[: grid.height, : grid.width].copy()


# -- intra prediction -------------------------------------------------------
# neighbour vector layout: [corner, top[0..7], left[0..7]]

def _predict_direct(mode, corner, top, left):
    """Per-pixel definition of every mode; the matrix form below is built from it."""
    pred = np.empty((BLOCK, BLOCK))
    for y in range(BLOCK):
        for x in range(BLOCK):
            if mode == PredictionMode.DC:
                v = (sum(top) + sum(left)) / 16.0
            elif mode == PredictionMode.PLANAR:
                v = ((7 - x) * left[y] + (x + 1) * top[7] + (7 - y) * top[x] + (y + 1) * left[7]) / 16.0
            elif mode == PredictionMode.ANGULAR_H:
                v = left[y]
            elif mode == PredictionMode.ANGULAR_V:
                v = top[x]
            elif mode == PredictionMode.ANGULAR_D45:
                v = top[min(x + y + 1, 7)]
            else:
                if x > y:
                    v = top[x - y - 1]
                elif x == y:
                    v = corner
                else:
                    v = left[y - x - 1]
            pred[y, x] = v
    return pred


def _build_pred_matrix():
    m = np.zeros((17, N_MODES * 64))
    for i in range(17):
        e = np.zeros(17)
        e[i] = 1.0
        for mode in PredictionMode:
            m[i, mode * 64:(mode + 1) * 64] = _predict_direct(mode, e[0], e[1:9], e[9:17]).reshape(-1)
    return m


PRED_MATRIX = _build_pred_matrix()


def intra_predict(mode, top, left, corner=BORDER):
    """8x8 prediction from 8 top, 8 left and 1 corner reconstructed pixel."""
    nb = np.concatenate([[corner], np.asarray(top, dtype=np.float64), np.asarray(left, dtype=np.float64)])
    mode = PredictionMode(mode)
    return (nb @ PRED_MATRIX[:, mode * 64:(mode + 1) * 64]).reshape(BLOCK, BLOCK)


def mode_costs(block, top, left, corner, q: QuantParams):
    """RD cost of every mode: SSE in 8-bit units plus lambda times signaling bits."""
    nb = np.concatenate([[corner], np.asarray(top, dtype=np.float64), np.asarray(left, dtype=np.float64)])
    preds = (nb @ PRED_MATRIX).reshape(N_MODES, 64)
    d = (np.asarray(block, dtype=np.float64).reshape(1, 64) - preds) * PIXEL_SCALE
    return (d * d).sum(axis=1) + lambda_mode(q) * MODE_BITS


def soft_mode_select(costs, tau):
    """Soft-argmin weights ``softmax(-costs / tau)`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return ad.softmax(ad.as_tensor(costs) * (-1.0 / tau), axis=-1)


# -- transform and quantization ---------------------------------------------

def _dct_matrix():
    d = np.zeros((BLOCK, BLOCK))
    for u in range(BLOCK):
        a = math.sqrt((1 if u == 0 else 2) / BLOCK)
        for x in range(BLOCK):
            d[u, x] = a * math.cos((2 * x + 1) * u * math.pi / (2 * BLOCK))
    return d


DCT = _dct_matrix()
DCT_KRON = np.kron(DCT, DCT)  # row-major flattened block -> flattened coefficients
DCT_KRON_T = np.ascontiguousarray(DCT_KRON.T)


def _const(arr, like):
    return Tensor(np.asarray(arr, dtype=like.dtype))


def dct2(block):
    """Orthonormal 2-D DCT-II over the last two axes (8x8)."""
    if isinstance(block, Tensor):
        shp = block.shape
        flat = block.reshape(shp[:-2] + (64,))
        return ad.matmul(flat, _const(DCT_KRON_T, block)).reshape(shp)
    return DCT @ np.asarray(block) @ DCT.T


def idct2(block):
    if isinstance(block, Tensor):
        shp = block.shape
        flat = block.reshape(shp[:-2] + (64,))
        return ad.matmul(flat, _const(DCT_KRON, block)).reshape(shp)
    return DCT.T @ np.asarray(block) @ DCT


def _soft_round_np(y, n_terms):
    s = np.zeros_like(y)
    c = np.zeros_like(y)
    for n in range(1, n_terms + 1):
        sign = 1.0 if n % 2 == 1 else -1.0
        arg = 2.0 * math.pi * n * y
        s += (sign / n) * np.sin(arg)
        c += sign * np.cos(arg)
    return y - s / (2.0 * math.pi), 1.0 - c


def soft_round(y, n_terms=DEFAULT_TERMS):
    """Truncated Fourier-series rounding with ``n_terms`` sine terms."""
    if int(n_terms) < 1:
        raise ValueError("n_terms must be >= 1")
    if not isinstance(y, Tensor):
        return _soft_round_np(np.asarray(y, dtype=np.float64), int(n_terms))[0]
    val, der = _soft_round_np(y.data, int(n_terms))
    return ad._make(val.astype(y.dtype, copy=False), (y,), lambda g: (g * der,), "soft_round")


def round_half_away(y):
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


def quantize(coeffs, q: QuantParams, mode="hard", n_terms=DEFAULT_TERMS):
    if mode == "soft":
        return soft_round(ad.as_tensor(coeffs) * (1.0 / q.qstep), n_terms)
    if mode != "hard":
        raise ValueError(f"unknown quantization mode {mode!r}")
    lv = round_half_away(np.asarray(coeffs, dtype=np.float64) / q.qstep)
    return np.clip(lv, LEVEL_MIN, LEVEL_MAX).astype(np.int32)


def dequantize(levels, q: QuantParams):
    if isinstance(levels, Tensor):
        return levels * q.qstep
    return np.asarray(levels, dtype=np.float64) * q.qstep


# -- wavefront plan ---------------------------------------------------------

@dataclass
class _Diagonal:
    rows: np.ndarray
    cols: np.ndarray
    top: np.ndarray     # index into previous diagonal (len = pad slot)
    left: np.ndarray
    corner: np.ndarray  # index into the diagonal before that


def _wavefront(hb, wb):
    diags = []
    rowmin = []
    for d in range(hb + wb - 1):
        rows = np.arange(max(0, d - wb + 1), min(d, hb - 1) + 1)
        cols = d - rows
        rowmin.append(rows[0])
        n1 = len(diags[d - 1].rows) if d >= 1 else 0
        n2 = len(diags[d - 2].rows) if d >= 2 else 0
        top = np.where(rows >= 1, rows - 1 - (rowmin[d - 1] if d >= 1 else 0), n1)
        left = np.where(cols >= 1, rows - (rowmin[d - 1] if d >= 1 else 0), n1)
        corner = np.where((rows >= 1) & (cols >= 1), rows - 1 - (rowmin[d - 2] if d >= 2 else 0), n2)
        diags.append(_Diagonal(rows, cols, top.astype(np.int64), left.astype(np.int64), corner.astype(np.int64)))
    return diags


def _raster_order(diags, wb):
    keys = np.concatenate([d.rows * wb + d.cols for d in diags])
    return np.argsort(keys)


def _source_neighbor_index(hb, wb):
    """Gather indices into a (H+1, W+1) plane whose row 0 / col 0 is the border."""
    bi, bj = np.divmod(np.arange(hb * wb), wb)
    r0, c0 = bi * BLOCK, bj * BLOCK  # padded coordinates of the pixel above-left
    k = np.arange(BLOCK)
    rows = np.concatenate([r0[:, None], np.repeat(r0[:, None], BLOCK, 1), r0[:, None] + 1 + k], axis=1)
    cols = np.concatenate([c0[:, None], c0[:, None] + 1 + k, np.repeat(c0[:, None], BLOCK, 1)], axis=1)
    return rows, cols


# -- differentiable path ------------------------------------------------------

def _image_blocks_tensor(x: Tensor):
    """(N, C, H, W) -> padded (N, C, Hb*Wb, 64) in raster block order."""
    n, c, h, w = x.shape
    ri, ci = _pad_index(h), _pad_index(w)
    if len(ri) != h:
        x = ad.getitem(x, (slice(None), slice(None), ri))
    if len(ci) != w:
        x = ad.getitem(x, (slice(None), slice(None), slice(None), ci))
    hb, wb = len(ri) // BLOCK, len(ci) // BLOCK
    b = x.reshape(n, c, hb, BLOCK, wb, BLOCK).transpose(0, 1, 2, 4, 3, 5)
    return b.reshape(n, c, hb * wb, 64), hb, wb


def _soft_group(src, nb, q, tau, n_terms, model):
    n, c, nblk, _ = src.shape
    lam = lambda_mode(q)
    preds = ad.matmul(nb, _const(PRED_MATRIX, nb)).reshape(n, c, nblk, N_MODES, 64)
    srcb = ad.broadcast_to(src.reshape(n, c, nblk, 1, 64), preds.shape)
    d = (srcb - preds) * PIXEL_SCALE
    costs = (d * d).sum(axis=-1) + _const(np.broadcast_to(lam * MODE_BITS, (n, c, nblk, N_MODES)), src)
    w = soft_mode_select(costs, tau)
    pred = (ad.broadcast_to(w.reshape(n, c, nblk, N_MODES, 1), preds.shape) * preds).sum(axis=-2)
    coef = ad.matmul((src - pred) * PIXEL_SCALE, _const(DCT_KRON_T, src))
    y_hat = quantize(coef, q, "soft", n_terms)
    bits = entropy.bits_estimate(y_hat, model, q.qstep)
    resid = ad.matmul(dequantize(y_hat, q), _const(DCT_KRON, src)) * (1.0 / PIXEL_SCALE)
    rec = ad.clamp(pred + resid, 0.0, 1.0)
    return rec, bits


def forward_diff(image, qp, tau=DEFAULT_TAU, n_terms=DEFAULT_TERMS, model: EntropyModel | None = None,
                 neighbors="hard"):
    """Differentiable encode/decode simulation.

    ``image`` is (C, H, W) or (N, C, H, W) in [0, 1]. Returns the
    reconstruction (same shape) and the estimated bits per pixel, averaged
    over the batch.

    ``neighbors`` selects what each block is predicted from:

    * ``"hard"``: the exact codec's reconstruction, treated as a constant.
      That reconstruction is piecewise constant in the input, so its
      derivative is zero almost everywhere and blocks stay independent.
    * ``"recon"``: the soft reconstruction, processed diagonal by diagonal.
    * ``"source"``: the source pixels.
    """
    q = qp if isinstance(qp, QuantParams) else qstep_from_qp(qp)
    model = model if model is not None else EntropyModel()
    x = ad.as_tensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    n, c, h, w = x.shape
    src, hb, wb = _image_blocks_tensor(x)

    if neighbors == "hard":
        q_planes = x.data.reshape(n * c, h, w).astype(np.float64)
        _, _, rec_blocks, _, _ = _encode_planes(q_planes, q)
        plane = rec_blocks.reshape(n * c, hb, wb, BLOCK, BLOCK).transpose(0, 1, 3, 2, 4)
        plane = plane.reshape(n, c, hb * BLOCK, wb * BLOCK)
        bordered = np.pad(plane, ((0, 0), (0, 0), (1, 0), (1, 0)), constant_values=BORDER)
        r, cc = _source_neighbor_index(hb, wb)
        nb = _const(bordered[:, :, r, cc], x)
        rec, bits = _soft_group(src, nb, q, tau, n_terms, model)
    elif neighbors == "source":
        half = _const(np.full((n, c, 1, 1), BORDER), x)
        xp = ad.getitem(x, (slice(None), slice(None), _pad_index(h)))
        xp = ad.getitem(xp, (slice(None), slice(None), slice(None), _pad_index(w)))
        row = ad.broadcast_to(half, (n, c, 1, xp.shape[3]))
        xp = ad.concat([row, xp], axis=2)
        col = ad.broadcast_to(half, (n, c, xp.shape[2], 1))
        xp = ad.concat([col, xp], axis=3)
        r, cc = _source_neighbor_index(hb, wb)
        nb = ad.getitem(xp, (slice(None), slice(None), r, cc))
        rec, bits = _soft_group(src, nb, q, tau, n_terms, model)
    elif neighbors == "recon":
        diags = _wavefront(hb, wb)
        half_blk = _const(np.full((n, c, 1, 64), BORDER), x)
        recs, bit_terms = [], []
        for d, dg in enumerate(diags):
            prev = ad.concat([recs[d - 1], half_blk], axis=2) if d >= 1 else half_blk
            prev2 = ad.concat([recs[d - 2], half_blk], axis=2) if d >= 2 else half_blk
            top = ad.getitem(prev, (slice(None), slice(None), dg.top, slice(56, 64)))
            left = ad.getitem(prev, (slice(None), slice(None), dg.left, slice(7, 64, 8)))
            corner = ad.getitem(prev2, (slice(None), slice(None), dg.corner, slice(63, 64)))
            nb = ad.concat([corner, top, left], axis=-1)
            blk = ad.getitem(src, (slice(None), slice(None), dg.rows * wb + dg.cols))
            r_d, b_d = _soft_group(blk, nb, q, tau, n_terms, model)
            recs.append(r_d)
            bit_terms.append(b_d)
        order = _raster_order(diags, wb)
        rec = ad.getitem(ad.concat(recs, axis=2), (slice(None), slice(None), order))
        bits = bit_terms[0]
        for b in bit_terms[1:]:
            bits = bits + b
    else:
        raise ValueError(f"neighbors must be 'hard', 'recon' or 'source', got {neighbors!r}")

    out = rec.reshape(n, c, hb, wb, BLOCK, BLOCK).transpose(0, 1, 2, 4, 3, 5)
    out = out.reshape(n, c, hb * BLOCK, wb * BLOCK)
    if hb * BLOCK != h or wb * BLOCK != w:
        out = ad.getitem(out, (slice(None), slice(None), slice(0, h), slice(0, w)))
    if squeeze:
        out = out.reshape(c, h, w)
    bpp = bits * (1.0 / (n * h * w))
    return out, bpp


# -- exact path ---------------------------------------------------------------

def _hard_neighbors(recs, d, dg, n_planes):
    half = np.full((n_planes, 1, 64), BORDER)
    prev = np.concatenate([recs[d - 1], half], axis=1) if d >= 1 else half
    prev2 = np.concatenate([recs[d - 2], half], axis=1) if d >= 2 else half
    top = prev[:, dg.top, 56:64]
    left = prev[:, dg.left, 7::8]
    corner = prev2[:, dg.corner, 63:64]
    return np.concatenate([corner, top, left], axis=-1)


def _hard_predictions(nb):
    return (nb @ PRED_MATRIX).reshape(nb.shape[:-1] + (N_MODES, 64))


def _hard_reconstruct(preds, modes, levels, q):
    pred = np.take_along_axis(preds, modes[..., None, None], axis=-2)[..., 0, :]
    resid = (levels.astype(np.float64) * q.qstep) @ DCT_KRON
    rec = np.floor(pred * PIXEL_SCALE + resid + 0.5)
    return np.clip(rec, 0.0, PIXEL_SCALE) / PIXEL_SCALE


@dataclass
class EncodeResult:
    bitstream: bytes
    reconstruction: np.ndarray  # (C, H, W)
    modes: np.ndarray           # (C, blocks)
    levels: np.ndarray          # (C, blocks, 64) raster positions


def _as_planes(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (C, H, W) image with 1 or 3 channels, got {img.shape}")
    return img


def _encode_planes(img, q: QuantParams):
    """Exact mode decision, quantization and reconstruction for (P, H, W) planes."""
    c, h, w = img.shape
    src = np.stack([partition_blocks(p).blocks for p in img])  # (P, hb, wb, 8, 8)
    hb, wb = src.shape[1:3]
    src = src.reshape(c, hb * wb, 64)
    lam = lambda_mode(q)

    diags = _wavefront(hb, wb)
    recs, modes_d, levels_d = [], [], []
    for d, dg in enumerate(diags):
        blk = src[:, dg.rows * wb + dg.cols]
        preds = _hard_predictions(_hard_neighbors(recs, d, dg, c))
        err = (blk[:, :, None, :] - preds) * PIXEL_SCALE
        costs = (err * err).sum(axis=-1) + lam * MODE_BITS
        modes = np.argmin(costs, axis=-1)
        pred = np.take_along_axis(preds, modes[..., None, None], axis=-2)[..., 0, :]
        levels = quantize(((blk - pred) * PIXEL_SCALE) @ DCT_KRON_T, q, "hard")
        recs.append(_hard_reconstruct(preds, modes, levels, q))
        modes_d.append(modes)
        levels_d.append(levels)
    order = _raster_order(diags, wb)
    modes = np.concatenate(modes_d, axis=1)[:, order]
    levels = np.concatenate(levels_d, axis=1)[:, order]
    rec_blocks = np.concatenate(recs, axis=1)[:, order]
    return modes, levels, rec_blocks, hb, wb


def encode_hard_detailed(image, qp, model: EntropyModel | None = None, embed_model=False) -> EncodeResult:
    img = _as_planes(image)
    c, h, w = img.shape
    if not (1 <= h <= 65535 and 1 <= w <= 65535):
        raise ValueError(f"image dimensions must be within 1..65535, got {w}x{h}")
    q = qstep_from_qp(qp)
    model = model if model is not None else EntropyModel()
    modes, levels, rec_blocks, hb, wb = _encode_planes(img, q)

    qscales = model.quantized_scales()
    table = entropy.CodingTable.for_model(model, q.qstep)
    payload = entropy.encode_blocks(levels[:, :, entropy.ZIGZAG].reshape(-1, 64), table)
    bs = Bitstream(q.qp, w, h, c, modes.astype(np.uint8), payload, qscales if embed_model else None)

    rec = rec_blocks.reshape(c, hb, wb, BLOCK, BLOCK).transpose(0, 1, 3, 2, 4).reshape(c, hb * BLOCK, wb * BLOCK)
    return EncodeResult(bs.to_bytes(), rec[:, :h, :w].copy(), modes, levels)


def encode_hard(image, qp, model: EntropyModel | None = None, embed_model=False) -> bytes:
    return encode_hard_detailed(image, qp, model, embed_model).bitstream


def decode_hard(data: bytes, model: EntropyModel | None = None) -> np.ndarray:
    """Decode a bitstream to a (C, H, W) float image in [0, 1]."""
    bs = Bitstream.from_bytes(data)
    if bs.scales is not None:
        model = EntropyModel.from_quantized(bs.scales)
    elif model is None:
        model = EntropyModel()
    q = qstep_from_qp(bs.qp)
    c, h, w = bs.channels, bs.height, bs.width
    hb, wb = -(-h // BLOCK), -(-w // BLOCK)
    nblk = hb * wb
    table = entropy.CodingTable.for_model(model, q.qstep)
    symbols = entropy.decode_blocks(bs.payload, c * nblk, table, base_offset=bs.payload_offset)
    levels = np.empty((c, nblk, 64), dtype=np.int32)
    levels[:, :, entropy.ZIGZAG] = symbols.reshape(c, nblk, 64)
    modes = bs.modes.astype(np.int64)
    if modes.max(initial=0) >= N_MODES:
        raise BitstreamError("invalid prediction mode index", bs.modes_offset)

    diags = _wavefront(hb, wb)
    recs = []
    for d, dg in enumerate(diags):
        idx = dg.rows * wb + dg.cols
        preds = _hard_predictions(_hard_neighbors(recs, d, dg, c))
        recs.append(_hard_reconstruct(preds, modes[:, idx], levels[:, idx], q))
    order = _raster_order(diags, wb)
    rec = np.concatenate(recs, axis=1)[:, order]
    rec = rec.reshape(c, hb, wb, BLOCK, BLOCK).transpose(0, 1, 3, 2, 4).reshape(c, hb * BLOCK, wb * BLOCK)
    return rec[:, :h, :w].copy()


# -- bitstream container ----------------------------------------------------

@dataclass
class Bitstream:
    """Serialized form: header, 4-bit mode indices, range-coded payload, CRC-32."""

    qp: int
    width: int
    height: int
    channels: int
    modes: np.ndarray  # (C, blocks) uint8
    payload: bytes
    scales: np.ndarray | None = None  # 64 x u16 (8.8) when the table is embedded
    version: int = VERSION
    payload_offset: int = 0
    modes_offset: int = 0

    def to_bytes(self) -> bytes:
        flags = (FLAG_TABLE if self.scales is not None else 0) | (FLAG_GRAY if self.channels == 1 else 0)
        out = bytearray(MAGIC)
        out += struct.pack(">BBHHB", self.version, self.qp, self.width, self.height, flags)
        if self.scales is not None:
            out += np.asarray(self.scales, dtype=">u2").tobytes()
        nib = np.asarray(self.modes, dtype=np.uint8).reshape(-1)
        if len(nib) % 2:
            nib = np.append(nib, 0)
        out += ((nib[0::2] << 4) | nib[1::2]).astype(np.uint8).tobytes()
        out += self.payload
        out += struct.pack(">I", zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        data = bytes(data)
        if len(data) < 4 or data[:4] != MAGIC:
            raise BitstreamError("bad magic", 0)
        if len(data) < 11:
            raise BitstreamError("truncated header", len(data))
        version, qp, width, height, flags = struct.unpack(">BBHHB", data[4:11])
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}", 4)
        if qp > QP_MAX:
            raise BitstreamError(f"qp {qp} out of range", 5)
        if width == 0 or height == 0:
            raise BitstreamError("zero image dimension", 6)
        if flags & ~(FLAG_TABLE | FLAG_GRAY):
            raise BitstreamError(f"unknown flags 0x{flags:02x}", 10)
        pos = 11
        scales = None
        if flags & FLAG_TABLE:
            if len(data) < pos + 128:
                raise BitstreamError("truncated model table", len(data))
            scales = np.frombuffer(data[pos:pos + 128], dtype=">u2").astype(np.uint16)
            if np.any(scales == 0):
                raise BitstreamError("zero scale in model table", pos)
            pos += 128
        channels = 1 if flags & FLAG_GRAY else 3
        nblk = (-(-height // BLOCK)) * (-(-width // BLOCK))
        n_modes = channels * nblk
        mode_bytes = (n_modes + 1) // 2
        if len(data) < pos + mode_bytes + 4:
            raise BitstreamError("truncated mode section", len(data))
        raw = np.frombuffer(data[pos:pos + mode_bytes], dtype=np.uint8)
        nib = np.empty(2 * mode_bytes, dtype=np.uint8)
        nib[0::2] = raw >> 4
        nib[1::2] = raw & 0x0F
        modes = nib[:n_modes].reshape(channels, nblk)
        modes_offset = pos
        pos += mode_bytes
        (crc,) = struct.unpack(">I", data[-4:])
        if zlib.crc32(data[:-4]) != crc:
            raise BitstreamError("checksum mismatch", len(data) - 4)
        return cls(qp, width, height, channels, modes, data[pos:-4], scales, version,
                   payload_offset=pos, modes_offset=modes_offset)
