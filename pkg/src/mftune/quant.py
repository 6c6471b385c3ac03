"""4-bit normal-float (NF4) blockwise quantization with double quantization
of the per-block absmax stream.

Quantization here is simulated: codes are stored unpacked (one byte per
4-bit index) and dequantized back to float64, which is what the frozen-base
forward consumes at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Canonical 16-entry NF4 table (quantiles of a standard normal, scaled to
# [-1, 1], with an exact zero); same constants as bitsandbytes.
NF4_CODEBOOK = np.array(
    [
        -1.0,
        -0.6961928009986877,
        -0.5250730514526367,
        -0.39491748809814453,
        -0.28444138169288635,
        -0.18477343022823334,
        -0.09105003625154495,
        0.0,
        0.07958029955625534,
        0.16093020141124725,
        0.24611230194568634,
        0.33791524171829224,
        0.44070982933044434,
        0.5626170039176941,
        0.7229568362236023,
        1.0,
    ],
    dtype=np.float64,
)

NF4_BLOCK = 64
DQ_BLOCK = 256

_ZERO_CODE = int(np.flatnonzero(NF4_CODEBOOK == 0.0)[0])


class QuantError(ValueError):
    pass


@dataclass
class Nf4Quantized:
    """Unpacked 4-bit codes, one row per block of `block` weights."""

    codes: np.ndarray  # uint8 [n_blocks, block]
    shape: tuple[int, ...]
    count: int
    block: int


@dataclass
class DoubleQuantState:
    """8-bit affine quantization of the absmax stream, per super-block."""

    codes: np.ndarray  # uint8 [n_super, dq_block]
    scale: np.ndarray  # float64 [n_super]
    offset: np.ndarray  # float64 [n_super]
    count: int
    block: int


def _pad_to_blocks(flat: np.ndarray, block: int) -> np.ndarray:
    rem = flat.size % block
    if rem:
        flat = np.concatenate([flat, np.zeros(block - rem, dtype=flat.dtype)])
    return flat.reshape(-1, block)


def quantize_absmax(absmax: np.ndarray, block: int = DQ_BLOCK) -> DoubleQuantState:
    count = absmax.size
    rows = _pad_to_blocks(absmax.astype(np.float64), block)
    offset = rows.min(axis=1)
    span = rows.max(axis=1) - offset
    scale = span / 255.0
    safe = np.where(scale > 0, scale, 1.0)
    codes = np.rint((rows - offset[:, None]) / safe[:, None])
    codes = np.clip(codes, 0, 255).astype(np.uint8)
    codes[scale == 0] = 0
    return DoubleQuantState(codes=codes, scale=scale, offset=offset, count=count, block=block)


def dequantize_absmax(state: DoubleQuantState) -> np.ndarray:
    rows = state.codes.astype(np.float64) * state.scale[:, None] + state.offset[:, None]
    return rows.reshape(-1)[: state.count]


def nf4_quantize(
    weights: np.ndarray, block: int = NF4_BLOCK, dq_block: int = DQ_BLOCK
) -> tuple[Nf4Quantized, DoubleQuantState]:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        raise QuantError("cannot quantize an empty tensor")
    rows = _pad_to_blocks(weights.reshape(-1), block)
    absmax = np.abs(rows).max(axis=1)
    safe = np.where(absmax > 0, absmax, 1.0)
    normalized = rows / safe[:, None]
    # nearest codebook entry; argmin takes the first (smaller) index on ties
    codes = np.abs(normalized[:, :, None] - NF4_CODEBOOK[None, None, :]).argmin(axis=2).astype(np.uint8)
    codes[absmax == 0] = _ZERO_CODE
    q = Nf4Quantized(codes=codes, shape=weights.shape, count=weights.size, block=block)
    return q, quantize_absmax(absmax, block=dq_block)


def nf4_dequantize(q: Nf4Quantized, dq: DoubleQuantState) -> np.ndarray:
    absmax = dequantize_absmax(dq)
    if absmax.size != q.codes.shape[0]:
        raise QuantError(
            f"absmax count {absmax.size} does not match block count {q.codes.shape[0]}"
        )
    rows = NF4_CODEBOOK[q.codes] * absmax[:, None]
    return rows.reshape(-1)[: q.count].reshape(q.shape)


def nf4_roundtrip(weights: np.ndarray, block: int = NF4_BLOCK, dq_block: int = DQ_BLOCK) -> np.ndarray:
    q, dq = nf4_quantize(weights, block=block, dq_block=dq_block)
    return nf4_dequantize(q, dq)


def max_adjacent_gap() -> float:
    return float(np.diff(NF4_CODEBOOK).max())
