"""Block floating point (BFP) encoding of non-negative activations.

Each depth block of B channels at one spatial position shares a signed
exponent E; each value keeps a b-bit unsigned mantissa ``m`` and decodes as
``m * 2**E``. E is chosen so the block maximum's mantissa lands in
``[2^(b-1), 2^b)``, then every mantissa is rounded to the nearest step (half
LSB, ties up) and clamped to ``2^b - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import as_tensor4d, block_bounds, num_blocks

EXP_MIN, EXP_MAX = -128, 127


def _check_act_bits(b) -> int:
    if int(b) != b or not 2 <= b <= 8:
        raise ConfigError(f"activation b must be in 2..=8, got {b}")
    return int(b)


def _encode_blocks(x: np.ndarray, b: int, axis: int = 0):
    """Encode along ``axis``, treating the whole axis as one block.

    Returns (mantissa uint8, exponent int8 with ``axis`` removed, clamp mask).
    """
    x = np.asarray(x, dtype=np.float32)
    if not np.isfinite(x).all():
        raise ValueError("activations contain NaN or Inf")
    if (x < 0).any():
        raise ValueError("activations must be non-negative (apply ReLU first)")
    peak = np.max(x, axis=axis).astype(np.float64)
    _, e2 = np.frexp(peak)  # peak = f * 2**e2, f in [0.5, 1)
    exp = np.where(peak > 0, e2 - 1 - (b - 1), 0)
    exp = np.clip(exp, EXP_MIN, EXP_MAX)
    scaled = np.ldexp(x.astype(np.float64), -np.expand_dims(exp, axis))
    raw = np.floor(scaled + 0.5)
    top = 2**b - 1
    clamped = raw > top
    mant = np.minimum(raw, top).astype(np.uint8)
    return mant, exp.astype(np.int8), clamped


def bfp_encode(x, b: int, return_clamped: bool = False):
    """Encode one block of non-negative values.

    >>> m, e = bfp_encode([3.0, 0.4, 1.1], 3)
    >>> m.tolist(), e
    ([6, 1, 2], -1)
    """
    b = _check_act_bits(b)
    x = np.asarray(x, dtype=np.float32).ravel()
    if x.size == 0:
        raise ShapeError("block is empty")
    m, e, clamped = _encode_blocks(x, b)
    if return_clamped:
        return m, int(e), clamped
    return m, int(e)


def bfp_decode_block(mantissas, exponent: int) -> np.ndarray:
    return np.ldexp(np.asarray(mantissas, dtype=np.float32), int(exponent))


@dataclass(frozen=True, eq=False)
class BFPTensor:
    """Mantissa tensor (1, C, H, W) plus exponent tensor (ceil(C/B), H, W).

    ``clamped`` marks elements whose rounded mantissa overflowed and was
    saturated at ``2^b - 1``; it is diagnostic only and not serialized.
    """

    mantissa: np.ndarray
    exponent: np.ndarray
    b: int
    B: int
    clamped: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        _check_act_bits(self.b)
        m = np.asarray(self.mantissa)
        if m.ndim == 3:
            m = m[None]
        if m.ndim != 4 or m.shape[0] != 1:
            raise ShapeError(f"mantissa must be (1, C, H, W), got {m.shape}")
        _, c, h, w = m.shape
        expected = (num_blocks(c, self.B), h, w)
        e = np.asarray(self.exponent)
        if e.shape != expected:
            raise ShapeError(f"exponent shape {e.shape}, expected {expected}")
        if (m >= 2**self.b).any() or (m < 0).any():
            raise ValueError(f"mantissa out of range for b={self.b}")
        if (e < EXP_MIN).any() or (e > EXP_MAX).any():
            raise ValueError("exponent out of int8 range")
        m = m.astype(np.uint8)
        e = e.astype(np.int8)
        m.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "mantissa", m)
        object.__setattr__(self, "exponent", e)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mantissa.shape

    @property
    def clamp_count(self) -> int:
        return 0 if self.clamped is None else int(np.count_nonzero(self.clamped))

    def expanded_exponent(self) -> np.ndarray:
        """Exponent repeated over channels, shape (C, H, W)."""
        c = self.mantissa.shape[1]
        return np.repeat(self.exponent, self.B, axis=0)[:c]

    def same_encoding(self, other: "BFPTensor") -> bool:
        return (
            self.b == other.b
            and self.B == other.B
            and np.array_equal(self.mantissa, other.mantissa)
            and np.array_equal(self.exponent, other.exponent)
        )


def bfp_encode_tensor(x, b: int, B: int) -> BFPTensor:
    """Encode a (1, C, H, W) activation map with depth blocks of size ``B``."""
    b = _check_act_bits(b)
    if int(B) != B or B < 1:
        raise ConfigError(f"B must be a positive integer, got {B}")
    x = as_tensor4d(x, "activations")
    if x.shape[0] != 1:
        raise ShapeError(f"batch must be 1, got {x.shape[0]}")
    _, c, h, w = x.shape
    mant = np.empty(x.shape, dtype=np.uint8)
    clamped = np.empty(x.shape, dtype=bool)
    exp = np.empty((num_blocks(c, B), h, w), dtype=np.int8)
    for k, (start, stop) in enumerate(block_bounds(c, B)):
        m, e, cl = _encode_blocks(x[0, start:stop], b, axis=0)
        mant[0, start:stop] = m
        clamped[0, start:stop] = cl
        exp[k] = e
    return BFPTensor(mant, exp, b, int(B), clamped)


def bfp_decode(t: BFPTensor) -> np.ndarray:
    """Decode to float32, elementwise ``mantissa * 2**exponent``."""
    m = t.mantissa.astype(np.float32)
    out = np.ldexp(m, t.expanded_exponent()[None].astype(np.int32))
    return out.astype(np.float32)
