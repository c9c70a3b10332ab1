"""Dense FP32 tensors, depth-block bookkeeping and the reference convolution.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 and rank 4.
Weights are laid out (C_o, C_i, K_h, K_w); activations are (1, C, H, W).
``as_tensor4d`` is the single validation gate: it returns a read-only,
C-contiguous float32 copy and rejects NaN/Inf.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ShapeError


def as_tensor4d(data, name: str = "tensor") -> np.ndarray:
    """Validate ``data`` as a finite rank-4 float32 tensor.

    Rank-3 input (C, H, W) is promoted to (1, C, H, W). The returned array
    is a private read-only copy, so it can be shared between threads.
    """
    arr = np.array(data, dtype=np.float32, order="C", copy=True)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be rank 4, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"{name} has an empty extent: {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


def num_blocks(channels: int, block_size: int) -> int:
    """Number of depth blocks, ``ceil(channels / block_size)``."""
    return -(-channels // block_size)


def block_bounds(channels: int, block_size: int) -> list[tuple[int, int]]:
    """``(start, stop)`` channel ranges of each depth block.

    The final block is shorter when ``block_size`` does not divide
    ``channels``.
    """
    return [(s, min(s + block_size, channels)) for s in range(0, channels, block_size)]


@dataclass(frozen=True)
class ConvParams:
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        stride = _pair(self.stride)
        padding = _pair(self.padding)
        if min(stride) < 1:
            raise ConfigError(f"stride must be positive, got {stride}")
        if min(padding) < 0:
            raise ConfigError(f"padding must be non-negative, got {padding}")
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)

    def output_size(self, in_hw: Sequence[int], kernel_hw: Sequence[int]) -> tuple[int, int]:
        out = []
        for n, k, s, p in zip(in_hw, kernel_hw, self.stride, self.padding):
            span = n + 2 * p - k
            if span < 0:
                raise ShapeError(
                    f"kernel {tuple(kernel_hw)} larger than padded input {tuple(in_hw)}"
                )
            out.append(span // s + 1)
        return out[0], out[1]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


class DepthBlock(NamedTuple):
    """One (1, B, 1, 1) slice: ``t[index, start:stop, row, col]``."""

    index: int
    start: int
    stop: int
    row: int
    col: int


def max_abs(t: np.ndarray, block: DepthBlock) -> float:
    """Largest magnitude inside a depth block; 0.0 when the block is all zero."""
    d0, d1, d2, d3 = t.shape
    i, start, stop, r, c = block
    if not (0 <= i < d0 and 0 <= start < stop <= d1 and 0 <= r < d2 and 0 <= c < d3):
        raise ShapeError(f"block {tuple(block)} out of bounds for shape {t.shape}")
    return float(np.max(np.abs(t[i, start:stop, r, c])))


def pad_spatial(x: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)])


def window(x: np.ndarray, row: int, col: int, stride, out_hw) -> np.ndarray:
    """Input samples touched by kernel tap (row, col) for every output pixel.

    ``x`` is (..., H_padded, W_padded); the result is (..., H', W').
    """
    sh, sw = stride
    oh, ow = out_hw
    return x[..., row : row + sh * (oh - 1) + 1 : sh, col : col + sw * (ow - 1) + 1 : sw]


def fp_conv_reference(x, weights, bias=None, params: ConvParams | None = None,
                      workers: int = 1) -> np.ndarray:
    """Direct cross-correlation, the correctness oracle for the integer path.

    Every output element is accumulated in float64 in a fixed order
    (input channel, then kernel row, then kernel column), the bias is added
    last and the result is rounded once to float32. Work is split across
    ``workers`` threads by output channel only, so the bytes never depend
    on the thread count.
    """
    x = as_tensor4d(x, "input")
    w = as_tensor4d(weights, "weights")
    params = params or ConvParams()
    if x.shape[0] != 1:
        raise ShapeError(f"batch must be 1, got {x.shape[0]}")
    c_out, c_in, kh, kw = w.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {c_in}")
    if bias is None:
        bias = np.zeros(c_out, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    if not np.isfinite(bias).all():
        raise ValueError("bias contains NaN or Inf")

    out_hw = params.output_size(x.shape[2:], (kh, kw))
    xp = pad_spatial(x[0].astype(np.float64), params.padding)
    w64 = w.astype(np.float64)

    def run(lo: int, hi: int) -> np.ndarray:
        acc = np.zeros((hi - lo,) + out_hw, dtype=np.float64)
        for c in range(c_in):
            for i in range(kh):
                for j in range(kw):
                    tap = window(xp[c], i, j, params.stride, out_hw)
                    acc += w64[lo:hi, c, i, j, None, None] * tap
        acc += bias[lo:hi, None, None]
        return acc.astype(np.float32)

    out = np.empty((1, c_out) + out_hw, dtype=np.float32)
    for lo, hi, part in _map_channels(run, c_out, workers):
        out[0, lo:hi] = part
    return out


def _map_channels(fn, c_out: int, workers: int):
    """Run ``fn(lo, hi)`` over contiguous output-channel ranges."""
    workers = max(1, min(int(workers), c_out))
    step = math.ceil(c_out / workers)
    ranges = [(lo, min(lo + step, c_out)) for lo in range(0, c_out, step)]
    if workers == 1:
        return [(lo, hi, fn(lo, hi)) for lo, hi in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda r: fn(*r), ranges))
    return [(lo, hi, p) for (lo, hi), p in zip(ranges, parts)]
