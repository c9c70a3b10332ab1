"""Block quantization of convolution weights.

A weight tensor (C_o, C_i, K_h, K_w) is split into

* ``vqk``: int8 tensor of the same shape holding b-bit signed integers, and
* ``kds``: float32 tensor (C_o, ceil(C_i/B), K_h, K_w), one scale per block
  of B consecutive input channels.

Reconstruction is ``kds[o, k, i, j] * vqk[o, c, i, j]`` for channel ``c`` in
block ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateBlockError, ShapeError
from .tensor import as_tensor4d, block_bounds, num_blocks

ACCUMULATOR_BITS = 31


@dataclass(frozen=True)
class QuantConfig:
    b: int = 4
    B: int = 64

    def __post_init__(self):
        check_bits(self.b)
        if int(self.B) != self.B or self.B < 1:
            raise ConfigError(f"B must be a positive integer, got {self.B}")
        object.__setattr__(self, "b", int(self.b))
        object.__setattr__(self, "B", int(self.B))

    @property
    def qmax(self) -> int:
        return 2 ** (self.b - 1) - 1

    def check_accumulator(self, c_in: int, act_bits: int | None = None) -> None:
        """Raise ConfigError if a block dot product could overflow int32.

        Weights are at most ``2^(b-1) - 1`` in magnitude and mantissas below
        ``2^b_act``, so ``b + b_act + ceil(log2(n))`` bits bound the sum of
        ``n = min(B, C_i)`` products.
        """
        act_bits = self.b if act_bits is None else act_bits
        n = min(self.B, c_in)
        need = self.b + act_bits + math.ceil(math.log2(n))
        if need > ACCUMULATOR_BITS:
            raise ConfigError(
                f"block accumulator needs {need} bits (b={self.b}, b_act={act_bits}, "
                f"block length {n}); limit is {ACCUMULATOR_BITS}"
            )


def check_bits(b) -> int:
    if int(b) != b or not 2 <= b <= 8:
        raise ConfigError(f"b must be in 2..=8, got {b}")
    return int(b)


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (exact, no +0.5 drift)."""
    t = np.trunc(v)
    tie = np.abs(v - t) == 0.5
    return np.where(tie, t + np.sign(v), np.rint(v))


def _quantize_rows(w: np.ndarray, b: int) -> tuple[np.ndarray, np.ndarray]:
    """Quantize each row of ``w`` (blocks x n) as one block.

    The dot products run sequentially over the block axis, so a row gives
    the same bits whether it is quantized alone or alongside others.
    """
    w = np.asarray(w, dtype=np.float64)
    m = 2 ** (b - 1) - 1
    wmax = np.max(np.abs(w), axis=1)
    live = wmax > 0
    scale = np.divide(m, wmax, out=np.zeros_like(wmax), where=live)
    wq = round_half_away(w * scale[:, None])
    num = np.zeros(len(w))
    den = np.zeros(len(w))
    for k in range(w.shape[1]):
        num += w[:, k] * wq[:, k]
        den += wq[:, k] * wq[:, k]
    xi = np.divide(num, den, out=np.zeros_like(num), where=live)
    return wq.astype(np.int8), xi.astype(np.float32)


def _check_block(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float32).ravel()
    if w.size == 0:
        raise ShapeError("block is empty")
    if not np.isfinite(w).all():
        raise ValueError("block contains NaN or Inf")
    return w


def quantize_block(w, b: int) -> tuple[np.ndarray, float]:
    """Quantize one depth block to b-bit integers and fit its L2 scale.

    Integers are ``round(w * m / max|w|)`` with ``m = 2^(b-1) - 1`` and the
    scale is the least-squares fit ``sum(w*wq) / sum(wq^2)``. An all-zero
    block maps to zero integers and a zero scale.

    >>> wq, xi = quantize_block([3.5, -1.5], 4)
    >>> wq.tolist(), xi
    ([7, -3], 0.5)
    """
    check_bits(b)
    w = _check_block(w)
    wq, xi = _quantize_rows(w[None], b)
    return wq[0], float(xi[0])


def naive_scale(w, b: int) -> float:
    """Scale implied by the stretch step alone, ``max|w| / m``."""
    w = _check_block(w)
    return float(np.max(np.abs(w.astype(np.float64)))) / (2 ** (check_bits(b) - 1) - 1)


def _log_softmax(v: np.ndarray) -> np.ndarray:
    v = v - v.max()
    return v - np.log(np.sum(np.exp(v)))


def kl_objective(w, wq, xi: float) -> float:
    """KL(softmax(w) || softmax(xi * wq))."""
    w = np.asarray(w, dtype=np.float64)
    wq = np.asarray(wq, dtype=np.float64)
    log_t = _log_softmax(w)
    log_i = _log_softmax(xi * wq)
    return float(np.sum(np.exp(log_t) * (log_t - log_i)))


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def kl_fit_scale(w, wq, tol: float = 1e-9) -> float:
    """Scale minimizing the KL divergence between softmax(w) and softmax(xi*wq).

    The objective is convex in ``xi`` (log-sum-exp minus a linear term), so a
    golden-section search over ``[0, 4 * |xi_L2|]`` finds the minimum; it
    stops once the bracket is narrower than ``tol``. When every integer in
    the block is equal the objective is flat and the lower bracket end, 0,
    is returned.
    """
    w = _check_block(w).astype(np.float64)
    wq = np.asarray(wq, dtype=np.float64).ravel()
    if wq.shape != w.shape:
        raise ShapeError(f"w has {w.size} values, wq has {wq.size}")
    den = float(np.dot(wq, wq))
    if den == 0.0:
        raise DegenerateBlockError("cannot fit a scale to an all-zero integer block")
    lo = 0.0
    if np.all(wq == wq[0]):
        return lo
    hi = 4.0 * abs(float(np.dot(w, wq)) / den) or 1.0

    f = lambda s: kl_objective(w, wq, s)  # noqa: E731
    a, d = lo, hi
    b_ = d - _INV_PHI * (d - a)
    c = a + _INV_PHI * (d - a)
    fb, fc = f(b_), f(c)
    while d - a > tol:
        if fb <= fc:
            d, c, fc = c, b_, fb
            b_ = d - _INV_PHI * (d - a)
            fb = f(b_)
        else:
            a, b_, fb = b_, c, fc
            c = a + _INV_PHI * (d - a)
            fc = f(c)
    return 0.5 * (a + d)


def quantize_weights(w, cfg: QuantConfig, mode: str = "l2") -> tuple[np.ndarray, np.ndarray]:
    """Split ``w`` into (vqk, kds) block by block along the input-channel axis.

    ``mode="kl"`` keeps the same integers but refits each nonzero block's
    scale with :func:`kl_fit_scale`.
    """
    if mode not in ("l2", "kl"):
        raise ConfigError(f"mode must be 'l2' or 'kl', got {mode!r}")
    w = as_tensor4d(w, "weights")
    c_out, c_in, kh, kw = w.shape
    vqk = np.empty(w.shape, dtype=np.int8)
    kds = np.empty((c_out, num_blocks(c_in, cfg.B), kh, kw), dtype=np.float32)
    # (C_o, K_h, K_w, C_i) so each depth block is a contiguous row slice
    wt = np.moveaxis(w, 1, -1)
    for k, (start, stop) in enumerate(block_bounds(c_in, cfg.B)):
        rows = wt[..., start:stop].reshape(-1, stop - start)
        wq, xi = _quantize_rows(rows, cfg.b)
        if mode == "kl":
            for r in np.flatnonzero(xi):
                xi[r] = kl_fit_scale(rows[r], wq[r])
        vqk[:, start:stop] = np.moveaxis(wq.reshape(c_out, kh, kw, -1), -1, 1)
        kds[:, k] = xi.reshape(c_out, kh, kw)
    return vqk, kds


def expand_scales(kds: np.ndarray, c_in: int, block_size: int) -> np.ndarray:
    """Repeat each block scale over its channels: (C_o, C_i, K_h, K_w)."""
    if kds.shape[1] != num_blocks(c_in, block_size):
        raise ShapeError(
            f"kds depth {kds.shape[1]} does not match ceil({c_in}/{block_size})"
        )
    return np.repeat(kds, block_size, axis=1)[:, :c_in]


def dequantize(vqk, kds, cfg: QuantConfig) -> np.ndarray:
    """Reconstruct FP32 weights, elementwise ``scale * integer``."""
    vqk = np.asarray(vqk)
    kds = np.asarray(kds, dtype=np.float32)
    if vqk.ndim != 4 or kds.ndim != 4:
        raise ShapeError("vqk and kds must both be rank 4")
    c_out, c_in, kh, kw = vqk.shape
    if kds.shape != (c_out, num_blocks(c_in, cfg.B), kh, kw):
        raise ShapeError(f"kds shape {kds.shape} inconsistent with vqk {vqk.shape}, B={cfg.B}")
    return expand_scales(kds, c_in, cfg.B) * vqk.astype(np.float32)
