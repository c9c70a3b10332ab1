"""Integer-path convolution over quantized weights and BFP activations.

For every output pixel and filter ``o`` the layer computes, per depth block
``k`` and kernel tap ``(i, j)``:

1. an integer dot product between the weight integers of that block and the
   aligned activation mantissas (exact, int64 with an int32 range check);
2. a float scale ``kds[o, k, i, j] * 2**E`` where ``E`` is the shared
   exponent of the activation block under that tap (``ldexp``, exact);
3. one float32 multiply-accumulate of the two into the output.

Terms are accumulated in ascending (block, kernel row, kernel column) order
and the bias is added last.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .activations import BFPTensor, bfp_encode_tensor
from .errors import ConfigError, ShapeError
from .tensor import ConvParams, _map_channels, block_bounds, num_blocks, pad_spatial, window
from .weights import QuantConfig, quantize_weights

INT32_MAX = 2**31 - 1


@dataclass
class MacCounter:
    """Tally of multiply-accumulates issued by :func:`dsconv_forward`."""

    fp_macs: int = 0
    int_macs: int = 0

    def add(self, other: "MacCounter") -> None:
        self.fp_macs += other.fp_macs
        self.int_macs += other.int_macs


@dataclass(frozen=True, eq=False)
class DSConvLayer:
    vqk: np.ndarray
    kds: np.ndarray
    bias: np.ndarray
    cfg: QuantConfig
    params: ConvParams = field(default_factory=ConvParams)
    name: str = ""

    def __post_init__(self):
        vqk = np.array(self.vqk, dtype=np.int8, copy=True)
        kds = np.array(self.kds, dtype=np.float32, copy=True)
        if vqk.ndim != 4:
            raise ShapeError(f"vqk must be rank 4, got {vqk.shape}")
        c_out, c_in, kh, kw = vqk.shape
        want = (c_out, num_blocks(c_in, self.cfg.B), kh, kw)
        if kds.shape != want:
            raise ShapeError(f"kds shape {kds.shape}, expected {want} for B={self.cfg.B}")
        if not np.isfinite(kds).all():
            raise ValueError("kds contains NaN or Inf")
        lim = 2 ** (self.cfg.b - 1)
        if (vqk < -lim).any() or (vqk >= lim).any():
            raise ConfigError(f"vqk values outside the {self.cfg.b}-bit range")
        bias = np.zeros(c_out, np.float32) if self.bias is None else self.bias
        bias = np.array(bias, dtype=np.float32, copy=True).ravel()
        if bias.shape != (c_out,):
            raise ShapeError(f"bias must have {c_out} entries, got {bias.shape}")
        self.cfg.check_accumulator(c_in)
        for a in (vqk, kds, bias):
            a.setflags(write=False)
        object.__setattr__(self, "vqk", vqk)
        object.__setattr__(self, "kds", kds)
        object.__setattr__(self, "bias", bias)

    @classmethod
    def from_weights(cls, weights, bias=None, cfg: QuantConfig | None = None,
                     params: ConvParams | None = None, mode: str = "l2", name: str = ""):
        cfg = cfg or QuantConfig()
        vqk, kds = quantize_weights(weights, cfg, mode=mode)
        return cls(vqk, kds, bias, cfg, params or ConvParams(), name)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return self.vqk.shape

    @property
    def in_channels(self) -> int:
        return self.vqk.shape[1]

    @property
    def out_channels(self) -> int:
        return self.vqk.shape[0]


@dataclass(frozen=True)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, n), dtype=np.float64).ravel()
                for n in ("gamma", "beta", "mean", "var")]
        if len({a.shape for a in arrs}) != 1:
            raise ShapeError("BN parameter vectors must share one length")
        if (arrs[3] < 0).any():
            raise ConfigError("BN variance must be non-negative")
        # eps = 0 is tolerated only while every variance is strictly positive
        if self.eps < 0 or (self.eps == 0 and not (arrs[3] > 0).all()):
            raise ConfigError("BN eps must be positive")
        for n, a in zip(("gamma", "beta", "mean", "var"), arrs):
            object.__setattr__(self, n, a)

    def __len__(self):
        return len(self.gamma)

    def apply(self, y: np.ndarray) -> np.ndarray:
        """Inference-mode batch norm over the channel axis of (1, C, H, W)."""
        inv = self.gamma / np.sqrt(self.var + self.eps)
        out = (y.astype(np.float64) - self.mean[None, :, None, None]) * inv[None, :, None, None]
        return (out + self.beta[None, :, None, None]).astype(np.float32)


def fold_bn(kds, bias, bn: BNParams) -> tuple[np.ndarray, np.ndarray]:
    """Absorb inference batch norm into block scales and bias.

    Each filter's scales are multiplied by ``gamma / sqrt(var + eps)``; the
    new bias is ``beta - gamma * mean / sqrt(var + eps)`` plus the old bias
    carried through the same factor. Integer weights are unaffected.
    """
    kds = np.asarray(kds, dtype=np.float32)
    c_out = kds.shape[0]
    bias = np.zeros(c_out) if bias is None else np.asarray(bias, dtype=np.float64).ravel()
    if len(bn) != c_out or bias.shape != (c_out,):
        raise ShapeError(f"BN has {len(bn)} channels, bias {bias.shape}, layer has {c_out}")
    inv = bn.gamma / np.sqrt(bn.var + bn.eps)
    kds_fold = (kds.astype(np.float64) * inv[:, None, None, None]).astype(np.float32)
    b_fold = bn.beta - bn.gamma * bn.mean / np.sqrt(bn.var + bn.eps) + inv * bias
    return kds_fold, b_fold.astype(np.float32)


def fold_bn_layer(layer: DSConvLayer, bn: BNParams) -> DSConvLayer:
    kds, bias = fold_bn(layer.kds, layer.bias, bn)
    return replace(layer, kds=kds, bias=bias)


def dsconv_forward(layer: DSConvLayer, act: BFPTensor, workers: int = 1,
                   counter: MacCounter | None = None) -> np.ndarray:
    """Convolve BFP activations with a quantized layer; returns (1, C_o, H', W').

    Splitting over ``workers`` threads partitions output channels only, so
    the result is byte-identical for any worker count. If ``counter`` is
    given it is incremented by the FP and integer MACs issued.
    """
    if act.B != layer.cfg.B:
        raise ShapeError(f"activation block size {act.B} != layer block size {layer.cfg.B}")
    c_out, c_in, kh, kw = layer.vqk.shape
    if act.shape[1] != c_in:
        raise ShapeError(f"activation has {act.shape[1]} channels, layer expects {c_in}")
    layer.cfg.check_accumulator(c_in, act.b)
    params = layer.params
    out_hw = params.output_size(act.shape[2:], (kh, kw))

    mant = pad_spatial(act.mantissa[0].astype(np.int64), params.padding)
    expo = pad_spatial(act.exponent.astype(np.int32), params.padding)
    blocks = block_bounds(c_in, layer.cfg.B)
    # (n_blocks, K_h, K_w): mantissa windows and exponent windows per tap
    taps = [[[(window(mant[s:e], i, j, params.stride, out_hw),
               window(expo[k], i, j, params.stride, out_hw))
              for j in range(kw)] for i in range(kh)] for k, (s, e) in enumerate(blocks)]
    vqk = layer.vqk.astype(np.int64)
    npix = out_hw[0] * out_hw[1]

    def run(lo: int, hi: int) -> np.ndarray:
        acc = np.zeros((hi - lo,) + out_hw, dtype=np.float32)
        for k, (s, e) in enumerate(blocks):
            for i in range(kh):
                for j in range(kw):
                    m, ex = taps[k][i][j]
                    dot = np.tensordot(vqk[lo:hi, s:e, i, j], m, axes=(1, 0))
                    if np.abs(dot).max(initial=0) > INT32_MAX:
                        raise OverflowError("block accumulator exceeded int32")
                    scale = np.ldexp(layer.kds[lo:hi, k, i, j, None, None], ex[None])
                    acc += dot.astype(np.int32).astype(np.float32) * scale
        acc += layer.bias[lo:hi, None, None]
        return acc

    out = np.empty((1, c_out) + out_hw, dtype=np.float32)
    for lo, hi, part in _map_channels(run, c_out, workers):
        out[0, lo:hi] = part
    if counter is not None:
        counter.int_macs += c_out * npix * c_in * kh * kw
        counter.fp_macs += c_out * npix * len(blocks) * kh * kw
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, dtype=np.float32)


def run_model(layers: Sequence[DSConvLayer], x, act_bits: int | None = None,
              relu_first: bool = False, workers: int = 1,
              counter: MacCounter | None = None) -> np.ndarray:
    """Run a chain of layers: (ReLU) -> BFP encode -> dsconv_forward, per layer.

    ReLU precedes every layer except the first, unless ``relu_first``. The
    first layer's input must then already be non-negative. Activations use
    each layer's bit width unless ``act_bits`` overrides it.
    """
    if not layers:
        raise ConfigError("model has no layers")
    y = np.asarray(x, dtype=np.float32)
    if y.ndim == 3:
        y = y[None]
    for n, layer in enumerate(layers):
        if n > 0 or relu_first:
            y = relu(y)
        if y.shape[1] != layer.in_channels:
            raise ShapeError(
                f"layer {n} ({layer.name or 'unnamed'}) expects {layer.in_channels} "
                f"channels, got {y.shape[1]}"
            )
        b = layer.cfg.b if act_bits is None else act_bits
        y = dsconv_forward(layer, bfp_encode_tensor(y, b, layer.cfg.B), workers, counter)
    return y


def run_fp_model(weights: Sequence[np.ndarray], biases, params: Sequence[ConvParams], x,
                 relu_first: bool = False, act_quant=None, workers: int = 1) -> np.ndarray:
    """Full-precision counterpart of :func:`run_model`.

    ``act_quant(y, n)``, if given, replaces each layer's input before the
    reference convolution, e.g. with its BFP decode, to build a per-layer
    oracle for the integer pipeline.
    """
    from .tensor import fp_conv_reference

    y = np.asarray(x, dtype=np.float32)
    if y.ndim == 3:
        y = y[None]
    for n, (w, bias, p) in enumerate(zip(weights, biases, params)):
        if n > 0 or relu_first:
            y = relu(y)
        if act_quant is not None:
            y = act_quant(y, n)
        y = fp_conv_reference(y, w, bias, p, workers=workers)
    return y
