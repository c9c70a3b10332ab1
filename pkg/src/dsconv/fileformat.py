"""Little-endian binary containers for tensors and quantized models.

Tensor block (``DSC1``)::

    magic   4s   b"DSC1"
    dtype   u8   0 = fp32, 1 = int8 weight integers, 2 = BFP activations
    b       u8   bit width (0 for plain fp32)
    B       u16  block size (0 for plain fp32)
    ndim    u8
    dims    u32 * ndim
    payload      fp32: float32 * prod(dims)
                 int8: int8 * prod(dims), one byte per value
                 bfp:  uint8 mantissas * prod(dims), then int8 exponents
                       * ceil(C/B)*H*W where (C, H, W) are the last 3 dims

Model file (``DSM1``)::

    magic   4s   b"DSM1"
    count   u16  number of layers
    per layer:
        name_len u16, name utf-8
        stride_h u32, stride_w u32, pad_h u32, pad_w u32
        tensor block, dtype int8 (weight integers, carries b and B)
        tensor block, dtype fp32 (block scales)
        n_bias u32, float32 * n_bias
"""

from __future__ import annotations

import struct
from math import prod
from os import PathLike
from typing import BinaryIO, Union

import numpy as np

from .activations import BFPTensor
from .engine import DSConvLayer
from .errors import FormatError
from .tensor import ConvParams, num_blocks
from .weights import QuantConfig

TENSOR_MAGIC = b"DSC1"
MODEL_MAGIC = b"DSM1"

FP32, INT8, BFP = 0, 1, 2
_HEADER = struct.Struct("<4sBBHB")

PathOrFile = Union[str, PathLike, BinaryIO]


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise FormatError(
                f"truncated {what}: expected {n} bytes, only {len(self.buf) - self.pos} remain",
                self.pos,
            )
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt).copy()


# -- tensor blocks ----------------------------------------------------------

def _pack_tensor(dtype: int, dims, b: int, B: int, payload: bytes) -> bytes:
    if len(dims) > 255:
        raise FormatError("too many dimensions")
    head = _HEADER.pack(TENSOR_MAGIC, dtype, b, B, len(dims))
    return head + struct.pack(f"<{len(dims)}I", *dims) + payload


def encode_tensor(obj, b: int = 0, B: int = 0) -> bytes:
    """Serialize a float32 array, an int8 weight-integer array or a BFPTensor.

    Integer arrays are written as dtype int8; pass the layer's ``b`` and
    ``B`` so they travel with the payload.
    """
    if isinstance(obj, BFPTensor):
        payload = obj.mantissa.astype("<u1").tobytes() + obj.exponent.astype("<i1").tobytes()
        return _pack_tensor(BFP, obj.mantissa.shape, obj.b, obj.B, payload)
    arr = np.asarray(obj)
    if arr.dtype.kind in "iu":
        if arr.size and (arr.min() < -128 or arr.max() > 127):
            raise FormatError("integer tensor does not fit in int8")
        return _pack_tensor(INT8, arr.shape, b, B, arr.astype("<i1").tobytes())
    return _pack_tensor(FP32, arr.shape, b, B, arr.astype("<f4").tobytes())


def _read_tensor(r: _Reader):
    start = r.pos
    magic, dtype, b, B, ndim = _HEADER.unpack(r.take(_HEADER.size, "tensor header"))
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}", start)
    dims = r.unpack(f"{ndim}I", "tensor dims")
    count = prod(dims)
    if dtype == FP32:
        return r.array("<f4", count, "fp32 payload").astype(np.float32).reshape(dims)
    if dtype == INT8:
        return r.array("<i1", count, "int8 payload").astype(np.int8).reshape(dims)
    if dtype == BFP:
        if ndim not in (3, 4) or B < 1:
            raise FormatError(f"bfp tensor needs rank 3 or 4 and B >= 1, got {dims}, B={B}", start)
        c, h, w = dims[-3:]
        mant = r.array("<u1", count, "bfp mantissas").reshape(dims)
        expo = r.array("<i1", num_blocks(c, B) * h * w, "bfp exponents")
        try:
            return BFPTensor(mant, expo.reshape(-1, h, w), b, B)
        except ValueError as exc:
            raise FormatError(f"invalid bfp tensor: {exc}", start) from exc
    raise FormatError(f"unknown dtype code {dtype}", start + 4)


def decode_tensor(buf: bytes):
    """Inverse of :func:`encode_tensor`; rejects trailing bytes."""
    r = _Reader(bytes(buf))
    out = _read_tensor(r)
    _expect_end(r)
    return out


def read_tensor_header(buf: bytes) -> dict:
    r = _Reader(bytes(buf))
    magic, dtype, b, B, ndim = _HEADER.unpack(r.take(_HEADER.size, "tensor header"))
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}", 0)
    return {"dtype": dtype, "b": b, "B": B, "dims": r.unpack(f"{ndim}I", "tensor dims")}


def _expect_end(r: _Reader) -> None:
    if r.pos != len(r.buf):
        raise FormatError(
            f"{len(r.buf) - r.pos} unexpected trailing bytes after payload", r.pos
        )


# -- models -----------------------------------------------------------------

def encode_model(layers) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<H", len(layers))]
    for layer in layers:
        name = layer.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<4I", *layer.params.stride, *layer.params.padding))
        parts.append(encode_tensor(layer.vqk, layer.cfg.b, layer.cfg.B))
        parts.append(encode_tensor(layer.kds, layer.cfg.b, layer.cfg.B))
        parts.append(struct.pack("<I", len(layer.bias)) + layer.bias.astype("<f4").tobytes())
    return b"".join(parts)


def decode_model(buf: bytes) -> list[DSConvLayer]:
    r = _Reader(bytes(buf))
    magic = r.take(4, "model magic")
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad model magic {magic!r}", 0)
    (count,) = r.unpack("H", "layer count")
    layers = []
    for n in range(count):
        at = r.pos
        (name_len,) = r.unpack("H", f"layer {n} name length")
        try:
            name = r.take(name_len, f"layer {n} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"layer {n} name is not utf-8", at) from exc
        sh, sw, ph, pw = r.unpack("4I", f"layer {n} conv params")
        vq_at = r.pos
        vqk = _read_tensor(r)
        if vqk.dtype != np.int8 or vqk.ndim != 4:
            raise FormatError(f"layer {n}: first tensor must be rank-4 int8", vq_at)
        b, B = _layer_bits(r.buf, vq_at)
        kds = _read_tensor(r)
        if kds.dtype != np.float32:
            raise FormatError(f"layer {n}: scale tensor must be fp32", vq_at)
        (nb,) = r.unpack("I", f"layer {n} bias length")
        bias = r.array("<f4", nb, f"layer {n} bias").astype(np.float32)
        try:
            layers.append(DSConvLayer(vqk, kds, bias, QuantConfig(b, B),
                                      ConvParams((sh, sw), (ph, pw)), name))
        except ValueError as exc:
            raise FormatError(f"layer {n} is inconsistent: {exc}", at) from exc
    _expect_end(r)
    return layers


def _layer_bits(buf: bytes, pos: int) -> tuple[int, int]:
    _, _, b, B, _ = _HEADER.unpack_from(buf, pos)
    return b, B


# -- file helpers -----------------------------------------------------------

def _read_bytes(src: PathOrFile) -> bytes:
    if hasattr(src, "read"):
        return src.read()
    with open(src, "rb") as fh:
        return fh.read()


def _write_bytes(dst: PathOrFile, data: bytes) -> None:
    if hasattr(dst, "write"):
        dst.write(data)
        return
    with open(dst, "wb") as fh:
        fh.write(data)


def write_tensor(dst: PathOrFile, obj, b: int = 0, B: int = 0) -> None:
    _write_bytes(dst, encode_tensor(obj, b, B))


def read_tensor(src: PathOrFile):
    return decode_tensor(_read_bytes(src))


def write_model(dst: PathOrFile, layers) -> None:
    _write_bytes(dst, encode_model(layers))


def read_model(src: PathOrFile) -> list[DSConvLayer]:
    return decode_model(_read_bytes(src))
