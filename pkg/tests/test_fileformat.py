import io
import struct

import numpy as np
import pytest

from dsconv.activations import bfp_encode_tensor
from dsconv.engine import DSConvLayer
from dsconv.errors import FormatError
from dsconv.fileformat import (decode_model, decode_tensor, encode_model, encode_tensor,
                               read_model, read_tensor, write_model, write_tensor)
from dsconv.tensor import ConvParams
from dsconv.weights import QuantConfig


def test_fp32_scalar_bytes():
    blob = encode_tensor(np.array([[[[3.5]]]], dtype=np.float32))
    assert blob[:4] == b"DSC1"
    assert blob[-4:] == bytes([0x00, 0x00, 0x60, 0x40])
    assert len(blob) == 4 + 1 + 1 + 2 + 1 + 4 * 4 + 4
    out = decode_tensor(blob)
    assert out.dtype == np.float32 and out.shape == (1, 1, 1, 1)
    assert out.tobytes() == np.float32(3.5).tobytes()


def test_header_layout():
    blob = encode_tensor(np.zeros((2, 3), np.int8), b=4, B=300)
    assert struct.unpack_from("<4sBBHB2I", blob) == (b"DSC1", 1, 4, 300, 2, 2, 3)


def test_int8_round_trip(rng):
    vqk = rng.integers(-7, 8, (4, 10, 3, 3)).astype(np.int8)
    out = decode_tensor(encode_tensor(vqk, 4, 8))
    assert out.dtype == np.int8 and out.tobytes() == vqk.tobytes()


def test_bfp_round_trip(rng):
    t = bfp_encode_tensor(np.abs(rng.standard_normal((1, 11, 4, 3))), 5, 4)
    out = decode_tensor(encode_tensor(t))
    assert out.same_encoding(t)


def test_file_helpers(tmp_path, rng):
    x = rng.standard_normal((1, 2, 3, 4)).astype(np.float32)
    write_tensor(tmp_path / "x.dsc", x)
    assert read_tensor(tmp_path / "x.dsc").tobytes() == x.tobytes()
    buf = io.BytesIO()
    write_tensor(buf, x)
    assert read_tensor(io.BytesIO(buf.getvalue())).tobytes() == x.tobytes()


def test_truncated_payload():
    blob = encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(FormatError, match="expected 16 bytes, only 15 remain") as exc:
        decode_tensor(blob[:-1])
    assert exc.value.offset == 4 + 1 + 1 + 2 + 1 + 8


@pytest.mark.parametrize("cut", [0, 3, 6, 9, 12])
def test_truncated_header(cut):
    blob = encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(FormatError):
        decode_tensor(blob[:cut])


def test_unknown_dtype_and_magic():
    blob = bytearray(encode_tensor(np.ones(2, np.float32)))
    blob[4] = 9
    with pytest.raises(FormatError, match="unknown dtype"):
        decode_tensor(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        decode_tensor(b"XXXX" + bytes(blob[4:]))


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError, match="trailing"):
        decode_tensor(encode_tensor(np.ones(2, np.float32)) + b"\0")


def test_int_range_checked():
    with pytest.raises(FormatError):
        encode_tensor(np.array([200], dtype=np.int16))


def make_layers(rng):
    w1 = rng.standard_normal((4, 6, 3, 3)).astype(np.float32)
    w2 = rng.standard_normal((2, 4, 1, 1)).astype(np.float32)
    return [
        DSConvLayer.from_weights(w1, rng.standard_normal(4), QuantConfig(4, 4),
                                 ConvParams((2, 1), (1, 0)), name="conv1"),
        DSConvLayer.from_weights(w2, None, QuantConfig(8, 64), name="proj ü"),
    ]


def assert_same_layers(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.name == y.name and x.cfg == y.cfg and x.params == y.params
        for f in ("vqk", "kds", "bias"):
            assert getattr(x, f).tobytes() == getattr(y, f).tobytes()
            assert getattr(x, f).dtype == getattr(y, f).dtype


def test_model_round_trip(tmp_path, rng):
    layers = make_layers(rng)
    write_model(tmp_path / "m.dsm", layers)
    back = read_model(tmp_path / "m.dsm")
    assert_same_layers(layers, back)
    assert encode_model(back) == encode_model(layers)


def test_model_truncation_everywhere(rng):
    blob = encode_model(make_layers(rng))
    for cut in range(len(blob)):
        with pytest.raises(FormatError):
            decode_model(blob[:cut])


def test_model_inconsistent_layer(rng):
    blob = bytearray(encode_model(make_layers(rng)[1:]))
    # layer header: magic 4, count 2, name_len 2 + name, 4 x u32 params
    name_len = struct.unpack_from("<H", blob, 6)[0]
    vqk_at = 8 + name_len + 16
    blob[vqk_at + 6 : vqk_at + 8] = struct.pack("<H", 3)  # B=3 breaks the kds depth
    with pytest.raises(FormatError, match="inconsistent"):
        decode_model(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        decode_model(b"DSM2" + bytes(blob[4:]))
