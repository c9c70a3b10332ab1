import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsconv.activations import BFPTensor, bfp_decode, bfp_encode_tensor
from dsconv.cost import mac_counts
from dsconv.engine import (BNParams, DSConvLayer, MacCounter, dsconv_forward, fold_bn,
                           fold_bn_layer, run_fp_model, run_model)
from dsconv.errors import ConfigError, ShapeError
from dsconv.tensor import ConvParams, fp_conv_reference
from dsconv.weights import QuantConfig, dequantize


def rel_rms(a, ref):
    a, ref = np.asarray(a, np.float64), np.asarray(ref, np.float64)
    return np.sqrt(np.mean((a - ref) ** 2)) / np.sqrt(np.mean(ref**2))


def random_layer(rng, c_out, c_in, k, b, B, pad=0, stride=1):
    w = (rng.standard_normal((c_out, c_in, k, k)) * 0.1).astype(np.float32)
    bias = rng.standard_normal(c_out).astype(np.float32)
    return w, DSConvLayer.from_weights(w, bias, QuantConfig(b, B), ConvParams(stride, pad))


def oracle(layer, act):
    w_hat = dequantize(layer.vqk, layer.kds, layer.cfg)
    return fp_conv_reference(bfp_decode(act), w_hat, layer.bias, layer.params)


def test_zero_activations_give_bias(rng):
    _, layer = random_layer(rng, 4, 6, 3, 4, 4)
    act = bfp_encode_tensor(np.zeros((1, 6, 5, 5)), 4, 4)
    out = dsconv_forward(layer, act)
    assert np.array_equal(out, np.broadcast_to(layer.bias[None, :, None, None], out.shape))


def test_single_block_hand_computation():
    layer = DSConvLayer(np.array([[[[7]]]]), np.array([[[[0.5]]]]), [0.0], QuantConfig(4, 1))
    act = BFPTensor(np.array([[[[6]]]]), np.array([[[-1]]]), 4, 1)
    out = dsconv_forward(layer, act)
    assert out.ravel().tolist() == [10.5]
    assert out.ravel().tolist() == oracle(layer, act).ravel().tolist() == [3.5 * 3.0]


def test_oracle_equivalence_medium(rng):
    _, layer = random_layer(rng, 8, 16, 3, 8, 16)
    x = np.abs(rng.standard_normal((1, 16, 5, 5))).astype(np.float32)
    act = bfp_encode_tensor(x, 8, 16)
    assert rel_rms(dsconv_forward(layer, act), oracle(layer, act)) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c_in=st.integers(1, 40), k=st.integers(1, 3),
       b=st.integers(2, 8), B=st.integers(1, 48), stride=st.integers(1, 2), pad=st.integers(0, 1))
def test_oracle_equivalence_property(seed, c_in, k, b, B, stride, pad):
    rng = np.random.default_rng(seed)
    _, layer = random_layer(rng, 3, c_in, k, b, B, pad, stride)
    x = (np.abs(rng.standard_normal((1, c_in, 5, 6))) * rng.uniform(0.1, 10)).astype(np.float32)
    act = bfp_encode_tensor(x, b, B)
    out, ref = dsconv_forward(layer, act), oracle(layer, act)
    assert out.shape == ref.shape
    assert np.sqrt(np.mean((out.astype(np.float64) - ref) ** 2)) <= 1e-5 * (
        np.sqrt(np.mean(ref.astype(np.float64) ** 2)) + 1e-30)


def test_mixed_activation_bits(rng):
    _, layer = random_layer(rng, 4, 10, 3, 4, 4, pad=1)
    x = np.abs(rng.standard_normal((1, 10, 6, 6))).astype(np.float32)
    act = bfp_encode_tensor(x, 8, 4)
    assert rel_rms(dsconv_forward(layer, act), oracle(layer, act)) <= 1e-5


def test_exponent_merge_is_exact(rng):
    xi = rng.standard_normal(1000).astype(np.float32)
    e = rng.integers(-40, 40, 1000)
    merged = np.ldexp(xi, e)
    assert np.array_equal(merged.astype(np.float64), xi.astype(np.float64) * 2.0**e)


def test_counter_matches_cost_model(rng):
    for _ in range(10):
        c_in, k, B = int(rng.integers(1, 40)), int(rng.integers(1, 4)), int(rng.integers(1, 20))
        _, layer = random_layer(rng, int(rng.integers(1, 6)), c_in, k, 4, B)
        act = bfp_encode_tensor(np.abs(rng.standard_normal((1, c_in, 7, 6))), 4, B)
        counter = MacCounter()
        out = dsconv_forward(layer, act, counter=counter)
        assert (counter.fp_macs, counter.int_macs) == mac_counts(layer.weight_shape, B, out.shape[2:])


def test_workers_do_not_change_bytes(rng):
    _, layer = random_layer(rng, 9, 20, 3, 8, 8, pad=1)
    act = bfp_encode_tensor(np.abs(rng.standard_normal((1, 20, 8, 8))), 8, 8)
    ref = dsconv_forward(layer, act).tobytes()
    for n in (2, 4, 9, 32):
        assert dsconv_forward(layer, act, workers=n).tobytes() == ref


def test_adversarial_extremes_do_not_overflow():
    c_in, B, b = 128, 128, 8
    for sign in (1, -1):
        vqk = np.full((2, c_in, 3, 3), sign * 127, dtype=np.int8)
        layer = DSConvLayer(vqk, np.ones((2, 1, 3, 3)), None, QuantConfig(b, B))
        act = BFPTensor(np.full((1, c_in, 3, 3), 255), np.zeros((1, 3, 3)), b, B)
        out = dsconv_forward(layer, act)
        assert out.ravel().tolist() == [sign * 127 * 255 * 128 * 9] * 2


def test_accumulator_guard_at_construction():
    with pytest.raises(ConfigError):
        DSConvLayer(np.zeros((1, 2**16, 1, 1)), np.zeros((1, 1, 1, 1)), None,
                    QuantConfig(8, 2**16))


def test_forward_shape_errors(rng):
    _, layer = random_layer(rng, 2, 8, 1, 4, 4)
    with pytest.raises(ShapeError):
        dsconv_forward(layer, bfp_encode_tensor(np.ones((1, 8, 2, 2)), 4, 8))
    with pytest.raises(ShapeError):
        dsconv_forward(layer, bfp_encode_tensor(np.ones((1, 4, 2, 2)), 4, 4))
    with pytest.raises(ShapeError):
        DSConvLayer(layer.vqk, np.zeros((2, 3, 1, 1)), None, layer.cfg)
    with pytest.raises(ConfigError):
        DSConvLayer(np.full((1, 1, 1, 1), 8), np.zeros((1, 1, 1, 1)), None, QuantConfig(4, 1))


# -- batch norm folding -----------------------------------------------------

def test_identity_bn():
    kds = np.array([[[[0.25]]], [[[1.5]]]], dtype=np.float32)
    bn = BNParams(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), eps=0.0)
    k2, b2 = fold_bn(kds, [0.5, -2.0], bn)
    assert np.array_equal(k2, kds)
    assert b2.tolist() == [0.5, -2.0]


def test_hand_folded_bn():
    kds = np.array([[[[0.75]]]], dtype=np.float32)
    bn = BNParams([2.0], [3.0], [1.0], [4.0], eps=0.0)
    k2, b2 = fold_bn(kds, [0.0], bn)
    assert k2.ravel().tolist() == [0.75]
    assert b2.tolist() == [2.0]


def test_bn_validation():
    with pytest.raises(ConfigError):
        BNParams([1.0], [0.0], [0.0], [-1.0])
    with pytest.raises(ConfigError):
        BNParams([1.0], [0.0], [0.0], [0.0], eps=0.0)
    with pytest.raises(ShapeError):
        BNParams([1.0, 2.0], [0.0], [0.0], [1.0])
    with pytest.raises(ShapeError):
        fold_bn(np.ones((2, 1, 1, 1)), None, BNParams([1.0], [0.0], [0.0], [1.0]))


def random_bn(rng, c):
    return BNParams(rng.uniform(0.5, 2, c), rng.standard_normal(c), rng.standard_normal(c) * 0.3,
                    rng.uniform(0.1, 3, c), eps=1e-5)


def test_fold_equivalence(rng):
    for _ in range(5):
        _, layer = random_layer(rng, 6, 16, 3, 8, 16, pad=1)
        bn = random_bn(rng, 6)
        act = bfp_encode_tensor(np.abs(rng.standard_normal((1, 16, 6, 6))), 8, 16)
        ref = bn.apply(oracle(layer, act))
        folded = fold_bn_layer(layer, bn)
        assert np.array_equal(folded.vqk, layer.vqk)
        assert rel_rms(dsconv_forward(folded, act), ref) <= 1e-4


# -- model pipeline ---------------------------------------------------------

def test_single_layer_model_is_encode_then_forward(rng):
    _, layer = random_layer(rng, 3, 5, 3, 6, 2)
    x = np.abs(rng.standard_normal((1, 5, 6, 6))).astype(np.float32)
    direct = dsconv_forward(layer, bfp_encode_tensor(x, 6, 2))
    assert np.array_equal(run_model([layer], x), direct)


def test_identity_pipeline(rng):
    eye = np.eye(6, dtype=np.float32)[:, :, None, None]
    layers = [DSConvLayer.from_weights(eye, None, QuantConfig(8, 1)) for _ in range(2)]
    x = np.abs(rng.standard_normal((1, 6, 5, 5))).astype(np.float32)
    assert rel_rms(run_model(layers, x), x) <= 0.01


def three_layer_model(seed, b=8, B=16):
    rng = np.random.default_rng(seed)
    shapes = [(16, 3, 3, 3), (32, 16, 3, 3), (16, 32, 3, 3)]
    ws = [(rng.standard_normal(s) * np.sqrt(2 / (s[1] * 9))).astype(np.float32) for s in shapes]
    bs = [(rng.standard_normal(s[0]) * 0.1).astype(np.float32) for s in shapes]
    ps = [ConvParams(1, 1)] * 3
    layers = [DSConvLayer.from_weights(w, bb, QuantConfig(b, B), p) for w, bb, p in zip(ws, bs, ps)]
    x = np.abs(rng.standard_normal((1, 3, 16, 16))).astype(np.float32)
    return layers, ws, bs, ps, x


def test_three_layer_model_against_fp_pipeline():
    layers, ws, bs, ps, x = three_layer_model(0)
    assert rel_rms(run_model(layers, x), run_fp_model(ws, bs, ps, x)) <= 0.01


def test_three_layer_model_error_spread():
    # weight rounding alone is ~0.45% per layer at b=8, B=16; three layers
    # compound to roughly 1%, so individual seeds land on either side of it
    errs = []
    for seed in range(8):
        layers, ws, bs, ps, x = three_layer_model(seed)
        errs.append(rel_rms(run_model(layers, x), run_fp_model(ws, bs, ps, x)))
    assert np.median(errs) <= 0.01
    assert max(errs) <= 0.015


def test_three_layer_model_matches_per_layer_oracle():
    layers, ws, bs, ps, x = three_layer_model(1)
    deq = [dequantize(l.vqk, l.kds, l.cfg) for l in layers]
    enc = lambda t, n: bfp_decode(bfp_encode_tensor(t, 8, 16))  # noqa: E731
    ref = run_fp_model(deq, bs, ps, x, act_quant=enc)
    assert rel_rms(run_model(layers, x), ref) <= 1e-5


def test_model_shape_chain_checked(rng):
    _, a = random_layer(rng, 4, 3, 1, 8, 1)
    _, b = random_layer(rng, 2, 5, 1, 8, 1)
    with pytest.raises(ShapeError):
        run_model([a, b], np.ones((1, 3, 2, 2)))
    with pytest.raises(ConfigError):
        run_model([], np.ones((1, 3, 2, 2)))
