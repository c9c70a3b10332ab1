# %% [markdown]
# # Integer-path convolution
#
# Integer dot products per block, one float multiply per block, checked
# against the plain float convolution of the dequantized operands.

# %%
import numpy as np

from dsconv import (BNParams, ConvParams, DSConvLayer, MacCounter, QuantConfig, bfp_decode,
                    bfp_encode_tensor, dequantize, dsconv_forward, fold_bn_layer,
                    fp_conv_reference, run_fp_model, run_model)

rng = np.random.default_rng(2)
w = (rng.standard_normal((8, 16, 3, 3)) * 0.1).astype(np.float32)
layer = DSConvLayer.from_weights(w, rng.standard_normal(8), QuantConfig(8, 16), ConvParams(1, 1))
x = np.maximum(rng.standard_normal((1, 16, 10, 10)), 0).astype(np.float32)
act = bfp_encode_tensor(x, 8, 16)

counter = MacCounter()
y = dsconv_forward(layer, act, counter=counter)
ref = fp_conv_reference(bfp_decode(act), dequantize(layer.vqk, layer.kds, layer.cfg),
                        layer.bias, layer.params)
full = fp_conv_reference(x, w, layer.bias, layer.params)


def rel(a, r):
    return np.sqrt(np.mean((a - r) ** 2) / np.mean(r**2))


print(f"vs dequantized reference: {rel(y, ref):.2e}   vs float weights/input: {rel(y, full):.2e}")
print(f"FP MACs {counter.fp_macs}, INT MACs {counter.int_macs}")

# %% [markdown]
# Batch norm folds into the scales and bias; the integers are untouched.

# %%
bn = BNParams(rng.uniform(0.5, 2, 8), rng.standard_normal(8), rng.standard_normal(8),
              rng.uniform(0.5, 2, 8))
folded = fold_bn_layer(layer, bn)
print(f"folded vs conv->BN: {rel(dsconv_forward(folded, act), bn.apply(ref)):.2e}")

# %% [markdown]
# A three-layer chain with ReLU between layers, against the all-float chain.

# %%
shapes = [(16, 3, 3, 3), (32, 16, 3, 3), (16, 32, 3, 3)]
ws = [(rng.standard_normal(s) * np.sqrt(2 / (s[1] * 9))).astype(np.float32) for s in shapes]
bs = [np.zeros(s[0], np.float32) for s in shapes]
ps = [ConvParams(1, 1)] * 3
x0 = np.abs(rng.standard_normal((1, 3, 16, 16))).astype(np.float32)
for b in (4, 6, 8):
    layers = [DSConvLayer.from_weights(w_, b_, QuantConfig(b, 16), p) for w_, b_, p in zip(ws, bs, ps)]
    print(f"b={b}: relative RMS at output {rel(run_model(layers, x0), run_fp_model(ws, bs, ps, x0)):.4f}")
