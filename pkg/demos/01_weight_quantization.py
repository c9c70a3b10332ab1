# %% [markdown]
# # Block quantization of convolution weights
#
# A (C_o, C_i, K_h, K_w) weight tensor becomes an int8 tensor of the same
# shape plus one float32 scale per block of B input channels.

# %%
import numpy as np

from dsconv import QuantConfig, dequantize, kl_fit_scale, quantize_block, quantize_weights

rng = np.random.default_rng(0)
w = (rng.standard_normal((8, 150, 3, 3)) * 0.05).astype(np.float32)

cfg = QuantConfig(b=4, B=64)
vqk, kds = quantize_weights(w, cfg)
print("weights", w.shape, "-> integers", vqk.shape, vqk.dtype, "+ scales", kds.shape)
print("integer range used:", vqk.min(), "..", vqk.max())

# %% [markdown]
# One block by hand: stretch to the largest magnitude, round, then fit the
# scale by least squares.

# %%
block = [1.0, -0.5, 0.25, 0.0]
wq, xi = quantize_block(block, b=4)
print("integers", wq.tolist(), "scale", xi, "reconstruction", (xi * wq).round(6).tolist())
print("KL-fitted scale for the same integers:", round(kl_fit_scale(block, wq), 6))

# %% [markdown]
# Reconstruction error against bit width and block size.

# %%
def rel_err(w, cfg):
    w_hat = dequantize(*quantize_weights(w, cfg), cfg)
    return np.sqrt(np.mean((w_hat - w) ** 2) / np.mean(w**2))

print("b \\ B " + "".join(f"{B:>9}" for B in (1, 4, 16, 64, 150)))
for b in (2, 3, 4, 6, 8):
    print(f"{b:<6}" + "".join(f"{rel_err(w, QuantConfig(b, B)):9.4f}" for B in (1, 4, 16, 64, 150)))
