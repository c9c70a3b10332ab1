# %% [markdown]
# # Block floating point activations
#
# Post-ReLU activations are split into depth blocks; each block at each pixel
# shares one exponent and keeps b-bit unsigned mantissas.

# %%
import numpy as np

from dsconv import bfp_decode, bfp_encode, bfp_encode_tensor

m, e = bfp_encode([3.0, 0.4, 1.1], b=3)
print("mantissas", m.tolist(), "shared exponent", e, "decoded", (m * 2.0**e).tolist())

m, e, clamped = bfp_encode([3.9], b=3, return_clamped=True)
print("3.9 at 3 bits:", m.tolist(), "exponent", e, "clamped", clamped.tolist())

# %%
rng = np.random.default_rng(1)
x = np.maximum(rng.standard_normal((1, 32, 8, 8)), 0).astype(np.float32)
for b, B in [(3, 8), (4, 16), (8, 16), (8, 32)]:
    t = bfp_encode_tensor(x, b, B)
    x_hat = bfp_decode(t)
    err = np.sqrt(np.mean((x_hat - x) ** 2) / np.mean(x**2))
    print(f"b={b} B={B:>2}: exponent tensor {t.exponent.shape}, relative RMS {err:.4f}, "
          f"{t.clamp_count} clamped")
