# %% [markdown]
# # Memory and compute cost

# %%
from dsconv.cost import (cost_report, format_percent, format_ratio, memory_saving_exact,
                         speed_ratio_exact)

for c_in, B, b in [(128, 64, 4), (128, 128, 4), (128, 32, 3), (256, 128, 3)]:
    print(f"C_i={c_in:<4} B={B:<4} b={b}: storage {format_percent(memory_saving_exact(c_in, B, b))}")

# %% [markdown]
# Largest INT/FP time ratio that still beats float convolution.

# %%
print("B     " + " ".join(f"{B:>6}" for B in (4, 8, 16, 32, 64, 128)))
for eta in (0, 0.25, 1):
    print(f"eta={eta:<4}" + " ".join(f"{format_ratio(speed_ratio_exact(256, B, eta)):>6}"
                                    for B in (4, 8, 16, 32, 64, 128)))

# %%
r = cost_report((256, 150, 3, 3), B=64, b=4, out_hw=(28, 28))
print(f"per filter position: {r.int_macs_per_filter_position} INT MACs, "
      f"{r.fp_macs_per_filter_position} FP MACs (was {r.int_macs_per_filter_position} FP)")
print(f"whole layer: {r.int_macs:,} INT MACs, {r.fp_macs:,} FP MACs, up to {r.max_speedup}x")
