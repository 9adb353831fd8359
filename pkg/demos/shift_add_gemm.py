"""
Two GEMM cores, one layer
=========================

Quantize a random layer with a mixed partition, run it through the integer
emulator and check it against a float matmul of the same quantized operands.
"""

import numpy as np

from msq import (
    SP2,
    ActQuant,
    FixedPoint,
    GemmTile,
    Rng,
    choose_alpha,
    dequantize_output,
    hetero_gemm,
    partition_layer,
    project_matrix,
    quantize_activations,
)

rng = Rng(0)
w = rng.normal(size=(40, 27)) * rng.uniform(0.2, 2.0, size=(40, 1))

# Low-variance rows go to SP2 (shift-add), the rest stay fixed-point (multiplier).
part = partition_layer(w, 0.6)
alpha = choose_alpha(w, part.row_schemes(FixedPoint(4), SP2(2, 1)))
wq, layer = project_matrix(w, part, alpha)
print("SP2 rows:", part.sp2_rows.size, "fixed rows:", part.fixed_rows.size, "alpha:", round(alpha, 4))

# 4-bit unsigned activations
x = np.abs(rng.normal(size=(5, 27)))
codes, scale = quantize_activations(x, ActQuant(4, float(x.max())))

# The tile used by the small device's best design point
out, index_map, stats = hetero_gemm(codes, layer, GemmTile(bat=1, blk_in=16, blk_out_fixed=16, blk_out_sp2=24))
y = dequantize_output(out, layer, scale)
ref = (codes * scale) @ wq.T
print("max abs diff vs float:", np.abs(y - ref).max())

# Ragged tiles leave PEs idle: 27 inputs over blk_in=16 wastes 5 of every 32 slots.
print(stats)
print(f"utilization {stats.utilization:.3f}")
