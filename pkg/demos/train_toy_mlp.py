"""
Quantization-aware training of a small MLP
==========================================

Gaussian blobs, one hidden layer, 4-bit weights with two thirds of the rows
on SP2. A float model trained the same way serves as the reference.
"""

import numpy as np

from msq import MlpModel, Rng, TrainConfig, make_synthetic, train

train_set, test_set = make_synthetic(2, 1500, Rng(0)).split(1000)
model = MlpModel.init([8, 16, 2], Rng(100))

cfg = TrainConfig(epochs=30, pr_sp2=2 / 3, seed=0)
result = train(model, train_set, cfg, eval_data=test_set)

for m in result.history[::5]:
    print(f"epoch {m.epoch:2d}  loss {m.loss:.4f}  float {m.float_acc:.3f}  quant {m.quant_acc:.3f}")
print(f"float baseline {result.float_accuracy:.3f}, quantized {result.quant_accuracy:.3f}")

# Every weight left in the model is a grid point of its row's scheme.
for ql in result.layers:
    values = ql.values()
    print(ql.name, ql.shape, "distinct weight values:", np.unique(values).size,
          "SP2 rows:", ql.partition.sp2_rows.size)
