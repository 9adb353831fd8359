"""Mixed-scheme (fixed-point + sum-of-power-of-2) weight quantization toolkit."""

from .fpga import (
    DesignPoint,
    Device,
    LutCostModel,
    calibrate_lut_model,
    estimate_layer_throughput,
    estimate_network_throughput,
    load_devices,
    peak_throughput,
    select_ratio,
    speedup,
)
from .kernel import GemmTile, dequantize_output, fixed_mac, hetero_gemm, sp2_mac
from .partition import RowPartition, partition_layer, partition_rows
from .quantizers import (
    SP2,
    ActQuant,
    CodeWord,
    FixedPoint,
    PowerOfTwo,
    QuantizedLayer,
    build_levels,
    choose_alpha,
    decode,
    encode,
    project,
    project_matrix,
    quantize_activations,
)
from .tensor import Dataset, Rng, make_synthetic, matmul, row_variance
from .train import MlpModel, TrainConfig, admm_step, backward_ste, forward, train

__version__ = "0.1.0"

__all__ = [
    "ActQuant",
    "admm_step",
    "backward_ste",
    "build_levels",
    "calibrate_lut_model",
    "choose_alpha",
    "CodeWord",
    "Dataset",
    "decode",
    "dequantize_output",
    "DesignPoint",
    "Device",
    "encode",
    "estimate_layer_throughput",
    "estimate_network_throughput",
    "fixed_mac",
    "FixedPoint",
    "forward",
    "GemmTile",
    "hetero_gemm",
    "load_devices",
    "LutCostModel",
    "make_synthetic",
    "matmul",
    "MlpModel",
    "partition_layer",
    "partition_rows",
    "peak_throughput",
    "PowerOfTwo",
    "project",
    "project_matrix",
    "quantize_activations",
    "QuantizedLayer",
    "Rng",
    "row_variance",
    "RowPartition",
    "select_ratio",
    "SP2",
    "sp2_mac",
    "speedup",
    "train",
    "TrainConfig",
]
