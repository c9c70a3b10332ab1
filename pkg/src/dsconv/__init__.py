"""Block-quantized convolution: integer kernels with per-block scales,
block floating point activations, and analytic cost models."""

from .activations import BFPTensor, bfp_decode, bfp_encode, bfp_encode_tensor
from .cost import (CostReport, cost_report, mac_counts, max_speedup, memory_saving,
                   speed_ratio_threshold)
from .engine import (BNParams, DSConvLayer, MacCounter, dsconv_forward, fold_bn,
                     fold_bn_layer, run_fp_model, run_model)
from .errors import ConfigError, DegenerateBlockError, DSConvError, FormatError, ShapeError
from .fileformat import read_model, read_tensor, write_model, write_tensor
from .tensor import ConvParams, DepthBlock, as_tensor4d, fp_conv_reference, max_abs
from .weights import (QuantConfig, dequantize, kl_fit_scale, quantize_block,
                      quantize_weights)

__version__ = "0.1.0"
