"""Denoising affine quantization and sparsification."""

from .qlinalg import (
    MatmulReport,
    backbone_matmul,
    fake_quant_matmul,
    integer_expand_matmul,
    matmul_sweep,
    quantize_matrix,
    quantized_matmul,
)
from .quantizer import (
    CoeffPrecision,
    QuantConfig,
    QuantizedBlock,
    QuantizedTensor,
    ReconstructionStats,
    Rounding,
    affine_forward,
    fake_quantize,
    inject_perturbation,
    quantize_block,
    quantize_tensor,
    reconstruct,
    ridge_solve,
)
from .sparsifier import (
    SparsityConfig,
    SparsityMode,
    SparsityPattern,
    bits_per_element,
    sparsify,
    sparsify_structured,
    sparsify_toward_mean,
    sparsify_zero_baseline,
    ternarize,
)
from .tensor import BlockPartition, Tensor, load_tensor, partition, save_tensor

__version__ = "0.1.0"
