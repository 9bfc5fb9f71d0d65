"""Index-free weight compression with multi-row AbsMaxMin sketches."""

from .analysis import CompressionReport, compare_variants, error_lower_bound, expected_unoccupied, report, verify_bound
from .codec import CompressedTensor, compress_tensor, decompress_tensor
from .quant import QuantSpec, dequantize_state, quantize_state
from .sketch import SketchConfig, SketchState, Variant, compress_unit, decompress_unit, retrieve, update

__version__ = "0.1.0"

__all__ = [
    "CompressedTensor",
    "CompressionReport",
    "QuantSpec",
    "SketchConfig",
    "SketchState",
    "Variant",
    "compare_variants",
    "compress_tensor",
    "compress_unit",
    "decompress_tensor",
    "decompress_unit",
    "dequantize_state",
    "error_lower_bound",
    "expected_unoccupied",
    "quantize_state",
    "report",
    "retrieve",
    "update",
    "verify_bound",
]
